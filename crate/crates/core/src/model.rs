//! The full network: backbone + head, per-document sample preparation, the
//! deep-supervised training loss and argmax inference.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{build_geometry, input_matrix, Backbone, BackboneConfig, FeaturePyramid, PyramidGeometry};
use crate::conngraph::{build_connections, ConnError, ConnectionGraph, DEFAULT_CAP, DEFAULT_EPSILON};
use crate::head::{
    assemble_panoptic, level_downsamplers, probabilities, Head, HeadConfig, HeadOutput, MaskDownsampler, Masking,
};
use crate::losses::{
    ccl_loss, ccl_pairs, cls_loss, hungarian_match, mask_losses, matching_cost, total_loss, CclPairs, LossBreakdown,
    LossError, LossWeights,
};
use crate::nn::{ParamStore, Session};
use crate::points::{build_point_set, PointSet};
use crate::tensor::{Tensor, TensorError, Var};
use crate::vgio::{Category, Document, PanopticPrediction};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("document has {points} primitives, fewer than the {stages} backbone stages")]
    TooSmall { points: usize, stages: usize },
    #[error("labels: {0}")]
    Labels(String),
    #[error(transparent)]
    Conn(#[from] ConnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub categories: Vec<Category>,
    pub epsilon: f64,
    pub conn_cap: usize,
    pub tau: f64,
}

impl ModelConfig {
    pub fn profile(name: &str, categories: Vec<Category>) -> Result<Self, ModelError> {
        let (backbone, head) = match name {
            "toy" => (BackboneConfig::toy(), HeadConfig::toy()),
            "paper" => (BackboneConfig::paper(), HeadConfig::paper()),
            _ => return Err(ModelError::Config(format!("unknown profile {name:?} (toy, paper)"))),
        };
        Ok(ModelConfig {
            backbone,
            head,
            categories,
            epsilon: DEFAULT_EPSILON,
            conn_cap: DEFAULT_CAP,
            tau: 1.0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn class_index(&self, semantic_id: i64) -> Option<usize> {
        self.categories.iter().position(|c| c.id == semantic_id)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.categories.is_empty() {
            return Err(ModelError::Config("at least one category is required".into()));
        }
        if !(self.tau > 0.0) {
            return Err(ModelError::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-truth symbols of one document in class-index space.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub classes: Vec<usize>,
    /// One 0/1 row over points per symbol.
    pub masks: Vec<Vec<f64>>,
    /// Class index per point; `None` for background.
    pub point_class: Vec<Option<usize>>,
}

/// Everything about one document that does not depend on the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub points: PointSet,
    pub conn: ConnectionGraph,
    pub geometry: PyramidGeometry,
    pub downsample: Vec<MaskDownsampler>,
    pub inputs: Tensor<f64>,
    pub targets: Option<Targets>,
    pub ccl: Option<CclPairs>,
}

impl Sample {
    pub fn prepare(doc: &Document, cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let points = build_point_set(doc);
        let conn = build_connections(&doc.primitives, cfg.epsilon, cfg.conn_cap, seed)?;
        let geometry = build_geometry(&points.positions(), &conn, &cfg.backbone, seed)?;
        let downsample = level_downsamplers(&geometry, cfg.head.downsample);
        let inputs = input_matrix(&points, doc.diagonal());
        let targets = match &points.labels {
            Some(labels) => Some(targets(labels, cfg)?),
            None => None,
        };
        let ccl = targets.as_ref().map(|t| {
            let knn: Vec<Vec<usize>> = (0..points.len()).map(|i| geometry.levels[0].knn.list(i)).collect();
            ccl_pairs(&knn, &conn.neighbors, &t.point_class)
        });
        Ok(Sample {
            id: doc.id.clone(),
            points,
            conn,
            geometry,
            downsample,
            inputs,
            targets,
            ccl,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn targets(labels: &[(Option<i64>, i64)], cfg: &ModelConfig) -> Result<Targets, ModelError> {
    let n = labels.len();
    let mut point_class = Vec::with_capacity(n);
    // (class, instance or -1 for stuff) -> members
    let mut groups: BTreeMap<(usize, i64), Vec<usize>> = BTreeMap::new();
    for (i, &(sem, inst)) in labels.iter().enumerate() {
        let Some(id) = sem else {
            point_class.push(None);
            continue;
        };
        let c = cfg
            .class_index(id)
            .ok_or_else(|| ModelError::Labels(format!("semantic id {id} is not in the model's category table")))?;
        point_class.push(Some(c));
        let key = if cfg.categories[c].is_thing { inst } else { -1 };
        groups.entry((c, key)).or_default().push(i);
    }
    let mut classes = Vec::with_capacity(groups.len());
    let mut masks = Vec::with_capacity(groups.len());
    for ((c, _), members) in groups {
        let mut m = vec![0.0; n];
        for i in members {
            m[i] = 1.0;
        }
        classes.push(c);
        masks.push(m);
    }
    Ok(Targets {
        classes,
        masks,
        point_class,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub head: HeadOutput,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub use_ccl: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            weights: LossWeights::default(),
            use_ccl: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: Head,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.backbone, &mut rng);
        let head = Head::new(
            &mut store,
            &config.head,
            &config.backbone.channels,
            config.num_classes(),
            &mut rng,
        )?;
        Ok(Model {
            config,
            store,
            backbone,
            head,
        })
    }

    pub fn forward(&self, s: &mut Session<T>, sample: &Sample, masking: Masking) -> Result<ForwardOutput, ModelError> {
        let x = s.constant(sample.inputs.cast());
        let pyramid = self.backbone.forward(s, x, &sample.geometry)?;
        let head = self
            .head
            .forward(s, &pyramid, &sample.geometry, &sample.downsample, masking)?;
        Ok(ForwardOutput { pyramid, head })
    }

    /// Forward plus the loss averaged over every prediction step; the
    /// contrastive term is applied once to the final backbone features.
    pub fn loss(&self, s: &mut Session<T>, sample: &Sample, opts: &LossOptions) -> Result<(Var, LossBreakdown), ModelError> {
        let tg = sample
            .targets
            .as_ref()
            .ok_or_else(|| ModelError::Labels(format!("document {} is unlabeled", sample.id)))?;
        let out = self.forward(s, sample, Masking::Predicted)?;
        let steps = out.head.predictions.len();
        let mut sums: Option<[Var; 3]> = None;
        for p in &out.head.predictions {
            let (probs, _) = probabilities(&s.tape, *p);
            let logits = s.tape.value(p.mask_logits).cast::<f64>();
            let cost = matching_cost(&probs, &logits, &tg.masks, &tg.classes, &opts.weights);
            let m = hungarian_match(&cost)?;
            let (bce, dice) = mask_losses(&mut s.tape, p.mask_logits, &m.pairs, &tg.masks)?;
            let cls = cls_loss(&mut s.tape, p.class_logits, &m, &tg.classes)?;
            sums = Some(match sums {
                None => [bce, dice, cls],
                Some([a, b, c]) => [s.tape.add(a, bce)?, s.tape.add(b, dice)?, s.tape.add(c, cls)?],
            });
        }
        let [bce, dice, cls] = sums.expect("at least one prediction");
        let inv = T::one() / T::c(steps as f64);
        let bce = s.tape.scale(bce, inv)?;
        let dice = s.tape.scale(dice, inv)?;
        let cls = s.tape.scale(cls, inv)?;
        let mut weights = opts.weights;
        let ccl = match (&sample.ccl, opts.use_ccl) {
            (Some(pairs), true) => ccl_loss(&mut s.tape, out.pyramid.levels[0], pairs, self.config.tau)?,
            _ => {
                weights.ccl = 0.0;
                s.constant(Tensor::scalar(T::zero()))
            }
        };
        Ok(total_loss(&mut s.tape, [bce, dice, cls, ccl], &weights)?)
    }

    /// Final class and mask probabilities without gradient tracking.
    pub fn infer(&self, sample: &Sample) -> Result<(Tensor<f64>, Tensor<f64>), ModelError> {
        let mut s = Session::new(&self.store, false);
        let out = self.forward(&mut s, sample, Masking::Predicted)?;
        Ok(probabilities(&s.tape, out.head.last()))
    }

    pub fn predict(&self, sample: &Sample) -> Result<PanopticPrediction, ModelError> {
        let (y, m) = self.infer(sample)?;
        Ok(assemble_panoptic(
            &sample.id,
            &y,
            &m,
            &self.config.categories,
            self.config.head.mask_threshold,
        ))
    }
}
