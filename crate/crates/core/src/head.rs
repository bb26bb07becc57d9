//! Masked-attention query decoder over the four coarsest pyramid levels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, PyramidGeometry, MASKED_LOGIT};
use crate::geom::Vec2;
use crate::model::ModelError;
use crate::neighbors::{idw_weights, knn, knn_with_dist};
use crate::nn::{Linear, Mlp, ParamId, ParamStore, Session};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use crate::vgio::{Category, EntityLabel, PanopticPrediction};
use crate::Scalar;

/// Number of pyramid levels the head attends to.
pub const HEAD_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    KnnInterp,
    KnnMax,
    KnnAvg,
    Bilinear,
}

impl DownsampleMode {
    pub const ALL: [DownsampleMode; 4] = [Self::KnnInterp, Self::KnnMax, Self::KnnAvg, Self::Bilinear];

    pub fn name(self) -> &'static str {
        match self {
            Self::KnnInterp => "knn_interp",
            Self::KnnMax => "knn_max",
            Self::KnnAvg => "knn_avg",
            Self::Bilinear => "bilinear",
        }
    }
}

impl fmt::Display for DownsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DownsampleMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown downsample mode {s:?} (knn_interp, knn_max, knn_avg, bilinear)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_queries: usize,
    pub head_dim: usize,
    pub head_layers: usize,
    pub share_head_weights: bool,
    pub mask_threshold: f64,
    pub downsample: DownsampleMode,
}

impl HeadConfig {
    pub fn toy() -> Self {
        HeadConfig {
            num_queries: 16,
            head_dim: 64,
            head_layers: 3,
            share_head_weights: true,
            mask_threshold: 0.5,
            downsample: DownsampleMode::KnnInterp,
        }
    }

    pub fn paper() -> Self {
        HeadConfig {
            num_queries: 500,
            head_dim: 256,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ModelError> {
        if self.num_queries == 0 || self.head_dim == 0 || self.head_layers == 0 {
            return Err(ModelError::Config("num_queries, head_dim and head_layers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_threshold) {
            return Err(ModelError::Config("mask_threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Linear (or max) maps from level-0 mask values onto one coarser level.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDownsampler {
    pub mode: DownsampleMode,
    /// Per target point: `(level-0 index, weight)`; weights are ignored for max.
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl MaskDownsampler {
    /// Neighborhood size `K = 4^r` (clamped to the source count) for level `r`.
    pub fn build(src: &[Vec2], tgt: &[Vec2], level: usize, mode: DownsampleMode) -> Self {
        let want = 4usize.saturating_pow(level as u32);
        let k = want.min(src.len());
        if want > src.len() {
            log::warn!("mask downsampling K={want} exceeds {} source points; clamped", src.len());
        }
        let entries = match mode {
            DownsampleMode::KnnInterp => idw_weights(src, tgt, k).entries,
            DownsampleMode::KnnMax | DownsampleMode::KnnAvg => knn(src, tgt, k)
                .into_iter()
                .map(|l| {
                    let w = 1.0 / l.len() as f64;
                    l.into_iter().map(|i| (i, w)).collect()
                })
                .collect(),
            DownsampleMode::Bilinear => bilinear_entries(src, tgt),
        };
        MaskDownsampler { mode, entries }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|l| match self.mode {
                DownsampleMode::KnnMax => l.iter().map(|&(i, _)| row[i]).fold(f64::NEG_INFINITY, f64::max),
                _ => l.iter().map(|&(i, w)| w * row[i]).sum(),
            })
            .collect()
    }
}

/// Raster surrogate: level-0 values are splatted onto a `⌈√n⌉²` grid by nearest
/// point, then sampled bilinearly at the targets. The composition is linear,
/// so it is stored as weights over level-0 points.
fn bilinear_entries(src: &[Vec2], tgt: &[Vec2]) -> Vec<Vec<(usize, f64)>> {
    let g = ((src.len() as f64).sqrt().ceil() as usize).max(2);
    let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
    for p in src.iter().chain(tgt) {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let span = Vec2::new((hi.x - lo.x).max(1e-9), (hi.y - lo.y).max(1e-9));
    let step = Vec2::new(span.x / (g - 1) as f64, span.y / (g - 1) as f64);
    let nodes: Vec<Vec2> = (0..g * g)
        .map(|c| Vec2::new(lo.x + (c % g) as f64 * step.x, lo.y + (c / g) as f64 * step.y))
        .collect();
    let nearest: Vec<usize> = knn_with_dist(src, &nodes, 1).into_iter().map(|l| l[0].0).collect();
    tgt.iter()
        .map(|p| {
            let fx = ((p.x - lo.x) / step.x).clamp(0.0, (g - 1) as f64);
            let fy = ((p.y - lo.y) / step.y).clamp(0.0, (g - 1) as f64);
            let (x0, y0) = ((fx.floor() as usize).min(g - 2), (fy.floor() as usize).min(g - 2));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for (dx, dy, w) in [
                (0, 0, (1.0 - tx) * (1.0 - ty)),
                (1, 0, tx * (1.0 - ty)),
                (0, 1, (1.0 - tx) * ty),
                (1, 1, tx * ty),
            ] {
                *acc.entry(nearest[(y0 + dy) * g + x0 + dx]).or_default() += w;
            }
            acc.into_iter().collect()
        })
        .collect()
}

/// Inverse-distance downsampling of every mask row with `K = 4^r`.
pub fn knn_interpolate_mask(mask: &Tensor<f64>, src: &[Vec2], tgt: &[Vec2], level: usize) -> Tensor<f64> {
    let ds = MaskDownsampler::build(src, tgt, level, DownsampleMode::KnnInterp);
    let rows: Vec<Vec<f64>> = (0..mask.rows()).map(|q| ds.apply(mask.row(q))).collect();
    Tensor::new(&[rows.len(), tgt.len()], rows.concat()).expect("mask shape")
}

/// `0` where the value exceeds `threshold`, the masked sentinel otherwise.
pub fn threshold_attention_mask(row: &[f64], threshold: f64) -> Vec<f64> {
    row.iter()
        .map(|&m| if m > threshold { 0.0 } else { MASKED_LOGIT })
        .collect()
}

/// Additive mask for a whole query set; a row that would hide every point is
/// left fully visible.
pub fn attention_mask<T: Scalar>(rows: &[Vec<f64>], threshold: f64) -> Tensor<T> {
    let n = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * n);
    for r in rows {
        let a = threshold_attention_mask(r, threshold);
        if a.iter().all(|&v| v != 0.0) {
            data.extend(std::iter::repeat_n(T::zero(), n));
        } else {
            data.extend(a.into_iter().map(T::c));
        }
    }
    Tensor::new(&[rows.len(), n], data).expect("mask shape")
}

/// `softmax(A + Q·Kᵀ/√d)·V` with an optional additive mask `A`.
pub fn cross_attend<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let d = tape.value(q).row_len();
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, T::one() / T::c(d as f64).sqrt())?;
    if let Some(m) = mask {
        logits = tape.add(logits, m)?;
    }
    let a = tape.softmax(logits, 1)?;
    tape.matmul(a, v)
}

/// `x · Fᵀ` mask logits for query embeddings `x` against point features `f`.
pub fn mask_logits<T: Scalar>(tape: &mut Tape<T>, x: Var, f: Var) -> Result<Var> {
    let ft = tape.transpose(f)?;
    tape.matmul(x, ft)
}

/// One decoder block: masked cross-attention, self-attention, feed-forward,
/// each with a residual and a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBlock {
    pub fq: Linear,
    pub fk: Linear,
    pub fv: Linear,
    sq: Linear,
    sk: Linear,
    sv: Linear,
    so: Linear,
    ffn: Mlp,
}

impl QueryBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let lin = |store: &mut ParamStore<T>, part: &str, rng: &mut _| Linear::new(store, &format!("{name}.{part}"), d, d, rng);
        QueryBlock {
            fq: lin(store, "fq", rng),
            fk: lin(store, "fk", rng),
            fv: lin(store, "fv", rng),
            sq: lin(store, "sq", rng),
            sk: lin(store, "sk", rng),
            sv: lin(store, "sv", rng),
            so: lin(store, "so", rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, 2 * d, d, rng),
        }
    }

    /// `keys`/`values` are the projected level features; `qpos` is added to
    /// queries before every query/key projection.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        x: Var,
        qpos: Var,
        keys: Var,
        values: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let xp = s.tape.add(x, qpos)?;
        let q = self.fq.forward(s, xp)?;
        let a = cross_attend(&mut s.tape, q, keys, values, mask)?;
        let x = s.tape.add(x, a)?;
        let x = s.tape.layer_norm(x)?;

        let xp = s.tape.add(x, qpos)?;
        let q = self.sq.forward(s, xp)?;
        let k = self.sk.forward(s, xp)?;
        let v = self.sv.forward(s, x)?;
        let a = cross_attend(&mut s.tape, q, k, v, None)?;
        let a = self.so.forward(s, a)?;
        let x = s.tape.add(x, a)?;
        let x = s.tape.layer_norm(x)?;

        let f = self.ffn.forward(s, x)?;
        let x = s.tape.add(x, f)?;
        s.tape.layer_norm(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Masking {
    /// Masks derived from the previous prediction.
    Predicted,
    /// Every mask value treated as 1 (all points visible, mask still added).
    ForceOnes,
    /// No additive mask at all.
    Off,
}

/// Class and mask logits of one prediction step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class_logits: Var,
    pub mask_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Initial prediction followed by one per query update.
    pub predictions: Vec<Prediction>,
    pub updates: usize,
}

impl HeadOutput {
    pub fn last(&self) -> Prediction {
        *self.predictions.last().expect("at least the initial prediction")
    }
}

/// Class probabilities (`[O, C+1]`) and mask probabilities (`[O, N]`) of a prediction.
pub fn probabilities<T: Scalar>(tape: &Tape<T>, p: Prediction) -> (Tensor<f64>, Tensor<f64>) {
    let y = tape.value(p.class_logits);
    let c = y.row_len();
    let mut probs = Vec::with_capacity(y.len());
    for row in y.data().chunks(c.max(1)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.f64()));
        let e: Vec<f64> = row.iter().map(|&v| (v.f64() - m).exp()).collect();
        let s: f64 = e.iter().sum();
        probs.extend(e.into_iter().map(|v| v / s));
    }
    let m = tape.value(p.mask_logits);
    let masks = m.data().iter().map(|&v| crate::tensor::sigmoid(v.f64())).collect();
    (
        Tensor::new(y.shape(), probs).expect("same shape"),
        Tensor::new(m.shape(), masks).expect("same shape"),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    pub num_classes: usize,
    level_proj: Vec<Linear>,
    mask_proj: Linear,
    query_feat: ParamId,
    query_pos: ParamId,
    blocks: Vec<QueryBlock>,
    class_head: Linear,
    mask_mlp: Mlp,
}

impl Head {
    /// `channels` are the backbone channel widths per level, finest first.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &HeadConfig,
        channels: &[usize],
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> std::result::Result<Self, ModelError> {
        config.validate()?;
        let r = channels.len();
        if r < HEAD_LEVELS {
            return Err(ModelError::Config(format!(
                "the head needs {HEAD_LEVELS} pyramid levels, the backbone has {r}"
            )));
        }
        let d = config.head_dim;
        let level_proj = (r - HEAD_LEVELS..r)
            .map(|lv| Linear::new(store, &format!("head.level{lv}"), channels[lv], d, rng))
            .collect();
        let mask_proj = Linear::new(store, "head.mask_features", channels[0], d, rng);
        let query_feat = store.add_xavier("head.query_feat", &[config.num_queries, d], rng);
        let query_pos = store.add_xavier("head.query_pos", &[config.num_queries, d], rng);
        let n_blocks = if config.share_head_weights {
            HEAD_LEVELS
        } else {
            HEAD_LEVELS * config.head_layers
        };
        let blocks = (0..n_blocks)
            .map(|b| QueryBlock::new(store, &format!("head.block{b}"), d, rng))
            .collect();
        let class_head = Linear::new(store, "head.class", d, num_classes + 1, rng);
        let mask_mlp = Mlp::new(store, "head.mask_embed", d, d, d, rng);
        Ok(Head {
            config: config.clone(),
            num_classes,
            level_proj,
            mask_proj,
            query_feat,
            query_pos,
            blocks,
            class_head,
            mask_mlp,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Class and mask logits from query features against projected level-0 features.
    pub fn predict_masks<T: Scalar>(&self, s: &mut Session<T>, x: Var, f0: Var) -> Result<Prediction> {
        let h = s.tape.layer_norm(x)?;
        let class_logits = self.class_head.forward(s, h)?;
        let e = self.mask_mlp.forward(s, h)?;
        let mask_logits = mask_logits(&mut s.tape, e, f0)?;
        Ok(Prediction { class_logits, mask_logits })
    }

    /// `downsample[r]` maps level-0 masks onto pyramid level `r`.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        pyramid: &FeaturePyramid,
        geo: &PyramidGeometry,
        downsample: &[MaskDownsampler],
        masking: Masking,
    ) -> Result<HeadOutput> {
        let r = pyramid.levels.len();
        if r < HEAD_LEVELS || downsample.len() != r || geo.levels.len() != r {
            return Err(TensorError::Invalid {
                op: "head_forward",
                detail: format!("need {HEAD_LEVELS}+ levels with matching downsamplers, got {r}"),
            });
        }
        let first = r - HEAD_LEVELS;
        let f0 = self.mask_proj.forward(s, pyramid.levels[0])?;
        let feats: Vec<Var> = (first..r)
            .map(|lv| self.level_proj[lv - first].forward(s, pyramid.levels[lv]))
            .collect::<Result<_>>()?;
        let mut x = s.p(self.query_feat);
        let qpos = s.p(self.query_pos);
        let mut pred = self.predict_masks(s, x, f0)?;
        let mut predictions = vec![pred];
        let mut kv_cache: BTreeMap<(usize, usize), (Var, Var)> = BTreeMap::new();
        let mut updates = 0;
        for round in 0..self.config.head_layers {
            for (j, lv) in (first..r).rev().enumerate() {
                let b = if self.config.share_head_weights {
                    j
                } else {
                    round * HEAD_LEVELS + j
                };
                let block = &self.blocks[b];
                let (keys, values) = match kv_cache.get(&(b, lv)) {
                    Some(&kv) => kv,
                    None => {
                        let f = feats[lv - first];
                        let kv = (block.fk.forward(s, f)?, block.fv.forward(s, f)?);
                        kv_cache.insert((b, lv), kv);
                        kv
                    }
                };
                let mask = match masking {
                    Masking::Off => None,
                    Masking::ForceOnes => {
                        let n = geo.levels[lv].coords.len();
                        let rows = vec![vec![1.0; n]; self.config.num_queries];
                        Some(s.constant(attention_mask(&rows, self.config.mask_threshold)))
                    }
                    Masking::Predicted => {
                        let m = s.tape.value(pred.mask_logits);
                        let rows: Vec<Vec<f64>> = (0..m.rows())
                            .map(|q| {
                                let probs: Vec<f64> = m.row(q).iter().map(|&v| crate::tensor::sigmoid(v.f64())).collect();
                                downsample[lv].apply(&probs)
                            })
                            .collect();
                        Some(s.constant(attention_mask(&rows, self.config.mask_threshold)))
                    }
                };
                x = block.forward(s, x, qpos, keys, values, mask)?;
                updates += 1;
                pred = self.predict_masks(s, x, f0)?;
                predictions.push(pred);
            }
        }
        Ok(HeadOutput { predictions, updates })
    }
}

/// Downsamplers onto every pyramid level (identity-like at level 0).
pub fn level_downsamplers(geo: &PyramidGeometry, mode: DownsampleMode) -> Vec<MaskDownsampler> {
    let src = &geo.levels[0].coords;
    geo.levels
        .iter()
        .enumerate()
        .map(|(r, lv)| MaskDownsampler::build(src, &lv.coords, r, mode))
        .collect()
}

/// Argmax assembly. Each point goes to the kept query with the highest
/// `confidence × mask` among those whose mask exceeds `threshold`; thing
/// queries mint dense per-class instance ids in query order.
pub fn assemble_panoptic(
    id: &str,
    class_probs: &Tensor<f64>,
    mask_probs: &Tensor<f64>,
    categories: &[Category],
    threshold: f64,
) -> PanopticPrediction {
    let no_object = categories.len();
    let n = if mask_probs.rank() == 2 { mask_probs.row_len() } else { 0 };
    let kept: Vec<(usize, usize, f64)> = (0..class_probs.rows())
        .filter_map(|q| {
            let row = class_probs.row(q);
            let (c, p) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best });
            (c != no_object).then_some((q, c, p))
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (pt, slot) in owner.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for (k, &(q, _, conf)) in kept.iter().enumerate() {
            let m = mask_probs.at(q, pt);
            if m > threshold && conf * m > best {
                best = conf * m;
                *slot = Some(k);
            }
        }
    }
    let mut instance_of: BTreeMap<usize, i64> = BTreeMap::new();
    let mut next: BTreeMap<usize, i64> = BTreeMap::new();
    let entities = owner
        .iter()
        .enumerate()
        .map(|(index, o)| match o {
            None => EntityLabel {
                index,
                semantic: None,
                instance: -1,
            },
            Some(k) => {
                let (_, c, _) = kept[*k];
                let cat = &categories[c];
                let instance = if cat.is_thing {
                    *instance_of.entry(*k).or_insert_with(|| {
                        let id = next.entry(c).or_insert(0);
                        *id += 1;
                        *id - 1
                    })
                } else {
                    -1
                };
                EntityLabel {
                    index,
                    semantic: Some(cat.id),
                    instance,
                }
            }
        })
        .collect();
    PanopticPrediction {
        id: id.to_string(),
        entities,
    }
}
