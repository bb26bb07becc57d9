//! Training, checkpointing, evaluation and ablation sweeps.
//!
//! A batch is a list of documents; each document runs on its own tape, so
//! neighborhoods never cross documents, and the batch gradient is the mean of
//! the per-document gradients. All randomness derives from `(seed, epoch)`,
//! which makes the epoch counter the only RNG state a checkpoint needs.

mod config;
mod eval;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{TrainConfig, CONFIG_KEYS};
pub use eval::{
    ablate, ablation_csv, ablation_variants, evaluate, oracle_predictions, predict_documents, score_predictions,
    write_evaluation, AblationAxis, AblationRow, DocumentRow, MetricsReport,
};

use crate::io::{write_atomic, IoError};
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::model::{LossOptions, Model, ModelError, Sample};
use crate::nn::Session;
use crate::synth::{augment, MANIFEST_FILE};
use crate::tensor::{load_checkpoint, save_checkpoint, AdamW, NonFinitePolicy, StepOutcome, Tensor, TensorError};
use crate::vgio::{parse_document, Category, Document};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss term {term} ({value}) in batch {batch}, document {doc}")]
    NonFinite {
        term: &'static str,
        value: f64,
        batch: usize,
        doc: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl TrainError {
    /// True for errors caused by non-finite numbers rather than bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Tensor(TensorError::Domain { .. })
                | TrainError::Model(ModelError::Tensor(TensorError::Domain { .. }))
                | TrainError::Model(ModelError::Loss(LossError::NonFinite { .. } | LossError::NonFiniteCost { .. }))
        )
    }
}

/// Reads every `*.json` document in `dir` (except the manifest) in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Document>, TrainError> {
    let io = |e| IoError::Io(dir.display().to_string(), e);
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    files.retain(|p| {
        p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != MANIFEST_FILE)
    });
    files.sort();
    let mut docs = Vec::with_capacity(files.len());
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| IoError::Io(f.display().to_string(), e))?;
        let doc = parse_document(&bytes).map_err(|e| TrainError::Data(format!("{}: {e}", f.display())))?;
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(TrainError::Data(format!("{}: no documents", dir.display())));
    }
    Ok(docs)
}

/// The category table shared by every document.
pub fn dataset_categories(docs: &[Document]) -> Result<Vec<Category>, TrainError> {
    let first = docs.first().ok_or_else(|| TrainError::Data("empty dataset".into()))?;
    if let Some(d) = docs.iter().find(|d| d.categories != first.categories) {
        return Err(TrainError::Data(format!(
            "document {} has a different category table than {}",
            d.id, first.id
        )));
    }
    Ok(first.categories.clone())
}

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub ccl: f64,
    pub total: f64,
}

pub fn loss_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from("epoch,bce,dice,cls,ccl,total\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.bce, r.dice, r.cls, r.ccl, r.total);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    step: u64,
    seed: u64,
    config_hash: String,
    config: String,
    categories: Vec<Category>,
    history: Vec<EpochLog>,
}

const PARAM_PREFIX: &str = "param/";
const FIRST_MOMENT_PREFIX: &str = "adam_m/";
const SECOND_MOMENT_PREFIX: &str = "adam_v/";

/// Base path (without extension) of the latest checkpoint in a run directory.
pub fn checkpoint_base(dir: &Path) -> PathBuf {
    dir.join("checkpoint")
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    samples: Vec<Option<Sample>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, categories: Vec<Category>) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(config.model_config(categories)?, config.seed)?;
        let optimizer = AdamW::new(config.optimizer(), model.store.tensors());
        Ok(Trainer {
            config,
            model,
            optimizer,
            epoch: 0,
            history: Vec::new(),
            samples: Vec::new(),
        })
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    fn sample(&mut self, docs: &[Document], i: usize, aug_seed: u64) -> Result<Option<Sample>, TrainError> {
        let cfg = &self.model.config;
        if self.config.augment.any() {
            let doc = augment(&docs[i], self.config.augment, aug_seed).map_err(TrainError::Data)?;
            return prepare_or_skip(&doc, cfg, aug_seed);
        }
        if self.samples.len() != docs.len() {
            self.samples = vec![None; docs.len()];
        }
        if self.samples[i].is_none() {
            self.samples[i] = prepare_or_skip(&docs[i], cfg, self.config.seed)?;
        }
        Ok(self.samples[i].clone())
    }

    /// One pass over `docs` in a seeded order; returns the mean loss terms.
    pub fn run_epoch(&mut self, docs: &[Document]) -> Result<EpochLog, TrainError> {
        let epoch = self.epoch + 1;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rng);
        let aug_seeds: Vec<u64> = order.iter().map(|_| rng.gen()).collect();
        let opts = LossOptions {
            weights: self.config.weights,
            use_ccl: self.config.use_ccl,
        };
        let mut sums = [0.0f64; 5];
        let mut counted = 0usize;
        let batches: Vec<Vec<(usize, u64)>> = order
            .iter()
            .copied()
            .zip(aug_seeds)
            .collect::<Vec<_>>()
            .chunks(self.config.batch_size)
            .map(<[_]>::to_vec)
            .collect();
        for (b, batch) in batches.iter().enumerate() {
            let batch_id = (epoch - 1) * batches.len() + b;
            let mut acc: Option<Vec<Vec<T>>> = None;
            let mut n = 0usize;
            for &(i, seed) in batch {
                let Some(sample) = self.sample(docs, i, seed)? else {
                    continue;
                };
                let mut s = Session::new(&self.model.store, true);
                let (loss, parts) = match self.model.loss(&mut s, &sample, &opts) {
                    Ok(v) => v,
                    Err(ModelError::Loss(e @ (LossError::NonFinite { .. } | LossError::NonFiniteCost { .. }))) => {
                        let (term, value) = match e {
                            LossError::NonFinite { term, value } => (term, value),
                            _ => ("matching_cost", f64::NAN),
                        };
                        let err = TrainError::NonFinite {
                            term,
                            value,
                            batch: batch_id,
                            doc: sample.id.clone(),
                        };
                        if self.config.non_finite == NonFinitePolicy::Skip {
                            log::warn!("{err}; skipping document");
                            continue;
                        }
                        return Err(err);
                    }
                    Err(e) => return Err(e.into()),
                };
                let grads = s.tape.backward(loss)?;
                let g = s.param_grads(&grads);
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&g) {
                            for (p, q) in x.iter_mut().zip(y) {
                                *p += *q;
                            }
                        }
                    }
                }
                for (k, (_, v)) in parts.terms().into_iter().enumerate() {
                    sums[k] += v;
                }
                counted += 1;
                n += 1;
            }
            let Some(mut g) = acc else {
                continue;
            };
            let inv = T::one() / T::c(n as f64);
            let mut sq = 0.0f64;
            for v in g.iter_mut().flatten() {
                *v *= inv;
                sq += v.f64() * v.f64();
            }
            let norm = sq.sqrt();
            if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
                let f = T::c(self.config.clip_norm / norm);
                g.iter_mut().flatten().for_each(|v| *v *= f);
            }
            if self.optimizer.step(self.model.store.tensors_mut(), &g)? == StepOutcome::Skipped {
                log::warn!("batch {batch_id}: non-finite gradient, step skipped");
            }
        }
        let mean = |k: usize| if counted > 0 { sums[k] / counted as f64 } else { 0.0 };
        let log = EpochLog {
            epoch,
            bce: mean(0),
            dice: mean(1),
            cls: mean(2),
            ccl: mean(3),
            total: mean(4),
        };
        self.epoch = epoch;
        self.history.push(log);
        Ok(log)
    }

    /// Runs the remaining epochs up to `config.epochs`. With an output
    /// directory, rewrites `loss.csv` every epoch and writes checkpoints at
    /// the configured cadence and after the last epoch.
    pub fn train(
        &mut self,
        docs: &[Document],
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<(), TrainError> {
        while self.epoch < self.config.epochs {
            let log = self.run_epoch(docs)?;
            on_epoch(&log);
            if let Some(dir) = out {
                write_atomic(&dir.join("loss.csv"), loss_csv(&self.history).as_bytes())?;
                let every = self.config.checkpoint_every;
                if every > 0 && self.epoch % every == 0 && self.epoch < self.config.epochs {
                    self.save(&dir.join(format!("checkpoint_{:05}", self.epoch)))?;
                    self.save(&checkpoint_base(dir))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(&checkpoint_base(dir))?;
        }
        Ok(())
    }

    /// Writes parameters, optimizer moments and run metadata to `<base>.{bin,json}`.
    pub fn save(&self, base: &Path) -> Result<(), TrainError> {
        let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
        let names = self.model.store.names();
        for (name, t) in names.iter().zip(self.model.store.tensors()) {
            tensors.push((format!("{PARAM_PREFIX}{name}"), t));
        }
        for (name, t) in names.iter().zip(&self.optimizer.m) {
            tensors.push((format!("{FIRST_MOMENT_PREFIX}{name}"), t));
        }
        for (name, t) in names.iter().zip(&self.optimizer.v) {
            tensors.push((format!("{SECOND_MOMENT_PREFIX}{name}"), t));
        }
        let meta = CheckpointMeta {
            epoch: self.epoch,
            step: self.optimizer.step,
            seed: self.config.seed,
            config_hash: self.config.hash(),
            config: self.config.to_text(),
            categories: self.model.config.categories.clone(),
            history: self.history.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        save_checkpoint(base, &tensors, meta)?;
        Ok(())
    }

    /// Restores a run. With `config`, the trajectory-relevant settings must
    /// match the stored ones; the epoch target may differ.
    pub fn load(base: &Path, config: Option<TrainConfig>) -> Result<Self, TrainError> {
        let (manifest, tensors) = load_checkpoint::<T>(base)?;
        let meta: CheckpointMeta =
            serde_json::from_value(manifest.meta.clone()).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let stored = TrainConfig::parse(&meta.config)?;
        let config = match config {
            Some(c) if c.hash() != meta.config_hash => {
                return Err(TrainError::Checkpoint(format!(
                    "config hash {} does not match checkpoint {}",
                    c.hash(),
                    meta.config_hash
                )))
            }
            Some(c) => c,
            None => stored,
        };
        let mut t = Trainer::new(config, meta.categories.clone())?;
        let n = t.model.store.len();
        if tensors.len() != 3 * n {
            return Err(TrainError::Checkpoint(format!(
                "expected {} tensors, found {}",
                3 * n,
                tensors.len()
            )));
        }
        for (k, (entry, tensor)) in manifest.entries.iter().zip(tensors).enumerate() {
            let (slot, prefix) = (k % n, [PARAM_PREFIX, FIRST_MOMENT_PREFIX, SECOND_MOMENT_PREFIX][k / n]);
            let want = format!("{prefix}{}", t.model.store.names()[slot]);
            let target = match k / n {
                0 => &mut t.model.store.tensors_mut()[slot],
                1 => &mut t.optimizer.m[slot],
                _ => &mut t.optimizer.v[slot],
            };
            if entry.name != want || tensor.shape() != target.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "entry {} {:?} does not fit {want} {:?}",
                    entry.name,
                    tensor.shape(),
                    target.shape()
                )));
            }
            *target = tensor;
        }
        t.optimizer.step = meta.step;
        t.epoch = meta.epoch;
        t.history = meta.history;
        Ok(t)
    }
}

fn prepare_or_skip(doc: &Document, cfg: &crate::model::ModelConfig, seed: u64) -> Result<Option<Sample>, TrainError> {
    match Sample::prepare(doc, cfg, seed) {
        Ok(s) => Ok(Some(s)),
        Err(ModelError::TooSmall { points, stages }) => {
            log::warn!("document {}: {points} primitives < {stages} stages, skipped", doc.id);
            Ok(None)
        }
        Err(e) => Err(TrainError::Data(format!("document {}: {e}", doc.id))),
    }
}

/// Reads only the run metadata of a checkpoint.
pub fn checkpoint_config(base: &Path) -> Result<(TrainConfig, usize), TrainError> {
    let path = base.with_extension("json");
    let text = std::fs::read(&path).map_err(|e| IoError::Io(path.display().to_string(), e))?;
    let manifest: crate::tensor::CheckpointManifest =
        serde_json::from_slice(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let meta: CheckpointMeta =
        serde_json::from_value(manifest.meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    Ok((TrainConfig::parse(&meta.config)?, meta.epoch))
}
