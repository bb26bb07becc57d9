//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::head::DownsampleMode;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synth::AugmentOps;
use crate::tensor::{AdamWConfig, NonFinitePolicy};
use crate::vgio::Category;

use super::TrainError;

/// Every recognized key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("model.profile", "toy | paper: base sizes the other model keys override"),
    ("model.num_queries", "number of learnable symbol queries"),
    ("model.head_dim", "query and mask-feature width"),
    ("model.head_layers", "decoder rounds over the feature pyramid"),
    ("model.share_head_weights", "reuse one set of decoder blocks across rounds"),
    ("model.mask_threshold", "mask probability above which a point is attended"),
    ("model.k_nn", "neighbors per point in the backbone"),
    ("model.channels", "comma-separated backbone widths, finest first"),
    ("model.use_posenc", "relative position encoding in backbone attention"),
    ("model.epsilon", "endpoint distance (px) under which primitives connect"),
    ("model.conn_cap", "maximum connections kept per primitive"),
    ("model.tau", "contrastive temperature"),
    ("train.epochs", "passes over the dataset"),
    ("train.batch_size", "documents per optimizer step"),
    ("train.lr", "AdamW learning rate"),
    ("train.weight_decay", "AdamW decoupled weight decay"),
    ("train.seed", "seed for initialization, shuffling and augmentation"),
    ("train.clip_norm", "global gradient norm clip; 0 disables"),
    ("train.checkpoint_every", "epochs between checkpoints; 0 writes only the last"),
    ("train.non_finite", "abort | skip on non-finite gradients"),
    ("train.weight_bce", "mask cross-entropy weight"),
    ("train.weight_dice", "mask dice weight"),
    ("train.weight_cls", "classification weight"),
    ("train.weight_ccl", "contrastive connection weight"),
    ("data.augment_rotate", "random rotation about the canvas center"),
    ("data.augment_flip", "random horizontal flip"),
    ("data.augment_scale", "random scaling in [0.8, 1.2]"),
    ("data.augment_shift", "random shift up to 10% of the canvas"),
    ("ablation.use_acm", "attend over connected primitives in the first stage"),
    ("ablation.use_ccl", "add the contrastive connection loss"),
    ("ablation.downsample", "knn_interp | knn_max | knn_avg | bilinear"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: String,
    pub num_queries: Option<usize>,
    pub head_dim: Option<usize>,
    pub head_layers: Option<usize>,
    pub share_head_weights: Option<bool>,
    pub mask_threshold: Option<f64>,
    pub k_nn: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub use_posenc: bool,
    pub epsilon: Option<f64>,
    pub conn_cap: Option<usize>,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub non_finite: NonFinitePolicy,
    pub weights: LossWeights,
    pub augment: AugmentOps,
    pub use_acm: bool,
    pub use_ccl: bool,
    pub downsample: DownsampleMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        TrainConfig {
            profile: "toy".into(),
            num_queries: None,
            head_dim: None,
            head_layers: None,
            share_head_weights: None,
            mask_threshold: None,
            k_nn: None,
            channels: None,
            use_posenc: true,
            epsilon: None,
            conn_cap: None,
            tau: 1.0,
            epochs: 100,
            batch_size: 1,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            seed: 0,
            clip_norm: 1.0,
            checkpoint_every: 0,
            non_finite: NonFinitePolicy::Abort,
            weights: LossWeights::default(),
            augment: AugmentOps::NONE,
            use_acm: true,
            use_ccl: true,
            downsample: DownsampleMode::KnnInterp,
        }
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V, TrainError> {
    v.parse()
        .map_err(|_| TrainError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, TrainError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(TrainError::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut c = TrainConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", ln + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), TrainError> {
        match key {
            "model.profile" => self.profile = v.to_string(),
            "model.num_queries" => self.num_queries = Some(parse(key, v)?),
            "model.head_dim" => self.head_dim = Some(parse(key, v)?),
            "model.head_layers" => self.head_layers = Some(parse(key, v)?),
            "model.share_head_weights" => self.share_head_weights = Some(parse_bool(key, v)?),
            "model.mask_threshold" => self.mask_threshold = Some(parse(key, v)?),
            "model.k_nn" => self.k_nn = Some(parse(key, v)?),
            "model.channels" => {
                self.channels = Some(
                    v.split(',')
                        .map(|s| parse(key, s.trim()))
                        .collect::<Result<Vec<usize>, _>>()?,
                )
            }
            "model.use_posenc" => self.use_posenc = parse_bool(key, v)?,
            "model.epsilon" => self.epsilon = Some(parse(key, v)?),
            "model.conn_cap" => self.conn_cap = Some(parse(key, v)?),
            "model.tau" => self.tau = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.clip_norm" => self.clip_norm = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "train.non_finite" => {
                self.non_finite = match v {
                    "abort" => NonFinitePolicy::Abort,
                    "skip" => NonFinitePolicy::Skip,
                    _ => return Err(TrainError::Config(format!("{key}: expected abort or skip, got {v:?}"))),
                }
            }
            "train.weight_bce" => self.weights.bce = parse(key, v)?,
            "train.weight_dice" => self.weights.dice = parse(key, v)?,
            "train.weight_cls" => self.weights.cls = parse(key, v)?,
            "train.weight_ccl" => self.weights.ccl = parse(key, v)?,
            "data.augment_rotate" => self.augment.rotate = parse_bool(key, v)?,
            "data.augment_flip" => self.augment.flip = parse_bool(key, v)?,
            "data.augment_scale" => self.augment.scale = parse_bool(key, v)?,
            "data.augment_shift" => self.augment.shift = parse_bool(key, v)?,
            "ablation.use_acm" => self.use_acm = parse_bool(key, v)?,
            "ablation.use_ccl" => self.use_ccl = parse_bool(key, v)?,
            "ablation.downsample" => self.downsample = v.parse().map_err(|e: String| TrainError::Config(e))?,
            _ => return Err(TrainError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(TrainError::Config("lr must be positive; weight_decay and clip_norm non-negative".into()));
        }
        self.model_config(Vec::new()).map(|_| ())
    }

    /// Model configuration for a category table (may be empty when only
    /// checking that the profile and overrides are consistent).
    pub fn model_config(&self, categories: Vec<Category>) -> Result<ModelConfig, TrainError> {
        let mut m = ModelConfig::profile(&self.profile, categories.clone())?;
        let h = &mut m.head;
        h.num_queries = self.num_queries.unwrap_or(h.num_queries);
        h.head_dim = self.head_dim.unwrap_or(h.head_dim);
        h.head_layers = self.head_layers.unwrap_or(h.head_layers);
        h.share_head_weights = self.share_head_weights.unwrap_or(h.share_head_weights);
        h.mask_threshold = self.mask_threshold.unwrap_or(h.mask_threshold);
        h.downsample = self.downsample;
        let b = &mut m.backbone;
        b.k_nn = self.k_nn.unwrap_or(b.k_nn);
        if let Some(ch) = &self.channels {
            b.channels = ch.clone();
        }
        b.use_acm = self.use_acm;
        b.use_posenc = self.use_posenc;
        m.epsilon = self.epsilon.unwrap_or(m.epsilon);
        m.conn_cap = self.conn_cap.unwrap_or(m.conn_cap);
        m.tau = self.tau;
        if categories.is_empty() {
            m.backbone.validate()?;
            m.head.validate()?;
        } else {
            m.validate()?;
        }
        Ok(m)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            non_finite: self.non_finite,
            ..AdamWConfig::default()
        }
    }

    /// Canonical text with every key, in `CONFIG_KEYS` order.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "default".into());
        let mut s = String::new();
        for (k, _) in CONFIG_KEYS {
            let v = match *k {
                "model.profile" => self.profile.clone(),
                "model.num_queries" => opt(self.num_queries.map(|v| v.to_string())),
                "model.head_dim" => opt(self.head_dim.map(|v| v.to_string())),
                "model.head_layers" => opt(self.head_layers.map(|v| v.to_string())),
                "model.share_head_weights" => opt(self.share_head_weights.map(|v| v.to_string())),
                "model.mask_threshold" => opt(self.mask_threshold.map(|v| v.to_string())),
                "model.k_nn" => opt(self.k_nn.map(|v| v.to_string())),
                "model.channels" => opt(self.channels.as_ref().map(|c| {
                    c.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                })),
                "model.use_posenc" => self.use_posenc.to_string(),
                "model.epsilon" => opt(self.epsilon.map(|v| v.to_string())),
                "model.conn_cap" => opt(self.conn_cap.map(|v| v.to_string())),
                "model.tau" => self.tau.to_string(),
                "train.epochs" => self.epochs.to_string(),
                "train.batch_size" => self.batch_size.to_string(),
                "train.lr" => self.lr.to_string(),
                "train.weight_decay" => self.weight_decay.to_string(),
                "train.seed" => self.seed.to_string(),
                "train.clip_norm" => self.clip_norm.to_string(),
                "train.checkpoint_every" => self.checkpoint_every.to_string(),
                "train.non_finite" => match self.non_finite {
                    NonFinitePolicy::Abort => "abort".into(),
                    NonFinitePolicy::Skip => "skip".into(),
                },
                "train.weight_bce" => self.weights.bce.to_string(),
                "train.weight_dice" => self.weights.dice.to_string(),
                "train.weight_cls" => self.weights.cls.to_string(),
                "train.weight_ccl" => self.weights.ccl.to_string(),
                "data.augment_rotate" => self.augment.rotate.to_string(),
                "data.augment_flip" => self.augment.flip.to_string(),
                "data.augment_scale" => self.augment.scale.to_string(),
                "data.augment_shift" => self.augment.shift.to_string(),
                "ablation.use_acm" => self.use_acm.to_string(),
                "ablation.use_ccl" => self.use_ccl.to_string(),
                "ablation.downsample" => self.downsample.name().into(),
                _ => unreachable!("key table and printer disagree"),
            };
            if v != "default" {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    /// FNV-1a over the canonical text of every key that affects the
    /// trajectory; epoch count and checkpoint cadence are excluded so a run
    /// can be extended on resume.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for line in self.to_text().lines() {
            if line.starts_with("train.epochs") || line.starts_with("train.checkpoint_every") {
                continue;
            }
            for b in line.bytes().chain(std::iter::once(b'\n')) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut c = TrainConfig::default();
        c.channels = Some(vec![8, 16, 32, 64]);
        c.use_ccl = false;
        c.downsample = DownsampleMode::KnnMax;
        c.non_finite = NonFinitePolicy::Skip;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(TrainConfig::parse("model.bogus = 1").is_err());
        assert!(TrainConfig::parse("train.epochs = 0").is_err());
        assert!(TrainConfig::parse("model.profile = huge").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = TrainConfig::default();
        for (k, _) in CONFIG_KEYS {
            let probe = match *k {
                "model.profile" => "toy",
                "model.channels" => "8,8,8,8",
                "model.mask_threshold" | "model.epsilon" | "model.tau" | "train.lr" => "0.5",
                "train.non_finite" => "skip",
                "ablation.downsample" => "bilinear",
                k if k.starts_with("data.") || k.starts_with("ablation.") => "true",
                "model.share_head_weights" | "model.use_posenc" => "false",
                _ => "2",
            };
            c.set(k, probe).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn hash_ignores_epochs() {
        let a = TrainConfig::default();
        let b = TrainConfig { epochs: 7, ..a.clone() };
        let d = TrainConfig { lr: 1e-3, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), d.hash());
    }
}
