use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{dataset_categories, TrainConfig, TrainError, Trainer};
use crate::head::DownsampleMode;
use crate::io::write_atomic;
use crate::metrics::{aggregate_scores, score_document, DocumentScore, PanopticScore};
use crate::model::{Model, ModelError, Sample};
use crate::vgio::{serialize_prediction, Category, Document, EntityLabel, PanopticPrediction};
use crate::Scalar;

fn background(doc: &Document) -> PanopticPrediction {
    PanopticPrediction {
        id: doc.id.clone(),
        entities: (0..doc.primitives.len())
            .map(|index| EntityLabel {
                index,
                semantic: None,
                instance: -1,
            })
            .collect(),
    }
}

fn predict_one<T: Scalar>(model: &Model<T>, doc: &Document, seed: u64) -> Result<PanopticPrediction, TrainError> {
    match Sample::prepare(doc, &model.config, seed) {
        Ok(s) => Ok(model.predict(&s)?),
        Err(ModelError::TooSmall { points, stages }) => {
            log::warn!("document {}: {points} primitives < {stages} stages, predicted as background", doc.id);
            Ok(background(doc))
        }
        Err(e) => Err(e.into()),
    }
}

/// Argmax predictions for every document, spread over up to `threads`
/// workers. Output order follows `docs` regardless of thread count.
pub fn predict_documents<T: Scalar>(
    model: &Model<T>,
    docs: &[Document],
    seed: u64,
    threads: usize,
) -> Result<Vec<PanopticPrediction>, TrainError> {
    let threads = threads.clamp(1, docs.len().max(1));
    if threads == 1 {
        return docs.iter().map(|d| predict_one(model, d, seed)).collect();
    }
    let chunk = docs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<PanopticPrediction>, TrainError>> = std::thread::scope(|sc| {
        let handles: Vec<_> = docs
            .chunks(chunk)
            .map(|part| sc.spawn(move || part.iter().map(|d| predict_one(model, d, seed)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(docs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Ground-truth labels as predictions.
pub fn oracle_predictions(docs: &[Document]) -> Vec<PanopticPrediction> {
    docs.iter().map(PanopticPrediction::from_ground_truth).collect()
}

/// Per-document scores and the pooled corpus score. Predictions are matched
/// to documents by id.
pub fn score_predictions(
    docs: &[Document],
    preds: &[PanopticPrediction],
) -> Result<(Vec<DocumentScore>, PanopticScore), TrainError> {
    let categories: Vec<Category> = dataset_categories(docs)?;
    let mut scores = Vec::with_capacity(docs.len());
    for d in docs {
        let p = preds
            .iter()
            .find(|p| p.id == d.id)
            .ok_or_else(|| TrainError::Data(format!("no prediction for document {}", d.id)))?;
        scores.push(score_document(d, p)?);
    }
    let corpus = aggregate_scores(&scores, &categories);
    Ok((scores, corpus))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRow {
    pub id: String,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub corpus: PanopticScore,
    pub documents: Vec<DocumentRow>,
}

impl MetricsReport {
    pub fn new(scores: &[DocumentScore], corpus: PanopticScore) -> Self {
        MetricsReport {
            corpus,
            documents: scores
                .iter()
                .map(|s| {
                    let q = s.quality();
                    DocumentRow {
                        id: s.id.clone(),
                        pq: q.pq,
                        sq: q.sq,
                        rq: q.rq,
                    }
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
        v.push(b'\n');
        v
    }
}

/// Predicts and scores a labeled corpus.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    docs: &[Document],
    seed: u64,
    threads: usize,
) -> Result<(Vec<PanopticPrediction>, MetricsReport), TrainError> {
    let preds = predict_documents(model, docs, seed, threads)?;
    let (scores, corpus) = score_predictions(docs, &preds)?;
    Ok((preds, MetricsReport::new(&scores, corpus)))
}

/// Writes `predictions/<id>.json` and `metrics.json` under `out`.
pub fn write_evaluation(out: &Path, preds: &[PanopticPrediction], report: &MetricsReport) -> Result<(), TrainError> {
    for p in preds {
        write_atomic(&out.join("predictions").join(format!("{}.json", p.id)), &serialize_prediction(p))?;
    }
    write_atomic(&out.join("metrics.json"), &report.to_json())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Connection attention crossed with the contrastive loss.
    Acm,
    Ccl,
    Downsample,
}

impl FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "acm" => Ok(AblationAxis::Acm),
            "ccl" => Ok(AblationAxis::Ccl),
            "downsample" => Ok(AblationAxis::Downsample),
            _ => Err(format!("unknown ablation axis {s:?} (acm, ccl, downsample)")),
        }
    }
}

/// Named configurations of a sweep; every variant keeps the base seed.
pub fn ablation_variants(base: &TrainConfig, axis: AblationAxis) -> Vec<(String, TrainConfig)> {
    let with = |acm: bool, ccl: bool, ds: DownsampleMode| TrainConfig {
        use_acm: acm,
        use_ccl: ccl,
        downsample: ds,
        ..base.clone()
    };
    let ds = base.downsample;
    match axis {
        AblationAxis::Acm => vec![
            ("baseline".into(), with(false, false, ds)),
            ("acm".into(), with(true, false, ds)),
            ("ccl".into(), with(false, true, ds)),
            ("acm+ccl".into(), with(true, true, ds)),
        ],
        AblationAxis::Ccl => vec![
            ("without_ccl".into(), with(base.use_acm, false, ds)),
            ("with_ccl".into(), with(base.use_acm, true, ds)),
        ],
        AblationAxis::Downsample => DownsampleMode::ALL
            .iter()
            .map(|&m| (m.name().to_string(), with(base.use_acm, base.use_ccl, m)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_acm: bool,
    pub use_ccl: bool,
    pub downsample: String,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub f1: f64,
    pub wf1: f64,
}

/// Trains every variant on `train` and scores it on `eval`.
pub fn ablate<T: Scalar>(
    train: &[Document],
    eval: &[Document],
    base: &TrainConfig,
    axis: AblationAxis,
    threads: usize,
    mut on_variant: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>, TrainError> {
    let categories = dataset_categories(train)?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base, axis) {
        let mut t = Trainer::<T>::new(cfg.clone(), categories.clone())?;
        t.train(train, None, |_| {})?;
        let (_, report) = evaluate(&t.model, eval, cfg.seed, threads)?;
        let c = report.corpus;
        let row = AblationRow {
            variant: name,
            use_acm: cfg.use_acm,
            use_ccl: cfg.use_ccl,
            downsample: cfg.downsample.name().into(),
            pq: c.pq,
            sq: c.sq,
            rq: c.rq,
            f1: c.f1,
            wf1: c.wf1,
        };
        on_variant(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,use_acm,use_ccl,downsample,pq,sq,rq,f1,wf1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.variant, r.use_acm, r.use_ccl, r.downsample, r.pq, r.sq, r.rq, r.f1, r.wf1
        );
    }
    s
}
