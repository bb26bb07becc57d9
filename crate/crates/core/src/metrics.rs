//! Panoptic quality over primitive sets and length-weighted semantic F1.
//!
//! Segment overlap is measured with a length-weighted IoU: every primitive
//! contributes `ln(1 + length)`. Stuff primitives of one class form a single
//! segment; background never forms a segment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vgio::{Category, Document, PanopticPrediction, VgioError};

/// A strict lower bound: matches need IoU above this value.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("label sequences differ in length: {pred} predicted, {gt} ground truth, {lengths} lengths")]
    LengthMismatch { pred: usize, gt: usize, lengths: usize },
    #[error("prediction {pred:?} does not belong to document {doc:?}")]
    WrongDocument { pred: String, doc: String },
    #[error(transparent)]
    Vgio(#[from] VgioError),
}

/// One symbol: a label, an instance id and its member primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolSegment {
    pub label: i64,
    /// `-1` for stuff.
    pub instance: i64,
    /// Sorted, unique primitive indices.
    pub members: Vec<usize>,
    /// Length of each member in pixels, aligned with `members`.
    pub lengths: Vec<f64>,
}

impl SymbolSegment {
    fn weight_of(&self) -> BTreeMap<usize, f64> {
        self.members
            .iter()
            .zip(&self.lengths)
            .map(|(&e, &l)| (e, (1.0 + l).ln()))
            .collect()
    }
}

/// Groups labeled primitives into segments. Labels whose category is stuff
/// are merged per class regardless of instance id; unknown labels are
/// treated like things.
pub fn segments(labels: &[(Option<i64>, i64)], lengths: &[f64], categories: &[Category]) -> Vec<SymbolSegment> {
    let is_stuff = |id: i64| categories.iter().any(|c| c.id == id && !c.is_thing);
    let mut groups: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (e, &(sem, inst)) in labels.iter().enumerate() {
        if let Some(l) = sem {
            let z = if is_stuff(l) { -1 } else { inst };
            groups.entry((l, z)).or_default().push(e);
        }
    }
    groups
        .into_iter()
        .map(|((label, instance), members)| SymbolSegment {
            label,
            instance,
            lengths: members.iter().map(|&e| lengths[e]).collect(),
            members,
        })
        .collect()
}

/// Length-weighted IoU of two segments of the same document.
pub fn primitive_iou(p: &SymbolSegment, g: &SymbolSegment) -> f64 {
    let wp = p.weight_of();
    let wg = g.weight_of();
    let mut inter = 0.0;
    let mut union: f64 = wp.values().sum();
    for (e, w) in &wg {
        if wp.contains_key(e) {
            inter += w;
        } else {
            union += w;
        }
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentMatch {
    /// `(pred index, gt index, IoU)`.
    pub matched: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// Pairs predicted and ground-truth segments with equal labels and IoU above
/// one half. Such a pair is unique for each segment, so greedy is exact.
pub fn match_segments(pred: &[SymbolSegment], gt: &[SymbolSegment]) -> SegmentMatch {
    let mut gt_used = vec![false; gt.len()];
    let mut out = SegmentMatch::default();
    for (i, p) in pred.iter().enumerate() {
        let hit = gt.iter().enumerate().find_map(|(j, g)| {
            if gt_used[j] || g.label != p.label {
                return None;
            }
            let iou = primitive_iou(p, g);
            (iou > MATCH_IOU).then_some((j, iou))
        });
        match hit {
            Some((j, iou)) => {
                gt_used[j] = true;
                out.matched.push((i, j, iou));
            }
            None => out.unmatched_pred.push(i),
        }
    }
    out.unmatched_gt = (0..gt.len()).filter(|&j| !gt_used[j]).collect();
    out
}

/// Raw panoptic counts; pooled by summation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PanopticCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PanopticCounts {
    pub fn add(&mut self, o: &PanopticCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }

    pub fn quality(&self) -> Quality {
        let tp = self.tp as f64;
        let denom = tp + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if self.tp == 0 || denom == 0.0 {
            return Quality::default();
        }
        let rq = tp / denom;
        let sq = self.iou_sum / tp;
        Quality { pq: sq * rq, sq, rq }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Quality from the IoUs of true positives and the unmatched counts.
pub fn panoptic_quality(tp_ious: &[f64], fp: usize, fn_: usize) -> Quality {
    PanopticCounts {
        tp: tp_ious.len(),
        fp,
        fn_,
        iou_sum: tp_ious.iter().sum(),
    }
    .quality()
}

/// Plain and length-weighted semantic counts over non-background primitives.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SemanticCounts {
    pub correct: f64,
    pub predicted: f64,
    pub labeled: f64,
    pub w_correct: f64,
    pub w_predicted: f64,
    pub w_labeled: f64,
}

impl SemanticCounts {
    pub fn add(&mut self, o: &SemanticCounts) {
        self.correct += o.correct;
        self.predicted += o.predicted;
        self.labeled += o.labeled;
        self.w_correct += o.w_correct;
        self.w_predicted += o.w_predicted;
        self.w_labeled += o.w_labeled;
    }

    /// `(F1, wF1)`.
    pub fn f1(&self) -> (f64, f64) {
        (
            f1(self.correct, self.predicted, self.labeled),
            f1(self.w_correct, self.w_predicted, self.w_labeled),
        )
    }
}

fn f1(correct: f64, predicted: f64, labeled: f64) -> f64 {
    if predicted <= 0.0 || labeled <= 0.0 || correct <= 0.0 {
        return 0.0;
    }
    let p = correct / predicted;
    let r = correct / labeled;
    2.0 * p * r / (p + r)
}

pub fn semantic_counts(
    pred: &[Option<i64>],
    gt: &[Option<i64>],
    lengths: &[f64],
) -> Result<SemanticCounts, MetricsError> {
    if pred.len() != gt.len() || gt.len() != lengths.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
            lengths: lengths.len(),
        });
    }
    let mut c = SemanticCounts::default();
    for ((p, g), &l) in pred.iter().zip(gt).zip(lengths) {
        if p.is_some() {
            c.predicted += 1.0;
            c.w_predicted += l;
        }
        if g.is_some() {
            c.labeled += 1.0;
            c.w_labeled += l;
            if p == g {
                c.correct += 1.0;
                c.w_correct += l;
            }
        }
    }
    Ok(c)
}

/// Micro F1 and length-weighted F1 over non-background primitives.
pub fn semantic_f1(pred: &[Option<i64>], gt: &[Option<i64>], lengths: &[f64]) -> Result<(f64, f64), MetricsError> {
    Ok(semantic_counts(pred, gt, lengths)?.f1())
}

/// Everything needed to pool one document into a corpus score.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DocumentScore {
    pub id: String,
    pub counts: PanopticCounts,
    pub per_class: BTreeMap<i64, PanopticCounts>,
    pub semantic: SemanticCounts,
}

impl DocumentScore {
    pub fn quality(&self) -> Quality {
        self.counts.quality()
    }
}

/// Scores one prediction against its labeled document.
pub fn score_document(doc: &Document, pred: &PanopticPrediction) -> Result<DocumentScore, MetricsError> {
    if pred.id != doc.id {
        return Err(MetricsError::WrongDocument {
            pred: pred.id.clone(),
            doc: doc.id.clone(),
        });
    }
    let n = doc.primitives.len();
    let dense = pred.dense(n)?;
    let lengths: Vec<f64> = doc.primitives.iter().map(|p| p.arc_length()).collect();
    let gt_labels: Vec<(Option<i64>, i64)> = doc.primitives.iter().map(|p| (p.semantic, p.instance)).collect();
    let pred_labels: Vec<(Option<i64>, i64)> = dense.iter().map(|e| (e.semantic, e.instance)).collect();
    let gs = segments(&gt_labels, &lengths, &doc.categories);
    let ps = segments(&pred_labels, &lengths, &doc.categories);
    let m = match_segments(&ps, &gs);

    let mut per_class: BTreeMap<i64, PanopticCounts> = BTreeMap::new();
    for s in gs.iter().chain(&ps) {
        per_class.entry(s.label).or_default();
    }
    for &(i, _, iou) in &m.matched {
        let c = per_class.get_mut(&ps[i].label).expect("class entry");
        c.tp += 1;
        c.iou_sum += iou;
    }
    for &i in &m.unmatched_pred {
        per_class.get_mut(&ps[i].label).expect("class entry").fp += 1;
    }
    for &j in &m.unmatched_gt {
        per_class.get_mut(&gs[j].label).expect("class entry").fn_ += 1;
    }
    let mut counts = PanopticCounts::default();
    for c in per_class.values() {
        counts.add(c);
    }

    let sem_pred: Vec<Option<i64>> = pred_labels.iter().map(|l| l.0).collect();
    let sem_gt: Vec<Option<i64>> = gt_labels.iter().map(|l| l.0).collect();
    let semantic = semantic_counts(&sem_pred, &sem_gt, &lengths)?;
    Ok(DocumentScore {
        id: doc.id.clone(),
        counts,
        per_class,
        semantic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub id: i64,
    pub name: String,
    pub is_thing: bool,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Corpus-level scores pooled over documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticScore {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
    pub wf1: f64,
    pub documents: usize,
    pub per_class: Vec<ClassRow>,
}

/// Pools counts over documents (in the given order) before forming ratios.
/// Class names come from `categories`; classes seen only in predictions get
/// a placeholder name.
pub fn aggregate_scores(docs: &[DocumentScore], categories: &[Category]) -> PanopticScore {
    let mut total = PanopticCounts::default();
    let mut semantic = SemanticCounts::default();
    let mut classes: BTreeMap<i64, PanopticCounts> = categories.iter().map(|c| (c.id, Default::default())).collect();
    for d in docs {
        total.add(&d.counts);
        semantic.add(&d.semantic);
        for (id, c) in &d.per_class {
            classes.entry(*id).or_default().add(c);
        }
    }
    let q = total.quality();
    let (f1, wf1) = semantic.f1();
    let per_class = classes
        .into_iter()
        .map(|(id, c)| {
            let cat = categories.iter().find(|k| k.id == id);
            let cq = c.quality();
            ClassRow {
                id,
                name: cat.map_or_else(|| format!("class_{id}"), |k| k.name.clone()),
                is_thing: cat.is_none_or(|k| k.is_thing),
                pq: cq.pq,
                sq: cq.sq,
                rq: cq.rq,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
            }
        })
        .collect();
    PanopticScore {
        pq: q.pq,
        sq: q.sq,
        rq: q.rq,
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        f1,
        wf1,
        documents: docs.len(),
        per_class,
    }
}
