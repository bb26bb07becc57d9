//! Set-prediction losses: bipartite matching, mask BCE and dice, query
//! classification with a down-weighted no-object class, and the contrastive
//! connection loss on backbone features.

use thiserror::Error;

use crate::tensor::{softplus, Result as TResult, Tape, Tensor, TensorError, Var};
use crate::Scalar;

pub const NO_OBJECT_WEIGHT: f64 = 0.1;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("cost matrix has a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("cost matrix rows have unequal lengths")]
    Ragged,
    #[error("non-finite loss term {term}: {value}")]
    NonFinite { term: &'static str, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub ccl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 5.0,
            dice: 5.0,
            cls: 2.0,
            ccl: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query, ground-truth)` pairs sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Minimum-cost injective assignment for an `O × G` cost matrix.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult, LossError> {
    let o = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    for (i, row) in cost.iter().enumerate() {
        if row.len() != g {
            return Err(LossError::Ragged);
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFiniteCost { row: i, col: j });
        }
    }
    if o == 0 || g == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched: (0..o).collect(),
        });
    }
    // rows must be the smaller side
    let transposed = o > g;
    let (n, m) = if transposed { (g, o) } else { (o, g) };
    let at = |i: usize, j: usize| if transposed { cost[j][i] } else { cost[i][j] };
    let assign = shortest_augmenting_path(n, m, at);
    let mut pairs: Vec<(usize, usize)> = assign
        .iter()
        .enumerate()
        .map(|(i, &j)| if transposed { (j, i) } else { (i, j) })
        .collect();
    pairs.sort_unstable();
    let mut used = vec![false; o];
    for &(q, _) in &pairs {
        used[q] = true;
    }
    Ok(MatchResult {
        pairs,
        unmatched: (0..o).filter(|&q| !used[q]).collect(),
    })
}

/// Potential-based Hungarian algorithm for `n ≤ m`; returns the column of each row.
fn shortest_augmenting_path(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Mean binary cross-entropy of a logit row against a 0/1 target.
pub fn bce_from_logits(z: &[f64], g: &[f64]) -> f64 {
    z.iter().zip(g).map(|(&z, &g)| softplus(z) - g * z).sum::<f64>() / z.len().max(1) as f64
}

/// Soft dice loss `1 - 2|P∩G| / (|P| + |G|)` on probabilities.
pub fn dice(p: &[f64], g: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let den: f64 = p.iter().sum::<f64>() + g.iter().sum::<f64>();
    if den == 0.0 {
        0.0
    } else {
        1.0 - 2.0 * inter / den
    }
}

/// `O × G` cost `w_bce·BCE + w_dice·dice − w_cls·p(class)` from class
/// probabilities and mask logits.
pub fn matching_cost(
    class_probs: &Tensor<f64>,
    mask_logits: &Tensor<f64>,
    gt_masks: &[Vec<f64>],
    gt_classes: &[usize],
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    (0..class_probs.rows())
        .map(|q| {
            let z = mask_logits.row(q);
            let p: Vec<f64> = z.iter().map(|&v| crate::tensor::sigmoid(v)).collect();
            gt_masks
                .iter()
                .zip(gt_classes)
                .map(|(g, &c)| w.bce * bce_from_logits(z, g) + w.dice * dice(&p, g) - w.cls * class_probs.at(q, c))
                .collect()
        })
        .collect()
}

fn targets<T: Scalar>(pairs: &[(usize, usize)], gt_masks: &[Vec<f64>]) -> Tensor<T> {
    let n = gt_masks.first().map_or(0, Vec::len);
    let data = pairs
        .iter()
        .flat_map(|&(_, g)| gt_masks[g].iter().map(|&v| T::c(v)))
        .collect();
    Tensor::new(&[pairs.len(), n], data).expect("target shape")
}

/// `(BCE, dice)` over matched pairs; both zero when nothing is matched.
pub fn mask_losses<T: Scalar>(
    tape: &mut Tape<T>,
    mask_logits: Var,
    pairs: &[(usize, usize)],
    gt_masks: &[Vec<f64>],
) -> TResult<(Var, Var)> {
    if pairs.is_empty() {
        let z = tape.constant(Tensor::scalar(T::zero()));
        return Ok((z, z));
    }
    let q: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let z = tape.gather_rows(mask_logits, &q)?;
    let g = tape.constant(targets(pairs, gt_masks));
    let sp = tape.softplus(z)?;
    let gz = tape.mul(g, z)?;
    let b = tape.sub(sp, gz)?;
    let bce = tape.mean(b)?;

    let p = tape.sigmoid(z)?;
    let pg = tape.mul(p, g)?;
    let inter = tape.sum_axis(pg, 1)?;
    let ps = tape.sum_axis(p, 1)?;
    let gs = tape.sum_axis(g, 1)?;
    let den = tape.add(ps, gs)?;
    let ratio = tape.div(inter, den)?;
    let ratio = tape.scale(ratio, T::c(-2.0))?;
    let d = tape.add_scalar(ratio, T::one())?;
    let dice = tape.mean(d)?;
    Ok((bce, dice))
}

/// Weighted cross-entropy: matched queries target their ground-truth class,
/// the rest target the no-object class `C` with weight [`NO_OBJECT_WEIGHT`].
pub fn cls_loss<T: Scalar>(
    tape: &mut Tape<T>,
    class_logits: Var,
    m: &MatchResult,
    gt_classes: &[usize],
) -> TResult<Var> {
    let o = tape.value(class_logits).rows();
    let c1 = tape.value(class_logits).row_len();
    let mut target = vec![c1 - 1; o];
    let mut weight = vec![NO_OBJECT_WEIGHT; o];
    for &(q, g) in &m.pairs {
        target[q] = gt_classes[g];
        weight[q] = 1.0;
    }
    let total: f64 = weight.iter().sum();
    let lp = tape.log_softmax(class_logits, 1)?;
    let flat = tape.reshape(lp, &[o * c1, 1])?;
    let idx: Vec<usize> = (0..o).map(|q| q * c1 + target[q]).collect();
    let picked = tape.gather_rows(flat, &idx)?;
    let picked = tape.scale_rows(picked, weight.iter().map(|w| T::c(-w / total)).collect())?;
    tape.sum(picked)
}

/// Anchor/neighbor pairs for the contrastive connection loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CclPairs {
    pub n: usize,
    pub anchor: Vec<usize>,
    pub other: Vec<usize>,
    pub same: Vec<bool>,
    /// Anchors with at least one same-label neighbor.
    pub kept: Vec<usize>,
}

/// Pairs over `A(p_i) = M(p_i) ∪ C(p_i)` without the anchor itself; `labels`
/// may use any encoding, including one for background.
pub fn ccl_pairs<L: PartialEq>(knn: &[Vec<usize>], conn: &[Vec<usize>], labels: &[L]) -> CclPairs {
    let n = labels.len();
    let (mut anchor, mut other, mut same, mut kept) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let mut set: Vec<usize> = Vec::new();
        for &j in knn.get(i).into_iter().flatten().chain(conn.get(i).into_iter().flatten()) {
            if j != i && !set.contains(&j) {
                set.push(j);
            }
        }
        let mut any = false;
        for j in set {
            let s = labels[j] == labels[i];
            any |= s;
            anchor.push(i);
            other.push(j);
            same.push(s);
        }
        if any {
            kept.push(i);
        }
    }
    CclPairs {
        n,
        anchor,
        other,
        same,
        kept,
    }
}

/// Rows scaled to unit length.
pub fn l2_normalize_rows<T: Scalar>(tape: &mut Tape<T>, f: Var) -> TResult<Var> {
    let n = tape.value(f).rows();
    let d = tape.value(f).row_len();
    let sq = tape.mul(f, f)?;
    let s = tape.sum_axis(sq, 1)?;
    let s = tape.add_scalar(s, T::c(NORM_EPS))?;
    let norm = tape.sqrt(s)?;
    let ones = tape.constant(Tensor::full(&[n], T::one()));
    let inv = tape.div(ones, norm)?;
    let inv = tape.reshape(inv, &[n, 1])?;
    let row = tape.constant(Tensor::full(&[1, d], T::one()));
    let inv = tape.matmul(inv, row)?;
    tape.mul(f, inv)
}

/// Mean over kept anchors of
/// `-log Σ_same exp(-d/τ) / Σ_all exp(-d/τ)` with `d` the Euclidean distance
/// between L2-normalized features.
pub fn ccl_loss<T: Scalar>(tape: &mut Tape<T>, features: Var, pairs: &CclPairs, tau: f64) -> TResult<Var> {
    if !(tau > 0.0) {
        return Err(TensorError::Domain {
            op: "ccl_loss",
            detail: format!("temperature must be positive, got {tau}"),
        });
    }
    if pairs.kept.is_empty() {
        let f = tape.sum(features)?;
        return tape.scale(f, T::zero());
    }
    let f = l2_normalize_rows(tape, features)?;
    let fi = tape.gather_rows(f, &pairs.anchor)?;
    let fj = tape.gather_rows(f, &pairs.other)?;
    let diff = tape.sub(fi, fj)?;
    let sq = tape.mul(diff, diff)?;
    let d2 = tape.sum_axis(sq, 1)?;
    let d2 = tape.add_scalar(d2, T::c(NORM_EPS))?;
    let d = tape.sqrt(d2)?;
    let e = tape.scale(d, T::c(-1.0 / tau))?;
    let e = tape.exp(e)?;
    let num = tape.scale_rows(e, pairs.same.iter().map(|&s| if s { T::one() } else { T::zero() }).collect())?;
    let num = tape.scatter_add_rows(num, &pairs.anchor, pairs.n)?;
    let den = tape.scatter_add_rows(e, &pairs.anchor, pairs.n)?;
    let num = tape.gather_rows(num, &pairs.kept)?;
    let den = tape.gather_rows(den, &pairs.kept)?;
    let ln = tape.log(num)?;
    let ld = tape.log(den)?;
    let l = tape.sub(ld, ln)?;
    tape.mean(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub ccl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("bce", self.bce),
            ("dice", self.dice),
            ("cls", self.cls),
            ("ccl", self.ccl),
            ("total", self.total),
        ]
    }
}

/// Weighted sum of the four terms; any non-finite term is an error naming it.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    terms: [Var; 4],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown), LossError> {
    let names = ["bce", "dice", "cls", "ccl"];
    let ws = [w.bce, w.dice, w.cls, w.ccl];
    let mut vals = [0.0; 4];
    for k in 0..4 {
        let v = tape.value(terms[k]).item().f64();
        if !v.is_finite() {
            return Err(LossError::NonFinite { term: names[k], value: v });
        }
        vals[k] = v;
    }
    let mut acc: Option<Var> = None;
    for k in 0..4 {
        if ws[k] == 0.0 {
            continue;
        }
        let t = tape.scale(terms[k], T::c(ws[k]))?;
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    let total = match acc {
        Some(v) => v,
        None => {
            let z = tape.scale(terms[0], T::zero())?;
            z
        }
    };
    let tv = tape.value(total).item().f64();
    if !tv.is_finite() {
        return Err(LossError::NonFinite { term: "total", value: tv });
    }
    Ok((
        total,
        LossBreakdown {
            bce: vals[0],
            dice: vals[1],
            cls: vals[2],
            ccl: vals[3],
            total: tv,
        },
    ))
}
