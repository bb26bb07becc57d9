//! Brute-force spatial queries over small point sets: k-nearest neighbors,
//! farthest-point sampling and inverse-distance interpolation weights.
//! Ties are broken by lower index everywhere so results are deterministic.

use std::cmp::Ordering;

use crate::geom::Vec2;

/// Distances below this are treated as coincident points.
pub const EXACT_MATCH_DIST: f64 = 1e-8;

fn by_dist(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` nearest `points` of each query with their distances, nearest first.
/// `k` is clamped to the number of points.
pub fn knn_with_dist(points: &[Vec2], queries: &[Vec2], k: usize) -> Vec<Vec<(usize, f64)>> {
    let k = k.min(points.len());
    let mut buf: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    queries
        .iter()
        .map(|q| {
            if k == 0 {
                return Vec::new();
            }
            buf.clear();
            buf.extend(points.iter().enumerate().map(|(i, p)| (q.dist2(*p), i)));
            if k < buf.len() {
                buf.select_nth_unstable_by(k - 1, by_dist);
                buf.truncate(k);
            }
            buf.sort_unstable_by(by_dist);
            buf.iter().map(|&(d2, i)| (i, d2.sqrt())).collect()
        })
        .collect()
}

pub fn knn(points: &[Vec2], queries: &[Vec2], k: usize) -> Vec<Vec<usize>> {
    knn_with_dist(points, queries, k)
        .into_iter()
        .map(|l| l.into_iter().map(|(i, _)| i).collect())
        .collect()
}

/// Greedy farthest-point sampling of `m` indices starting at `start`.
pub fn farthest_point_sample(points: &[Vec2], m: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = start.min(n - 1);
    for _ in 0..m {
        chosen.push(cur);
        best[cur] = f64::NEG_INFINITY;
        let mut next = None::<(f64, usize)>;
        for (i, p) in points.iter().enumerate() {
            if best[i] == f64::NEG_INFINITY {
                continue;
            }
            best[i] = best[i].min(p.dist2(points[cur]));
            if next.is_none_or(|(d, _)| best[i] > d) {
                next = Some((best[i], i));
            }
        }
        match next {
            Some((_, i)) => cur = i,
            None => break,
        }
    }
    chosen
}

/// Normalized interpolation weights from source points onto each target.
#[derive(Debug, Clone, PartialEq)]
pub struct IdwWeights {
    pub k: usize,
    /// Per target: `(source index, weight)`, weights summing to 1.
    pub entries: Vec<Vec<(usize, f64)>>,
}

/// Weights `(1/d) / Σ(1/d)` over the `k` nearest sources; a source closer than
/// [`EXACT_MATCH_DIST`] takes the whole weight.
pub fn idw_weights(sources: &[Vec2], targets: &[Vec2], k: usize) -> IdwWeights {
    let nn = knn_with_dist(sources, targets, k);
    let entries = nn
        .into_iter()
        .map(|l| {
            if let Some(&(i, d)) = l.first() {
                if d < EXACT_MATCH_DIST {
                    return vec![(i, 1.0)];
                }
            }
            let tot: f64 = l.iter().map(|&(_, d)| 1.0 / d).sum();
            l.into_iter().map(|(i, d)| (i, (1.0 / d) / tot)).collect()
        })
        .collect();
    IdwWeights {
        k: k.min(sources.len()),
        entries,
    }
}

impl IdwWeights {
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|l| l.iter().map(|&(i, w)| w * values[i]).sum())
            .collect()
    }

    /// Flattened `(source index, weight)` lists padded to exactly `k` entries
    /// per target (zero-weight padding points at the first source).
    pub fn padded(&self) -> (Vec<usize>, Vec<f64>) {
        let mut idx = Vec::with_capacity(self.entries.len() * self.k);
        let mut w = Vec::with_capacity(self.entries.len() * self.k);
        for l in &self.entries {
            for slot in 0..self.k {
                match l.get(slot) {
                    Some(&(i, wt)) => {
                        idx.push(i);
                        w.push(wt);
                    }
                    None => {
                        idx.push(l.first().map_or(0, |e| e.0));
                        w.push(0.0);
                    }
                }
            }
        }
        (idx, w)
    }
}
