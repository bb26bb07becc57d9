//! Random fixtures and brute-force reference implementations shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

pub mod grad;

use std::f64::consts::PI;

use rand::Rng;
use symspot::geom::Vec2;
use symspot::vgio::{Document, Primitive};

/// A document of `n` random primitives where many lines reuse an earlier
/// endpoint up to a small jitter, so connection sets are non-trivial.
pub fn random_document(rng: &mut impl Rng, n: usize, canvas: f64) -> Document {
    let mut anchors: Vec<Vec2> = Vec::new();
    let mut prims = Vec::with_capacity(n);
    let point = |rng: &mut dyn rand::RngCore| Vec2::new(rng.gen_range(0.0..canvas), rng.gen_range(0.0..canvas));
    while prims.len() < n {
        let p = match rng.gen_range(0..10) {
            0..=5 => {
                let a = if !anchors.is_empty() && rng.gen_bool(0.6) {
                    let base = anchors[rng.gen_range(0..anchors.len())];
                    base + Vec2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))
                } else {
                    point(rng)
                };
                let b = a + Vec2::from_polar(rng.gen_range(1.0..30.0), rng.gen_range(0.0..2.0 * PI));
                Primitive::line(a, b)
            }
            6 | 7 => {
                let a0 = rng.gen_range(-PI..PI);
                Primitive::arc(point(rng), rng.gen_range(1.0..20.0), a0, a0 + rng.gen_range(0.1..2.0 * PI))
            }
            8 => Primitive::circle(point(rng), rng.gen_range(0.5..10.0)),
            _ => Primitive::ellipse(
                point(rng),
                rng.gen_range(0.5..10.0),
                rng.gen_range(0.5..10.0),
                rng.gen_range(0.0..PI),
            ),
        };
        if let Ok(p) = p {
            anchors.extend(p.connection_points());
            prims.push(p);
        }
    }
    Document {
        id: "random".into(),
        width: canvas,
        height: canvas,
        categories: Vec::new(),
        primitives: prims,
    }
}

/// Points where connections are measured, derived from geometry directly.
fn oracle_points(p: &Primitive) -> Vec<Vec2> {
    match p.endpoints() {
        Some((a, b)) => vec![a, b],
        None => vec![p.center().unwrap()],
    }
}

/// Every pair closer than `eps` at their nearest connection points.
pub fn brute_connections(prims: &[Primitive], eps: f64) -> Vec<Vec<usize>> {
    let pts: Vec<Vec<Vec2>> = prims.iter().map(oracle_points).collect();
    (0..prims.len())
        .map(|i| {
            (0..prims.len())
                .filter(|&j| {
                    j != i && {
                        let d = pts[i]
                            .iter()
                            .flat_map(|a| pts[j].iter().map(move |b| (a.x - b.x).hypot(a.y - b.y)))
                            .fold(f64::INFINITY, f64::min);
                        d < eps
                    }
                })
                .collect()
        })
        .collect()
}

/// Inverse-distance interpolation over the `k` nearest sources by full sort,
/// with coincident sources taking all weight.
pub fn brute_interpolate(values: &[f64], src: &[Vec2], tgt: &[Vec2], k: usize) -> Vec<f64> {
    let k = k.min(src.len());
    tgt.iter()
        .map(|t| {
            let mut order: Vec<(f64, usize)> = src
                .iter()
                .enumerate()
                .map(|(i, s)| ((s.x - t.x).powi(2) + (s.y - t.y).powi(2), i))
                .collect();
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let near = &order[..k];
            if near[0].0.sqrt() < 1e-8 {
                return values[near[0].1];
            }
            let num: f64 = near.iter().map(|&(d2, i)| values[i] / d2.sqrt()).sum();
            let den: f64 = near.iter().map(|&(d2, _)| 1.0 / d2.sqrt()).sum();
            num / den
        })
        .collect()
}

/// Minimum total cost over all injective assignments of the smaller side.
pub fn exhaustive_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost[0].len();
    let at = |a: usize, b: usize| if rows <= cols { cost[a][b] } else { cost[b][a] };
    let (small, large) = (rows.min(cols), rows.max(cols));
    fn go(i: usize, small: usize, large: usize, used: &mut Vec<bool>, at: &dyn Fn(usize, usize) -> f64) -> f64 {
        if i == small {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                best = best.min(at(i, j) + go(i + 1, small, large, used, at));
                used[j] = false;
            }
        }
        best
    }
    go(0, small, large, &mut vec![false; large], &at)
}

/// Length-weighted IoU computed from membership lists.
pub fn oracle_iou(a: &[usize], b: &[usize], lengths: &[f64]) -> f64 {
    let w = |e: &usize| (1.0 + lengths[*e]).ln();
    let inter: f64 = a.iter().filter(|e| b.contains(e)).map(w).sum();
    let union: f64 = a.iter().map(w).sum::<f64>() + b.iter().filter(|e| !a.contains(e)).map(w).sum::<f64>();
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// A coordinate on a 1/64 grid, so sums and differences stay exact.
pub fn dyadic(rng: &mut impl Rng, lo: i32, hi: i32) -> f64 {
    rng.gen_range(lo * 64..hi * 64) as f64 / 64.0
}
