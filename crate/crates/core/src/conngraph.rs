//! Endpoint-proximity connections between primitives.
//!
//! Two primitives are connected when the closest pair of their endpoints
//! (the center, for circles and ellipses) is strictly closer than `epsilon`.
//! Each point then keeps at most `cap` connections, dropped uniformly at
//! random per point, so capped lists need not be symmetric.

use std::collections::HashMap;
use std::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::Vec2;
use crate::vgio::Primitive;

pub const DEFAULT_EPSILON: f64 = 1.0;
pub const DEFAULT_CAP: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConnError {
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("cap must be at least 1")]
    Cap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionGraph {
    /// Sorted connected point indices per point.
    pub neighbors: Vec<Vec<usize>>,
    pub epsilon: f64,
    pub cap: usize,
}

impl ConnectionGraph {
    /// A graph with no connections over `n` points.
    pub fn empty(n: usize) -> Self {
        ConnectionGraph {
            neighbors: vec![Vec::new(); n],
            epsilon: DEFAULT_EPSILON,
            cap: DEFAULT_CAP,
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

/// Minimum distance between the connection points of two primitives.
pub fn endpoint_distance(a: &Primitive, b: &Primitive) -> f64 {
    let (pa, pb) = (a.connection_points(), b.connection_points());
    pa.iter()
        .flat_map(|u| pb.iter().map(move |v| u.dist(*v)))
        .fold(f64::INFINITY, f64::min)
}

fn cell(v: Vec2, eps: f64) -> (i64, i64) {
    ((v.x / eps).floor() as i64, (v.y / eps).floor() as i64)
}

/// Symmetric, uncapped connection lists found through a uniform grid of cell size `epsilon`.
pub fn raw_connections(prims: &[Primitive], epsilon: f64) -> Result<Vec<Vec<usize>>, ConnError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ConnError::Epsilon(epsilon));
    }
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let pts: Vec<Vec<Vec2>> = prims.iter().map(Primitive::connection_points).collect();
    for (i, ps) in pts.iter().enumerate() {
        for &v in ps {
            grid.entry(cell(v, epsilon)).or_default().push(i);
        }
    }
    let eps2 = epsilon * epsilon;
    let mut out = vec![Vec::new(); prims.len()];
    for (i, ps) in pts.iter().enumerate() {
        let mut found: Vec<usize> = Vec::new();
        for &v in ps {
            let (cx, cy) = cell(v, epsilon);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for &j in bucket {
                        if j != i && pts[j].iter().any(|w| v.dist2(*w) < eps2) {
                            found.push(j);
                        }
                    }
                }
            }
        }
        found.sort_unstable();
        found.dedup();
        out[i] = found;
    }
    Ok(out)
}

/// Connection sets with per-point random capping under `seed`.
pub fn build_connections(
    prims: &[Primitive],
    epsilon: f64,
    cap: usize,
    seed: u64,
) -> Result<ConnectionGraph, ConnError> {
    if cap == 0 {
        return Err(ConnError::Cap);
    }
    let mut neighbors = raw_connections(prims, epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for list in neighbors.iter_mut() {
        if list.len() > cap {
            let mut keep: Vec<usize> = rand::seq::index::sample(&mut rng, list.len(), cap)
                .into_iter()
                .map(|k| list[k])
                .collect();
            keep.sort_unstable();
            *list = keep;
        }
    }
    Ok(ConnectionGraph {
        neighbors,
        epsilon,
        cap,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionStats {
    /// `degree_histogram[d]` = number of points with `d` stored connections.
    pub degree_histogram: Vec<usize>,
    /// Connected components of the undirected closure, isolated points included.
    pub components: usize,
    pub directed_edges: usize,
}

pub fn connection_stats(g: &ConnectionGraph) -> ConnectionStats {
    let n = g.len();
    let max_deg = g.neighbors.iter().map(Vec::len).max().unwrap_or(0);
    let mut hist = vec![0; max_deg + 1];
    if n > 0 {
        for l in &g.neighbors {
            hist[l.len()] += 1;
        }
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, l) in g.neighbors.iter().enumerate() {
        for &j in l {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let components = (0..n).filter(|&i| find(&mut parent, i) == i).count();
    ConnectionStats {
        degree_histogram: hist,
        components,
        directed_edges: g.edge_count(),
    }
}

/// Edge list CSV `i,j,d_ij` over stored (directed) connections.
pub fn edges_csv(g: &ConnectionGraph, prims: &[Primitive]) -> String {
    let mut s = String::from("i,j,d_ij\n");
    for (i, l) in g.neighbors.iter().enumerate() {
        for &j in l {
            writeln!(s, "{i},{j},{}", endpoint_distance(&prims[i], &prims[j])).unwrap();
        }
    }
    s
}
