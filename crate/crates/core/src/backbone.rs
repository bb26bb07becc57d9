//! Point-transformer encoder/decoder over primitive points.
//!
//! Geometry (neighborhoods, downsampling, interpolation weights) depends only on
//! point coordinates and is computed once per sample in [`PyramidGeometry`];
//! the learnable part runs on a [`Session`] tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conngraph::ConnectionGraph;
use crate::geom::Vec2;
use crate::model::ModelError;
use crate::neighbors::{farthest_point_sample, idw_weights, knn, IdwWeights};
use crate::nn::{Linear, Mlp, ParamStore, Session};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use crate::Scalar;

/// Additive logit for padded (invalid) neighborhood slots.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stages: usize,
    /// Sampling ratio per stage; the first entry is 1.
    pub strides: Vec<f64>,
    pub k_nn: usize,
    pub channels: Vec<usize>,
    pub use_acm: bool,
    pub use_posenc: bool,
}

impl BackboneConfig {
    pub fn toy() -> Self {
        BackboneConfig {
            stages: 4,
            strides: vec![1.0, 0.25, 0.25, 0.25],
            k_nn: 8,
            channels: vec![32, 64, 128, 256],
            use_acm: true,
            use_posenc: true,
        }
    }

    pub fn paper() -> Self {
        BackboneConfig {
            k_nn: 16,
            channels: vec![64, 128, 256, 512],
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.stages == 0 {
            return bad("stages must be at least 1");
        }
        if self.strides.len() != self.stages || self.channels.len() != self.stages {
            return bad("strides and channels need one entry per stage");
        }
        if self.strides.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return bad("strides must lie in (0, 1]");
        }
        if self.k_nn == 0 || self.channels.contains(&0) {
            return bad("k_nn and channels must be positive");
        }
        Ok(())
    }
}

/// Fixed-width neighbor table; short lists are padded with invalid slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub width: usize,
    pub index: Vec<usize>,
    pub valid: Vec<bool>,
}

impl Neighborhood {
    /// Every list must be nonempty; padding repeats the list's first entry.
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let width = lists.iter().map(Vec::len).max().unwrap_or(0);
        let mut index = Vec::with_capacity(lists.len() * width);
        let mut valid = Vec::with_capacity(lists.len() * width);
        for l in lists {
            for s in 0..width {
                index.push(*l.get(s).unwrap_or(&l[0]));
                valid.push(s < l.len());
            }
        }
        Neighborhood { width, index, valid }
    }

    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.index.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn list(&self, i: usize) -> Vec<usize> {
        let r = i * self.width..(i + 1) * self.width;
        self.index[r.clone()]
            .iter()
            .zip(&self.valid[r])
            .filter(|(_, &ok)| ok)
            .map(|(&j, _)| j)
            .collect()
    }

    fn has_padding(&self) -> bool {
        self.valid.iter().any(|v| !v)
    }

    /// Row-major `[n * width, 2]` relative offsets `(x_i - x_j) * scale`.
    pub fn relative(&self, coords: &[Vec2], scale: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.index.len() * 2);
        for (slot, &j) in self.index.iter().enumerate() {
            let d = (coords[slot / self.width] - coords[j]) * scale;
            out.push(d.x);
            out.push(d.y);
        }
        out
    }
}

/// `M(p_i) ∪ C(p_i)` per point: kNN order first, then extra connections ascending.
pub fn union_neighbors(knn_lists: &[Vec<usize>], conn: &ConnectionGraph) -> Vec<Vec<usize>> {
    knn_lists
        .iter()
        .zip(&conn.neighbors)
        .map(|(m, c)| {
            let mut l = m.clone();
            for &j in c {
                if !l.contains(&j) {
                    l.push(j);
                }
            }
            l
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelGeometry {
    pub coords: Vec<Vec2>,
    /// Index of each point in the previous (finer) level; identity at level 0.
    pub parent_index: Vec<usize>,
    pub knn: Neighborhood,
    /// Scale applied to relative offsets at this level (inverse mean neighbor distance).
    pub rel_scale: f64,
    /// For levels ≥ 1: `pool_k` nearest points of the previous level per point.
    pub pool: Vec<usize>,
    pub pool_k: usize,
    /// Interpolation from the next (coarser) level onto this one.
    pub up: Option<IdwWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidGeometry {
    pub levels: Vec<LevelGeometry>,
    /// Level-0 attention neighborhood `M ∪ C` for the first encoder stage.
    pub acm: Neighborhood,
}

impl PyramidGeometry {
    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.coords.len()).collect()
    }
}

/// Sorted farthest-point selection of `⌈n·ratio⌉` indices from a seeded start.
pub fn downsample_indices(coords: &[Vec2], ratio: f64, seed: u64) -> Vec<usize> {
    let n = coords.len();
    let m = ((n as f64 * ratio).ceil() as usize).clamp(usize::from(n > 0), n);
    if m == n {
        return (0..n).collect();
    }
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..n);
    let mut idx = farthest_point_sample(coords, m, start);
    idx.sort_unstable();
    idx
}

fn mean_neighbor_distance(coords: &[Vec2], nb: &Neighborhood) -> f64 {
    let (mut s, mut c) = (0.0, 0usize);
    for (slot, &j) in nb.index.iter().enumerate() {
        let i = slot / nb.width;
        if nb.valid[slot] && i != j {
            s += coords[i].dist(coords[j]);
            c += 1;
        }
    }
    if c == 0 || s == 0.0 {
        1.0
    } else {
        c as f64 / s
    }
}

/// Builds all coordinate-only structures of the pyramid.
pub fn build_geometry(
    coords0: &[Vec2],
    conn: &ConnectionGraph,
    cfg: &BackboneConfig,
    seed: u64,
) -> std::result::Result<PyramidGeometry, ModelError> {
    cfg.validate()?;
    let n0 = coords0.len();
    if n0 < cfg.stages || n0 == 0 {
        return Err(ModelError::TooSmall { points: n0, stages: cfg.stages });
    }
    if conn.len() != n0 {
        return Err(ModelError::Config(format!(
            "connection graph has {} points, document has {n0}",
            conn.len()
        )));
    }
    let mut levels: Vec<LevelGeometry> = Vec::with_capacity(cfg.stages);
    let mut acm = None;
    for r in 0..cfg.stages {
        let (coords, parent_index, pool, pool_k) = if r == 0 {
            (coords0.to_vec(), (0..n0).collect(), Vec::new(), 0)
        } else {
            let prev = &levels[r - 1].coords;
            let sel = downsample_indices(prev, cfg.strides[r], seed.wrapping_add(r as u64));
            let coords: Vec<Vec2> = sel.iter().map(|&i| prev[i]).collect();
            let pool_k = cfg.k_nn.min(prev.len());
            let pool = knn(prev, &coords, pool_k).concat();
            (coords, sel, pool, pool_k)
        };
        let lists = knn(&coords, &coords, cfg.k_nn);
        let nb = Neighborhood::from_lists(&lists);
        let rel_scale = mean_neighbor_distance(&coords, &nb);
        if r == 0 {
            acm = Some(if cfg.use_acm {
                Neighborhood::from_lists(&union_neighbors(&lists, conn))
            } else {
                nb.clone()
            });
        }
        levels.push(LevelGeometry {
            coords,
            parent_index,
            knn: nb,
            rel_scale,
            pool,
            pool_k,
            up: None,
        });
    }
    for r in 0..cfg.stages - 1 {
        let w = idw_weights(&levels[r + 1].coords, &levels[r].coords, 3);
        levels[r].up = Some(w);
    }
    Ok(PyramidGeometry {
        levels,
        acm: acm.expect("level 0 exists"),
    })
}

fn mask_tensor<T: Scalar>(nb: &Neighborhood, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(nb.valid.len() * dim);
    for &ok in &nb.valid {
        let v = if ok { T::zero() } else { T::c(MASKED_LOGIT) };
        data.extend(std::iter::repeat_n(v, dim));
    }
    Tensor::new(&[nb.valid.len(), dim], data).expect("mask shape")
}

/// Vector attention core: per point `i`,
/// `Σ_j softmax_j(ω(q_i - k_j + δ_ij)) ⊙ (v_j + δ_ij)` over the valid slots of `nb`,
/// where `δ` is the optional `[n·width, d]` position encoding.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    nb: &Neighborhood,
    pe: Option<Var>,
    omega: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let n = tape.value(q).rows();
    let d = tape.value(q).row_len();
    if nb.len() != n || nb.width == 0 {
        return Err(TensorError::Invalid {
            op: "vector_attention",
            detail: format!("neighborhood table covers {} of {n} points", nb.len()),
        });
    }
    let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, nb.width)).collect();
    let qi = tape.gather_rows(q, &rep)?;
    let kj = tape.gather_rows(k, &nb.index)?;
    let mut vj = tape.gather_rows(v, &nb.index)?;
    let mut rel = tape.sub(qi, kj)?;
    if let Some(pe) = pe {
        rel = tape.add(rel, pe)?;
        vj = tape.add(vj, pe)?;
    }
    let mut w = omega(tape, rel)?;
    if nb.has_padding() {
        let m = tape.constant(mask_tensor(nb, d));
        w = tape.add(w, m)?;
    }
    let w = tape.reshape(w, &[n, nb.width, d])?;
    let a = tape.softmax(w, 1)?;
    let vj = tape.reshape(vj, &[n, nb.width, d])?;
    let prod = tape.mul(a, vj)?;
    tape.sum_axis(prod, 1)
}

/// Hidden width of the position-encoding MLP.
pub const POS_HIDDEN: usize = 16;

/// Pre-normalized residual vector-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub dim: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    pos: Option<Mlp>,
    omega: Mlp,
    out: Linear,
}

impl AttentionBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, posenc: bool, rng: &mut impl Rng) -> Self {
        AttentionBlock {
            dim,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            pos: posenc.then(|| Mlp::new(store, &format!("{name}.pos"), 2, POS_HIDDEN, dim, rng)),
            omega: Mlp::new(store, &format!("{name}.omega"), dim, (dim / 4).max(8), dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
        }
    }

    /// `rel` holds the `[n·width, 2]` relative offsets matching `nb`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, nb: &Neighborhood, rel: &[f64]) -> Result<Var> {
        let h = s.tape.layer_norm(x)?;
        let q = self.q.forward(s, h)?;
        let k = self.k.forward(s, h)?;
        let v = self.v.forward(s, h)?;
        let pe = match &self.pos {
            Some(mlp) => {
                let r = s.constant(Tensor::from_f64(&[nb.index.len(), 2], rel)?);
                Some(mlp.forward(s, r)?)
            }
            None => None,
        };
        let omega = self.omega;
        let a = {
            // ω needs the session for its parameters, so bind them first
            let (w1, b1, w2, b2) = (
                s.p(omega.l1.weight),
                s.p(omega.l1.bias),
                s.p(omega.l2.weight),
                s.p(omega.l2.bias),
            );
            attend(&mut s.tape, q, k, v, nb, pe, |t, z| {
                let h = t.matmul(z, w1)?;
                let h = t.add_rows(h, b1)?;
                let h = t.relu(h)?;
                let h = t.matmul(h, w2)?;
                t.add_rows(h, b2)
            })?
        };
        let a = self.out.forward(s, a)?;
        s.tape.add(x, a)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderStage {
    down: Option<Linear>,
    block: AttentionBlock,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderStage {
    /// Coarsest level: input map; otherwise the projection of the coarser level.
    up: Linear,
    skip: Option<Linear>,
    block: AttentionBlock,
}

/// Decoder outputs per level, finest first, plus the first encoder stage's output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub first_stage: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    input: Linear,
    enc: Vec<EncoderStage>,
    dec: Vec<DecoderStage>,
}

pub const INPUT_DIM: usize = 8;

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let ch = &config.channels;
        let pe = config.use_posenc;
        let input = Linear::new(store, "backbone.input", INPUT_DIM, ch[0], rng);
        let enc = (0..config.stages)
            .map(|r| EncoderStage {
                down: (r > 0).then(|| Linear::new(store, &format!("backbone.enc{r}.down"), ch[r - 1] + 2, ch[r], rng)),
                block: AttentionBlock::new(store, &format!("backbone.enc{r}.block"), ch[r], pe, rng),
            })
            .collect();
        let last = config.stages - 1;
        let dec = (0..config.stages)
            .rev()
            .map(|r| {
                let (up, skip) = if r == last {
                    (Linear::new(store, &format!("backbone.dec{r}.in"), ch[r], ch[r], rng), None)
                } else {
                    (
                        Linear::new(store, &format!("backbone.dec{r}.up"), ch[r + 1], ch[r], rng),
                        Some(Linear::new(store, &format!("backbone.dec{r}.skip"), ch[r], ch[r], rng)),
                    )
                };
                DecoderStage {
                    up,
                    skip,
                    block: AttentionBlock::new(store, &format!("backbone.dec{r}.block"), ch[r], pe, rng),
                }
            })
            .collect();
        Backbone {
            config: config.clone(),
            input,
            enc,
            dec,
        }
    }

    /// `inputs` is the `[n, 8]` point matrix.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, inputs: Var, geo: &PyramidGeometry) -> Result<FeaturePyramid> {
        let stages = self.config.stages;
        if geo.levels.len() != stages {
            return Err(TensorError::Invalid {
                op: "backbone",
                detail: format!("geometry has {} levels, model {stages}", geo.levels.len()),
            });
        }
        let mut skips = Vec::with_capacity(stages);
        let mut x = self.input.forward(s, inputs)?;
        let mut first_stage = x;
        for (r, st) in self.enc.iter().enumerate() {
            let lv = &geo.levels[r];
            if let Some(down) = &st.down {
                x = transition_down(s, down, x, &geo.levels[r - 1], lv)?;
            }
            let nb = if r == 0 { &geo.acm } else { &lv.knn };
            x = st.block.forward(s, x, nb, &nb.relative(&lv.coords, lv.rel_scale))?;
            if r == 0 {
                first_stage = x;
            }
            skips.push(x);
        }
        let mut levels = vec![x; stages];
        let mut y = x;
        for (k, st) in self.dec.iter().enumerate() {
            let r = stages - 1 - k;
            let lv = &geo.levels[r];
            y = match &st.skip {
                None => st.up.forward(s, skips[r])?,
                Some(skip) => {
                    let u = st.up.forward(s, y)?;
                    let u = upsample_interpolate(&mut s.tape, u, lv.up.as_ref().expect("finer levels carry weights"))?;
                    let sk = skip.forward(s, skips[r])?;
                    s.tape.add(u, sk)?
                }
            };
            y = st.block.forward(s, y, &lv.knn, &lv.knn.relative(&lv.coords, lv.rel_scale))?;
            y = s.tape.layer_norm(y)?;
            levels[r] = y;
        }
        Ok(FeaturePyramid { levels, first_stage })
    }
}

/// Local MLP on `[x_j, (p_j - p_s)·scale]` over the pooling neighbors of each
/// selected point, max-pooled per point.
fn transition_down<T: Scalar>(
    s: &mut Session<T>,
    lin: &Linear,
    x: Var,
    prev: &LevelGeometry,
    lv: &LevelGeometry,
) -> Result<Var> {
    let m = lv.coords.len();
    let kp = lv.pool_k;
    let g = s.tape.gather_rows(x, &lv.pool)?;
    let mut rel = Vec::with_capacity(m * kp * 2);
    for (slot, &j) in lv.pool.iter().enumerate() {
        let d = (prev.coords[j] - lv.coords[slot / kp]) * prev.rel_scale;
        rel.push(d.x);
        rel.push(d.y);
    }
    let rel = s.constant(Tensor::from_f64(&[m * kp, 2], &rel)?);
    let h = s.tape.concat(&[g, rel], 1)?;
    let h = lin.forward(s, h)?;
    let h = s.tape.layer_norm(h)?;
    let h = s.tape.relu(h)?;
    let h = s.tape.reshape(h, &[m, kp, lin.dout])?;
    s.tape.max_axis(h, 1)
}

/// Inverse-distance interpolation of coarse rows onto the fine points of `w`.
pub fn upsample_interpolate<T: Scalar>(tape: &mut Tape<T>, coarse: Var, w: &IdwWeights) -> Result<Var> {
    let d = tape.value(coarse).row_len();
    let n = w.entries.len();
    let (idx, wt) = w.padded();
    let g = tape.gather_rows(coarse, &idx)?;
    let g = tape.scale_rows(g, wt.into_iter().map(T::c).collect())?;
    let g = tape.reshape(g, &[n, w.k, d])?;
    tape.sum_axis(g, 1)
}

/// The `[n, 8]` network input: position and length over the document diagonal,
/// angle over 2π, kind one-hot.
pub fn input_matrix<T: Scalar>(points: &crate::points::PointSet, diagonal: f64) -> Tensor<T> {
    let diag = if diagonal > 0.0 { diagonal } else { 1.0 };
    let mut data = Vec::with_capacity(points.len() * INPUT_DIM);
    for p in &points.points {
        let f = p.feature();
        data.push(T::c(p.position.x / diag));
        data.push(T::c(p.position.y / diag));
        data.push(T::c(f[0] / std::f64::consts::TAU));
        data.push(T::c(f[1] / diag));
        data.extend(f[2..].iter().map(|&v| T::c(v)));
    }
    Tensor::new(&[points.len(), INPUT_DIM], data).expect("input shape")
}
