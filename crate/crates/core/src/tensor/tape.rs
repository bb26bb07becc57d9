use super::{split_axis, Result, Tensor, TensorError};
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    BroadcastRows(Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Sqrt(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm(Var, Vec<T>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Sum(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

const LN_EPS: f64 = 1e-5;

/// Dynamic computation record. Nodes are appended in evaluation order, so the
/// node order is a topological order of the graph.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], |g| g.to_vec())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing is tracked for backward.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let tracked = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Copies the value of `v` into a new untracked node.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let tracked = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op, axis, rank });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                detail: format!("expected rank 2, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == T::zero() {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("transpose", a)?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), &[a]))
    }

    // ---- elementwise binary ----

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, data)?, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == T::zero()) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "zero divisor".into(),
            });
        }
        self.zip("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Repeats a `[d..]` or `[1, d..]` tensor `n` times along a new leading axis.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let tail: Vec<usize> = if s.first() == Some(&1) && s.len() > 1 {
            s[1..].to_vec()
        } else {
            s.clone()
        };
        let w: usize = tail.iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * w);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend(tail);
        Ok(self.push(Tensor::new(&shape, data)?, Op::BroadcastRows(x), &[x]))
    }

    /// `a + b` with `b` broadcast over the rows of `a`.
    pub fn add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).rows();
        let bb = self.broadcast_rows(b, n)?;
        self.add(a, bb)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        Ok(self.push(t, Op::Scale(x, c), &[x]))
    }

    /// Multiplies row `i` of `x` by the constant `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if w.len() != t.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![w.len()],
            });
        }
        let rl = t.row_len();
        let mut out = t.clone();
        for (i, chunk) in out.data_mut().chunks_mut(rl.max(1)).enumerate() {
            for v in chunk {
                *v *= w[i];
            }
        }
        Ok(self.push(out, Op::ScaleRows(x, w), &[x]))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        Ok(self.push(t, Op::AddConst(x), &[x]))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, Op::Exp(x), |v| v.exp()))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| !(**v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), |v| v.ln()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, Op::Sigmoid(x), sigmoid))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, Op::Relu(x), |v| v.max(T::zero())))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, Op::Softplus(x), softplus))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| !(**v >= T::zero())) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        Ok(self.unary(x, Op::Sqrt(x), |v| v.sqrt()))
    }

    // ---- normalizations ----

    fn check_softmax_input(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).data().iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(TensorError::Domain {
                op,
                detail: "NaN or +inf input".into(),
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        self.check_softmax_input("softmax", x)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = t.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut m = T::neg_infinity();
                for a in 0..len {
                    m = m.max(d[idx(a)]);
                }
                let mut s = T::zero();
                for a in 0..len {
                    let e = (d[idx(a)] - m).exp();
                    d[idx(a)] = e;
                    s += e;
                }
                for a in 0..len {
                    d[idx(a)] /= s;
                }
            }
        }
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        self.check_softmax_input("log_softmax", x)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = t.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut m = T::neg_infinity();
                for a in 0..len {
                    m = m.max(d[idx(a)]);
                }
                let mut s = T::zero();
                for a in 0..len {
                    s += (d[idx(a)] - m).exp();
                }
                let lse = m + s.ln();
                for a in 0..len {
                    d[idx(a)] -= lse;
                }
            }
        }
        Ok(self.push(out, Op::LogSoftmax(x, axis), &[x]))
    }

    /// Normalizes over the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = *t.shape().last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(t.len() / w.max(1));
        let wf = T::c(w as f64);
        for row in out.data_mut().chunks_mut(w.max(1)) {
            let mean = row.iter().copied().sum::<T>() / wf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wf;
            let is = T::one() / (var + T::c(LN_EPS)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(self.push(out, Op::LayerNorm(x, inv_std), &[x]))
    }

    // ---- indexing ----

    /// Rows of `x` (viewed as `[rows, rest]`) selected by `idx`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.rows();
        let w = t.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Ok(self.push(Tensor::new(&shape, data)?, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Sums row `r` of `x` into output row `idx[r]` of an `n_out`-row result.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let t = self.value(x);
        if idx.len() != t.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let w = t.row_len();
        let mut data = vec![T::zero(); n_out * w];
        for (r, &o) in idx.iter().enumerate() {
            if o >= n_out {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: o,
                    len: n_out,
                });
            }
            for (d, &s) in data[o * w..(o + 1) * w].iter_mut().zip(t.row(r)) {
                *d += s;
            }
        }
        let mut shape = t.shape().to_vec();
        if shape.is_empty() {
            shape.push(n_out);
        } else {
            shape[0] = n_out;
        }
        Ok(self.push(Tensor::new(&shape, data)?, Op::ScatterAddRows(x, idx.to_vec()), &[x]))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                detail: "empty input".into(),
            });
        }
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sums out `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let len = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        self.scale(s, T::one() / T::c(len.max(1) as f64))
    }

    /// Maximum over `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if len == 0 {
            return Err(TensorError::Invalid {
                op: "max_axis",
                detail: "empty axis".into(),
            });
        }
        let d = t.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for a in 1..len {
                    let j = (o * len + a) * inner + i;
                    if d[j] > d[best] {
                        best = j;
                    }
                }
                out[o * inner + i] = d[best];
                arg[o * inner + i] = best;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxAxis(x, arg), &[x]))
    }

    // ---- structure ----

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::Invalid {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if self.value(out).len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                detail: format!("output must be scalar, got shape {:?}", self.shape(out)),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[out.0].tracked {
            return Ok(Grads { grads });
        }
        grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            for (d, &s) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * s;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * y[k] / bv[k];
                    }
                });
            }
            Op::BroadcastRows(x) => {
                let w = self.nodes[x.0].value.len();
                acc(*x, &mut |gx| {
                    for chunk in g.chunks(w.max(1)) {
                        add_into(gx, chunk);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d += s * *c;
                }
            }),
            Op::ScaleRows(x, w) => {
                let rl = self.nodes[x.0].value.row_len().max(1);
                acc(*x, &mut |gx| {
                    for (r, (d, s)) in gx.chunks_mut(rl).zip(g.chunks(rl)).enumerate() {
                        for (dd, &ss) in d.iter_mut().zip(s) {
                            *dd += ss * w[r];
                        }
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k];
                }
            }),
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] / xv[k];
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k] * (T::one() - y[k]);
                }
            }),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        if xv[k] > T::zero() {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * sigmoid(xv[k]);
                    }
                });
            }
            Op::Sqrt(x) => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * T::c(0.5) / y[k];
                }
            }),
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + i;
                            let mut dot = T::zero();
                            for a in 0..len {
                                dot += g[idx(a)] * y[idx(a)];
                            }
                            for a in 0..len {
                                gx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + i;
                            let mut gs = T::zero();
                            for a in 0..len {
                                gs += g[idx(a)];
                            }
                            for a in 0..len {
                                gx[idx(a)] += g[idx(a)] - y[idx(a)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm(x, inv_std) => {
                let w = *node.value.shape().last().unwrap_or(&1);
                let wf = T::c(w as f64);
                acc(*x, &mut |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let yr = &y[r * w..(r + 1) * w];
                        let mg = gr.iter().copied().sum::<T>() / wf;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / wf;
                        for k in 0..w {
                            gx[r * w + k] += *is * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let w = self.nodes[x.0].value.row_len();
                acc(*x, &mut |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ScatterAddRows(x, idx) => {
                let w = self.nodes[x.0].value.row_len();
                acc(*x, &mut |gx| {
                    for (r, &dst) in idx.iter().enumerate() {
                        add_into(&mut gx[r * w..(r + 1) * w], &g[dst * w..(dst + 1) * w]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                            add_into(dst, &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::MaxAxis(x, arg) => acc(*x, &mut |gx| {
                for (k, &j) in arg.iter().enumerate() {
                    gx[j] += g[k];
                }
            }),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    acc(x, &mut |gx| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gx[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
