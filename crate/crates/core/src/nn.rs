//! Parameter storage and the small layer vocabulary shared by the backbone and
//! head. Layers only hold [`ParamId`]s; a [`Session`] binds the stored tensors
//! onto a fresh tape for one forward pass.

use rand::Rng;

use crate::tensor::{Grads, Result, Tape, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(t);
        ParamId(self.values.len() - 1)
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> ParamId {
        let (fi, fo) = match shape {
            [a, b] => (*a, *b),
            [a] => (*a, *a),
            _ => (shape.iter().product(), 1),
        };
        let bound = (6.0 / (fi + fo).max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(rng.gen_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.names.iter().cloned().zip(self.values.iter()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// One forward pass: a tape plus the parameter leaves bound onto it.
pub struct Session<T> {
    pub tape: Tape<T>,
    params: Vec<Var>,
}

impl<T: Scalar> Session<T> {
    /// `train = false` records values only.
    pub fn new(store: &ParamStore<T>, train: bool) -> Self {
        let mut tape = if train { Tape::new() } else { Tape::no_grad() };
        let params = store.values.iter().map(|t| tape.param(t.clone())).collect();
        Session { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Per-parameter gradients in store order.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<Vec<T>> {
        self.params
            .iter()
            .map(|&v| grads.get_or_zeros(v, self.tape.value(v).len()))
            .collect()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), &[din, dout], rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Linear { weight, bias, din, dout }
    }

    /// `x · W + b` for `x` of shape `[n, din]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        let y = s.tape.matmul(x, w)?;
        s.tape.add_rows(y, b)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.0"), din, hidden, rng),
            l2: Linear::new(store, &format!("{name}.1"), hidden, dout, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = s.tape.relu(h)?;
        self.l2.forward(s, h)
    }
}
