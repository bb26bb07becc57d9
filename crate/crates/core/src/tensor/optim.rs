use super::{Result, Tensor, TensorError};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonFinitePolicy {
    Skip,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub non_finite: NonFinitePolicy,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            non_finite: NonFinitePolicy::Abort,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        AdamW {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TensorError::Invalid {
                op: "adamw_step",
                detail: format!(
                    "{} params, {} grads, {} state slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return match self.config.non_finite {
                NonFinitePolicy::Skip => Ok(StepOutcome::Skipped),
                NonFinitePolicy::Abort => Err(TensorError::Domain {
                    op: "adamw_step",
                    detail: "non-finite gradient".into(),
                }),
            };
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as f64;
        let bc1 = T::c(1.0 - c.beta1.powf(t));
        let bc2 = T::c(1.0 - c.beta2.powf(t));
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (lr, eps) = (T::c(c.lr), T::c(c.eps));
        let decay = T::one() - T::c(c.lr * c.weight_decay);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k];
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (e, x) in p.data_mut().iter_mut().enumerate() {
                *x *= decay;
                m[e] = b1 * m[e] + (T::one() - b1) * g[e];
                v[e] = b2 * v[e] + (T::one() - b2) * g[e] * g[e];
                let mh = m[e] / bc1;
                let vh = v[e] / bc2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_f64(&[1], &[v]).unwrap()]
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = one(1.5);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![0.0]]).unwrap();
        assert_eq!(p[0].item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        // f(x) = x has gradient 1 everywhere
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert!((p[0].item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_on_zero_gradient() {
        let mut p = one(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.001,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![0.0]]).unwrap();
        assert!((p[0].item() - 2.0 * (1.0 - 0.1 * 0.001)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_policies() {
        let mut p = one(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.step(&mut p, &[vec![f64::NAN]]).is_err());
        opt.config.non_finite = NonFinitePolicy::Skip;
        assert_eq!(opt.step(&mut p, &[vec![f64::INFINITY]]).unwrap(), StepOutcome::Skipped);
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(opt.step, 0);
    }
}
