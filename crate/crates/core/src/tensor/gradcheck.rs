//! Central finite-difference checking of tape gradients.
//!
//! The numerical side only evaluates the forward function; it never looks at
//! recorded backward rules.

use super::{Result, Tape, Tensor, Var};

/// Per-input comparison of analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with a floor on the denominator so exact zeros compare sanely.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the gradient of the scalar produced by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vs: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let o = f(&mut tape, &vs)?;
        Ok(tape.value(o).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].len());
        for e in 0..inputs[k].len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[e] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = rel_error(analytic[e], numeric, 1e-3);
            let abs = (analytic[e] - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((k, e, analytic[e], numeric));
            }
        }
    }
    Ok(report)
}
