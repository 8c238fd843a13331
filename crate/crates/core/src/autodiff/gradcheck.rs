//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used to form the numeric estimate, so the
//! check is independent of every backward rule it exercises.

use crate::error::Result;

use super::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar produced by `build` with central
/// differences (step `eps`) for every input whose `requires_grad` is set.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).sum())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let zeros = vec![0.0; input.numel()];
        let analytic = tape.grad(vars[k]).unwrap_or(&zeros).to_vec();
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[k].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = orig - eps;
            let dn = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - dn) / (2.0 * eps);
            let a = analytic[j];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric, 1e-6));
            report.checked += 1;
        }
    }
    Ok(report)
}
