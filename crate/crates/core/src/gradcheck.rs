//! Central finite-difference gradient checking.
//!
//! The numerical gradient only evaluates the forward pass, so it is an
//! independent oracle for the tape's backward rules.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-wise relative error of the whole gradient (all inputs
    /// concatenated): `max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)`.
    pub max_rel_err: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Step used for entry `x`: `rel_step * max(1, |x|)`.
pub fn step_for(x: f64, rel_step: f64) -> f64 {
    rel_step * x.abs().max(1.0)
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences.
///
/// `f` must be deterministic given its inputs (freeze any sampling noise).
pub fn check<F>(inputs: &[Tensor], rel_step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = out.backward()?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for which in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[which].shape());
        for j in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[j];
            let h = step_for(x0, rel_step);
            probe[which].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[j] = x0;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }

    let diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| a.max_abs_diff(n))
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(&numeric)
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let max_rel_err = diff / scale;
    Ok(GradCheckReport {
        max_rel_err,
        analytic,
        numeric,
    })
}

/// Norm-wise relative error of one tensor with a `1e-12` floor on the scale.
pub fn rel_err(a: &Tensor, n: &Tensor) -> f64 {
    let diff = a.max_abs_diff(n);
    let scale = a
        .data()
        .iter()
        .chain(n.data())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    diff / scale
}
