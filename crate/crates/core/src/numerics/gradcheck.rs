//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass on constant
//! leaves, so it is independent of every backward rule it checks.

use alloc::string::String;
use alloc::vec::Vec;

use super::{Tensor, Var};
use crate::error::Result;

/// Finite-difference step used by every suite.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const ERROR_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Outcome of checking one named function.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Largest elementwise relative error over all inputs.
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of scalar inputs compared.
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check<F>(name: impl Into<String>, inputs: &[Tensor], tolerance: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let params: Vec<Var> = inputs.iter().cloned().map(Var::param).collect();
    f(&params)?.backward()?;
    let analytic: Vec<Tensor> =
        params.iter().zip(inputs).map(|(p, t)| p.grad().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let consts: Vec<Var> = probe.iter().cloned().map(Var::constant).collect();
        Ok(f(&consts)?.value().item())
    };

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].numel() {
            let original = inputs[which].data()[i];
            probe[which].data_mut()[i] = original + STEP;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = original - STEP;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * STEP);
            max_rel_err = max_rel_err.max(relative_error(grad.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck { name: name.into(), max_rel_err, tolerance, checked })
}
