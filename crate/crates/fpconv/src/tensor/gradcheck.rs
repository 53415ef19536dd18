//! Central finite-difference verification of analytic gradients.

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Step size for central differences; chosen for fp64 inputs.
pub const FD_STEP: f64 = 1e-5;

/// Absolute floor in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub n_elements: usize,
}

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences over every element of every input.
///
/// `f` must be a pure function of the input values (it is re-evaluated under
/// perturbation) and every input must require gradients.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    for t in inputs {
        t.zero_grad();
    }
    let out = f(inputs)?;
    if out.numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            "scalar output",
            format!("{:?}", out.shape()),
        ));
    }
    out.backward()?;

    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for g in analytic.iter().flatten() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                context: "analytic gradient".to_string(),
            });
        }
    }

    let mut max_rel = 0.0f64;
    let mut n_elements = 0usize;
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let orig = t.values()[e];
            t.values_mut()[e] = orig + FD_STEP;
            let plus = no_grad(|| f(inputs))?.item();
            t.values_mut()[e] = orig - FD_STEP;
            let minus = no_grad(|| f(inputs))?.item();
            t.values_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient {
                    context: format!("numeric gradient, input {ti} element {e}"),
                });
            }
            let a = analytic[ti][e];
            let diff = (a - numeric).abs();
            // differences at or below the absolute floor count as exact:
            // central differences carry ~|f|*eps/h of cancellation noise,
            // which would otherwise dominate elements whose true gradient
            // is zero
            let rel = if diff <= REL_FLOOR {
                0.0
            } else {
                diff / a.abs().max(numeric.abs()).max(REL_FLOOR)
            };
            if rel > max_rel {
                max_rel = rel;
            }
            n_elements += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        pass: max_rel < tolerance,
        n_elements,
    })
}
