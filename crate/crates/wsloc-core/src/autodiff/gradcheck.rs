//! Finite-difference gradient checker.
//!
//! Compares the analytic gradient of a scalar-valued graph against central
//! differences, coordinate by coordinate. The checker only drives the public
//! graph API, so it stays independent of the backward implementation it
//! verifies.

use crate::error::{Error, Result};

use super::backward::backward;
use super::tensor::Tensor;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub pass: bool,
}

/// Check d`f`/d`x` against central finite differences at every coordinate.
///
/// `f` must rebuild the graph from scratch on each call (define-by-run).
/// Relative error uses a unit floor in the denominator, so tiny gradients
/// are compared absolutely.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::leaf(x.to_vec(), shape)?;
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("f must be scalar-valued, got shape {:?}", out.shape()),
        ));
    }
    backward(&out)?;
    let analytic = leaf.grad();

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let eval = |v: f64| -> Result<f64> {
            let mut probe = x.to_vec();
            probe[i] = v;
            let t = Tensor::from_vec(probe, shape)?;
            let y = f(&t)?;
            let val = y.item();
            if !val.is_finite() {
                return Err(Error::invalid(
                    "grad_check",
                    format!("non-finite value while probing coordinate {i}"),
                ));
            }
            Ok(val)
        };
        let plus = eval(x[i] + FD_STEP)?;
        let minus = eval(x[i] - FD_STEP)?;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        pass: max_rel_err <= tol,
    })
}
