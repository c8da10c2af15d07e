//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep over a parameter set.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central differences of `f` over every
/// coordinate of `params`.
///
/// Relative error per coordinate is |g - g_fd| / max(|g|, |g_fd|, 1e-8).
/// `f` must be deterministic; non-finite values abort the sweep.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Vec<f64>>,
    eps: f64,
) -> Result<FdReport>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work = params.clone();
    for (name, tensor) in params {
        let grad = analytic.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("no analytic gradient for parameter {name}"))
        })?;
        if grad.len() != tensor.len() {
            return Err(Error::DataLength {
                shape: tensor.shape().to_vec(),
                len: grad.len(),
            });
        }
        for i in 0..tensor.len() {
            let base = tensor.data()[i];

            let mut plus = tensor.to_vec();
            plus[i] = base + eps;
            work.insert(
                name.clone(),
                Tensor::new(tensor.shape().to_vec(), plus)?,
            );
            let f_plus = f(&work)?;

            let mut minus = tensor.to_vec();
            minus[i] = base - eps;
            work.insert(
                name.clone(),
                Tensor::new(tensor.shape().to_vec(), minus)?,
            );
            let f_minus = f(&work)?;

            work.insert(name.clone(), tensor.clone());

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("finite differences of {name}[{i}]"),
                });
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let g = grad[i];
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = g;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
