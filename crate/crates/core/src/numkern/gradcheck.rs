use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `f` returns the scalar value and the analytic gradient of each parameter.
/// Relative error per entry is `|a - n| / max(1, |a| + |n|)`.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Domain(format!("finite-difference step {eps} outside [1e-7, 1e-4]")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("objective at the base point".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim(
            "grad_check",
            format!("{} gradients for {} parameters", analytic.len(), params.len()),
        ));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::dim(
                "grad_check",
                format!("gradient {pi} shape {:?} vs {:?}", grad.shape(), params[pi].shape()),
            ));
        }
        for ei in 0..params[pi].len() {
            let base = params[pi].data()[ei];
            work[pi].data_mut()[ei] = base + eps;
            let (plus, _) = f(&work)?;
            work[pi].data_mut()[ei] = base - eps;
            let (minus, _) = f(&work)?;
            work[pi].data_mut()[ei] = base;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective perturbing parameter {pi}[{ei}]")));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ei];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
