//! Central-difference gradient checking.

use thiserror::Error;

/// Step used for every finite-difference check in this crate.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("function value is not finite when perturbing coordinate {0}")]
    NonFinite(usize),
    #[error("analytic gradient has {analytic} entries but the point has {point}")]
    LengthMismatch { analytic: usize, point: usize },
}

/// `|a - b| / (|a| + |b| + 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Per-coordinate central differences `(f(p + εeᵢ) - f(p - εeᵢ)) / 2ε`.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>, GradCheckError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(GradCheckError::BadStep(step));
    }
    let mut p = point.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let fp = f(&p);
        p[i] = orig - step;
        let fm = f(&p);
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GradCheckError::NonFinite(i));
        }
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

/// Maximum relative error between `analytic` and a central-difference
/// estimate of the gradient of `f` at `point`.
pub fn finite_diff_check<F>(
    f: F,
    analytic: &[f64],
    point: &[f64],
    step: f64,
) -> Result<f64, GradCheckError>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(GradCheckError::LengthMismatch {
            analytic: analytic.len(),
            point: point.len(),
        });
    }
    let numeric = central_difference(f, point, step)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
