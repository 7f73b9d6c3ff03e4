//! Central finite-difference gradient verification.
//!
//! Runs in f64 only. The caller supplies a deterministic loss closure over a
//! flat parameter list plus the analytic gradients to verify; the checker
//! perturbs every element by ±ε and reports the worst relative error per
//! parameter tensor.

use crate::tensor::Matrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("forward pass is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),
    #[error("loss evaluation failed: {0}")]
    Eval(String),
    #[error("analytic gradient count {0} does not match parameter count {1}")]
    Mismatch(usize, usize),
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub eps: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn all_within(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// rel-err = |g_ad - g_fd| / max(floor, |g_ad| + |g_fd|)
///
/// The floor absorbs central-difference roundoff: a loss of magnitude L
/// evaluated at machine precision gives the difference quotient an absolute
/// noise of about eps_machine * L / eps, so gradients near zero would
/// otherwise report spurious relative errors.
pub fn relative_error(ad: f64, fd: f64, floor: f64) -> f64 {
    (ad - fd).abs() / f64::max(floor, ad.abs() + fd.abs())
}

/// Denominator floor used by [`check`]: gradients smaller than 1e-4 of the
/// loss scale are compared absolutely rather than relatively.
pub fn denominator_floor(base_loss: f64) -> f64 {
    f64::max(1e-8, 1e-4 * f64::max(1.0, base_loss.abs()))
}

/// Compare analytic gradients against central differences of `loss`.
///
/// `loss` is called with the full parameter list and must be a pure function
/// of it; determinism is verified by evaluating the base point twice.
pub fn check<E: std::fmt::Display>(
    names: &[String],
    params: &mut [Matrix<f64>],
    analytic: &[Matrix<f64>],
    mut loss: impl FnMut(&[Matrix<f64>]) -> Result<f64, E>,
    eps: f64,
) -> Result<GradCheckReport, GradCheckError> {
    if analytic.len() != params.len() {
        return Err(GradCheckError::Mismatch(analytic.len(), params.len()));
    }
    let eval = |p: &[Matrix<f64>], f: &mut dyn FnMut(&[Matrix<f64>]) -> Result<f64, E>| {
        f(p).map_err(|e| GradCheckError::Eval(e.to_string()))
    };
    let base0 = eval(params, &mut loss)?;
    let base1 = eval(params, &mut loss)?;
    if base0 != base1 {
        return Err(GradCheckError::NonDeterministic(base0, base1));
    }
    let floor = denominator_floor(base0);

    let mut entries = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut worst = 0.0f64;
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            params[pi].data_mut()[k] = orig + eps;
            let up = eval(params, &mut loss)?;
            params[pi].data_mut()[k] = orig - eps;
            let down = eval(params, &mut loss)?;
            params[pi].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = analytic[pi].data()[k];
            worst = worst.max(relative_error(ad, fd, floor));
        }
        entries.push(GradCheckEntry {
            name: names[pi].clone(),
            elements: params[pi].len(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { entries, eps })
}
