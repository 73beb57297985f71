//! Central finite-difference gradient checks.

use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            abs_tol: 1e-6,
            rel_tol: 1e-4,
        }
    }
}

/// One entry that failed both tolerances.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub slot: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// An entry passes when `|a - n| <= abs_tol` or `|a - n| <= rel_tol * max(|a|, |n|)`.
pub fn check_gradients<F>(f: F, params: &[Tensor], analytic: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut report = GradCheckReport::default();
    for slot in 0..params.len() {
        for index in 0..params[slot].len() {
            let x0 = params[slot].data()[index];
            work[slot].data_mut()[index] = x0 + cfg.step;
            let up = f(&work)?;
            work[slot].data_mut()[index] = x0 - cfg.step;
            let down = f(&work)?;
            work[slot].data_mut()[index] = x0;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[slot].data()[index];
            let err = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(err);
            if err > cfg.abs_tol && err > cfg.rel_tol * a.abs().max(numeric.abs()) {
                report.mismatches.push(GradMismatch {
                    slot,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
