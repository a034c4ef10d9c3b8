//! Central finite-difference checks for reverse-mode gradients.

use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Worst-case agreement between analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter, entry)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

/// Gradients below this magnitude are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic[i]` with central differences of `f` around `params`
/// using absolute step `step`.
pub fn check_gradients<T: Scalar>(
    f: impl Fn(&[Matrix<T>]) -> T,
    params: &[Matrix<T>],
    analytic: &[Matrix<T>],
    step: f64,
) -> GradCheckReport {
    check_gradients_masked(f, params, analytic, step, |_, _| true)
}

/// As [`check_gradients`], skipping entries for which `include` is false.
pub fn check_gradients_masked<T: Scalar>(
    f: impl Fn(&[Matrix<T>]) -> T,
    params: &[Matrix<T>],
    analytic: &[Matrix<T>],
    step: f64,
    include: impl Fn(usize, usize) -> bool,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut work: Vec<Matrix<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let h = T::lit(step);
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            if !include(p, e) {
                continue;
            }
            let orig = params[p].as_slice()[e];
            work[p].as_mut_slice()[e] = orig + h;
            let up = f(&work).to_f64_lossy();
            work[p].as_mut_slice()[e] = orig - h;
            let down = f(&work).to_f64_lossy();
            work[p].as_mut_slice()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[p].as_slice()[e].to_f64_lossy();
            let rel = relative_error(a, numeric);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((p, e));
            }
        }
    }
    report
}
