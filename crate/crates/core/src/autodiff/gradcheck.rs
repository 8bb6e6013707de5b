//! Central finite differences for checking analytic gradients.
//!
//! Only forward evaluations are used here, so the estimate is independent of
//! the backward rules it is compared against.

/// Step used by the gradient checks throughout the crate.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` at `point`.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Largest elementwise relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
