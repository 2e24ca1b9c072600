use super::Real;

/// Magnitude below which gradient entries are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference gradient estimate,
/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every coordinate.
///
/// A coordinate whose estimate comes out NaN (for example because the
/// objective signals a crossed ReLU kink by returning NaN) is reported as NaN
/// and skipped by [`max_relative_error`].
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + h;
            let plus = f(&probe);
            probe[i] = theta[i] - h;
            let minus = f(&probe);
            probe[i] = theta[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest [`relative_error`] over paired entries, ignoring NaN estimates.
pub fn max_relative_error<T: Real>(analytic: &[T], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .filter(|(_, n)| !n.is_nan())
        .map(|(a, &n)| relative_error(a.to_f64(), n))
        .fold(0.0, f64::max)
}
