//! Central finite differences for gradient verification.
//!
//! This is the independent oracle that every analytic gradient in the crate
//! is checked against. It only ever calls the function being differentiated;
//! it never touches the reverse-mode machinery.

/// Gradient of a scalar function by central differences with step `h`.
pub fn central_diff_grad<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let f_plus = f(&probe);
        probe[i] = point[i] - h;
        let f_minus = f(&probe);
        probe[i] = point[i];
        grads.push((f_plus - f_minus) / (2.0 * h));
    }
    grads
}

/// Like [`central_diff_grad`] but only for the coordinates in `indices`;
/// returns one derivative per requested index. Keeps checks on large
/// parameter vectors affordable.
pub fn central_diff_grad_at<F>(f: F, point: &[f64], indices: &[usize], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(indices.len());
    let mut probe = point.to_vec();
    for &i in indices {
        probe[i] = point[i] + h;
        let f_plus = f(&probe);
        probe[i] = point[i] - h;
        let f_minus = f(&probe);
        probe[i] = point[i];
        grads.push((f_plus - f_minus) / (2.0 * h));
    }
    grads
}

/// Maximum relative error between two gradient vectors. The denominator is
/// floored at 1e-6 so that near-zero components are compared absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
