//! Central finite-difference gradient checking.
//!
//! This is the independent oracle for every analytic gradient in the
//! crate: it only ever calls the forward pass, never the tape backward.

/// Central finite-difference gradient of `f` at `x0` with step `h`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradients, with the
/// denominator floored at 1 so near-zero entries are compared absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = finite_difference_gradient(f, &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
