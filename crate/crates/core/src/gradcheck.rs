//! Central finite-difference helpers used by the gradient-verification tests.

/// Central difference of `f` w.r.t. coordinate `i` of `x`, step `h`.
pub fn central_diff<F>(x: &[f64], i: usize, h: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Symmetric relative error with an absolute guard for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / scale
}

/// Checks every coordinate of an analytic gradient against central
/// differences; returns the worst relative error, panicking on the first
/// coordinate that exceeds `tol` (with a diagnostic naming the index).
pub fn assert_grad_matches<F>(label: &str, x: &[f64], analytic: &[f64], h: f64, tol: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        x.len(),
        analytic.len(),
        "{label}: gradient length {} does not match input length {}",
        analytic.len(),
        x.len()
    );
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let numeric = central_diff(x, i, h, &mut f);
        let err = rel_err(analytic[i], numeric);
        assert!(
            err <= tol,
            "{label}: grad[{i}] analytic {} vs numeric {numeric} (rel err {err:.3e} > {tol:.1e})",
            analytic[i]
        );
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_polynomial_derivative() {
        // f(x) = x0^2 + 3 x0 x1, df/dx0 = 2 x0 + 3 x1
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1];
        let x = [1.5, -0.7];
        let d = central_diff(&x, 0, 1e-4, f);
        assert!(rel_err(d, 2.0 * 1.5 + 3.0 * -0.7) < 1e-8);
    }

    #[test]
    fn assert_grad_matches_accepts_exact_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [0.3, -1.1, 2.0];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let worst = assert_grad_matches("quadratic", &x, &g, 1e-4, 1e-3, f);
        assert!(worst < 1e-6);
    }
}
