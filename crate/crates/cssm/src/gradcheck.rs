//! Central finite-difference oracle for gradient verification.
//!
//! Only ever calls the forward path of whatever closure it is handed, so it
//! stays independent of the backward rules it is used to check.

/// Numerical gradient of `f` at `x` via central differences with step `h`.
pub fn numeric_grad<Fwd>(f: Fwd, x: &[f64], h: f64) -> Vec<f64>
where
    Fwd: Fn(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max relative error between analytic and numeric gradients, using
/// `|a - n| / max(1, |n|)` per element.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Check a scalar-valued function's analytic gradient against central
/// differences. Panics with a diagnostic if the relative error exceeds `tol`.
pub fn assert_grad<Fwd>(f: Fwd, x: &[f64], analytic: &[f64], h: f64, tol: f64, what: &str)
where
    Fwd: Fn(&[f64]) -> f64,
{
    let numeric = numeric_grad(&f, x, h);
    let err = max_rel_err(analytic, &numeric);
    assert!(
        err < tol,
        "{what}: gradient mismatch, max rel err {err:.3e} (tol {tol:.1e})\n analytic: {:?}\n numeric: {:?}",
        &analytic[..analytic.len().min(8)],
        &numeric[..numeric.len().min(8)]
    );
}
