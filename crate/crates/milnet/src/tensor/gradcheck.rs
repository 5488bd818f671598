//! Central finite differences as an independent oracle for analytic
//! gradients.
//!
//! These helpers only ever evaluate the forward pass; they never look at the
//! tape's backward rules, so they can falsify them. Checks should run at
//! `f64`, where a step of `1e-5` leaves many digits of headroom.

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradient of `f` at `x` by central differences, one coordinate at a time.
pub fn finite_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe);
        probe[i] = orig - step;
        let lo = f(&probe);
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Worst relative error between analytic and numeric gradients, with the
/// usual `max(|a|, |n|, 1)` guard so near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Compare the analytic gradient of `f` (as produced elsewhere) with central
/// finite differences. Returns the worst relative error, or an error report
/// naming the offending coordinate.
pub fn check<F>(f: F, x: &[f64], analytic: &[f64], tol: f64) -> Result<f64, String>
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = finite_difference(f, x, FD_STEP);
    let mut worst = 0.0f64;
    let mut worst_idx = 0usize;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        if rel > worst {
            worst = rel;
            worst_idx = i;
        }
    }
    if worst < tol {
        Ok(worst)
    } else {
        Err(format!(
            "gradient check failed at index {worst_idx}: analytic {} vs numeric {} (rel err {worst:.3e}, tol {tol:.1e})",
            analytic[worst_idx], numeric[worst_idx]
        ))
    }
}
