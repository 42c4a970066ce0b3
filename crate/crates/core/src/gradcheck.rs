//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the tape's backward pass: it re-evaluates
//! the forward function at perturbed inputs, so it is an independent oracle
//! for every analytic gradient in the crate.

/// Central finite differences of a scalar function at `x` with step `h`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        buf[i] = x[i] + h;
        let fp = f(&buf);
        buf[i] = x[i] - h;
        let fm = f(&buf);
        buf[i] = x[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Compare analytic and numeric gradients: `|a − n| ≤ tol·(1 + max(|a|,|n|))`
/// elementwise. Returns the worst offending index on failure.
pub fn compare(analytic: &[f64], numeric: &[f64], tol: f64) -> Result<(), String> {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst: Option<(usize, f64)> = None;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / (1.0 + a.abs().max(n.abs()));
        if err > tol && worst.is_none_or(|(_, w)| err > w) {
            worst = Some((i, err));
        }
    }
    match worst {
        None => Ok(()),
        Some((i, err)) => Err(format!(
            "gradient mismatch at index {i}: analytic {} vs numeric {} (rel err {err:.3e}, tol {tol:.1e})",
            analytic[i], numeric[i]
        )),
    }
}

/// Default step and tolerance used throughout the test suites.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
