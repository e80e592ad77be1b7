//! Finite-difference gradient checking. Test-oriented: the numerical
//! derivative is the oracle that every analytic gradient in this crate is
//! judged against, so it deliberately knows nothing about tensors or tapes —
//! it only re-evaluates a closure.

/// Central-difference derivative of `f` w.r.t. coordinate `idx` of `at`.
pub fn numerical_grad<F>(f: &F, at: &[f64], idx: usize, h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut plus = at.to_vec();
    plus[idx] += h;
    let mut minus = at.to_vec();
    minus[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with an absolute floor, symmetric in its arguments.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Checks analytic gradients against central differences at the given
/// coordinates. Returns the first failure as a human-readable message.
pub fn check_grad<F>(
    f: &F,
    at: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    tol: f64,
) -> Result<(), String>
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(at.len(), analytic.len(), "gradient length mismatch");
    for &idx in indices {
        let num = numerical_grad(f, at, idx, h);
        let err = rel_err(analytic[idx], num, 1e-4);
        if !err.is_finite() || err > tol {
            return Err(format!(
                "gradient check failed at index {idx}: analytic {}, numerical {num}, rel err {err:.3e} > {tol:.1e}",
                analytic[idx]
            ));
        }
    }
    Ok(())
}

/// Evenly spread sample of `count` coordinate indices in `0..len`, always
/// including both ends. Checking every coordinate of a conv layer is
/// needlessly slow; a spread sample catches layout bugs just as well.
pub fn sample_indices(len: usize, count: usize) -> Vec<usize> {
    assert!(len > 0);
    if count == 0 || len <= count {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..count)
        .map(|i| i * (len - 1) / (count - 1).max(1))
        .collect();
    out.dedup();
    out
}
