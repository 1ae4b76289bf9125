//! Closed-form solution of the reduced column problem.
//!
//! Stationarity of `xᵀQx + cᵀx` gives `Qx = -c/2`; because `Q = H_II` of a
//! damped Hessian is positive definite, that system is solved by a Cholesky
//! factorization. The result is both a standalone direct solver for small
//! columns and the independent reference the iterative solver is tested
//! against.

use crate::error::{Error, Result};
use crate::hessian::DEFAULT_DAMPING;
use crate::qp::ReducedQp;

/// In-place lower Cholesky factorization `a = L Lᵀ`. Fails on a
/// non-positive pivot.
fn cholesky(a: &mut [f64], n: usize) -> std::result::Result<(), usize> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(i);
                }
                a[i * n + j] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    Ok(())
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky`].
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    // forward: L y = b
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    // backward: Lᵀ x = y
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Returns the unique minimizer `Δw_I = -Q⁻¹ c / 2` of the reduced problem.
///
/// If the factorization fails despite damping, the diagonal is jittered
/// once by ten times the default damping fraction of its mean; a second
/// failure is reported as a singular-system error, and the caller falls
/// back to the zeroing point.
pub fn solve_direct(reduced: &ReducedQp) -> Result<Vec<f64>> {
    let n = reduced.dim;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rhs: Vec<f64> = reduced.c.iter().map(|v| -v / 2.0).collect();

    let mut factor = reduced.q.clone();
    if cholesky(&mut factor, n).is_err() {
        let mean_diag = (0..n).map(|i| reduced.q[i * n + i]).sum::<f64>() / n as f64;
        let jitter = 10.0 * DEFAULT_DAMPING * mean_diag;
        factor.copy_from_slice(&reduced.q);
        for i in 0..n {
            factor[i * n + i] += jitter;
        }
        if let Err(row) = cholesky(&mut factor, n) {
            return Err(Error::Singular(format!(
                "reduced system not positive definite at pivot {} even after re-damping",
                row
            )));
        }
    }
    cholesky_solve(&factor, n, &mut rhs);
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(
            "non-finite solution from triangular solve".to_string(),
        ));
    }
    Ok(rhs)
}

/// Scatters a reduced solution back to full length: kept entries in their
/// original positions, pruned entries at `-w`.
pub fn expand(delta_free: &[f64], w_col: &[f32], pruned_idx: &[usize]) -> Vec<f64> {
    let d = w_col.len();
    let mut is_pruned = vec![false; d];
    for &i in pruned_idx {
        is_pruned[i] = true;
    }
    let mut out = vec![0.0f64; d];
    let mut next_free = 0;
    for (i, out_i) in out.iter_mut().enumerate() {
        if is_pruned[i] {
            *out_i = -(w_col[i] as f64);
        } else {
            *out_i = delta_free[next_free];
            next_free += 1;
        }
    }
    debug_assert_eq!(next_free, delta_free.len());
    out
}
