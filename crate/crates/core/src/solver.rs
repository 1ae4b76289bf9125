//! Iterative solution of batched box-constrained column QPs.
//!
//! With every equality constraint encoded as a tight bound, the primal-dual
//! scheme this solver descends from degenerates to restarted accelerated
//! projected gradient: the projection is a clamp, and each iteration costs
//! two matrix-vector products with the shared Hessian. Solves warm-start at
//! the zeroing point (prune without updating), track the best iterate seen,
//! and therefore never return anything worse than that start.
//!
//! Convergence is declared on an estimated solution error: the projected
//! gradient's infinity norm divided by twice a (conservative) smallest
//! eigenvalue estimate of the Hessian. The product `abs_tol * rel_tol`
//! bounds that estimate relative to `1 + ‖Δw‖∞`, so the default 0.01/0.01
//! pair targets a 1e-4 relative solution error. Both eigenvalue estimates
//! come from power iterations on the shared Hessian, computed once per
//! batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::qp::{ColumnProblem, ColumnQpBatch, ReducedQp};
use crate::tensor::DenseMatrix;

/// Safety factor applied to the Lipschitz estimate when forming the step
/// size, and to the power-iteration shift.
pub const LIPSCHITZ_SAFETY: f64 = 1.05;

/// Hard cap on iterations per momentum cycle under adaptive restarts.
const ADAPTIVE_CYCLE_CAP: usize = 1000;

/// Learning-rate grid for the baseline momentum optimizer.
pub const BASELINE_LR_GRID: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

/// Heavy-ball momentum coefficient for the baseline optimizer.
pub const BASELINE_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestartPolicy {
    /// Restart momentum whenever the objective increases, with a hard cap
    /// of 1000 iterations per cycle.
    Adaptive,
    /// Restart every `k` iterations.
    Fixed(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iters: usize,
    pub restart: RestartPolicy,
    pub power_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rel_tol: 0.01,
            abs_tol: 0.01,
            max_iters: 100_000,
            restart: RestartPolicy::Adaptive,
            power_iters: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveStatus {
    Converged,
    MaxIters,
    Degenerate,
}

/// Per-column solution plus convergence diagnostics.
#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Column index within the weight matrix.
    pub col: usize,
    /// Full-length update; fixed entries are bit-equal to `-w`.
    pub delta: Vec<f64>,
    pub iterations: usize,
    /// Infinity norm of the projected gradient at `delta`.
    pub kkt_residual: f64,
    pub status: SolveStatus,
}

#[inline]
fn matvec(h: &[f64], d: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..d {
        let row = &h[i * d..(i + 1) * d];
        let mut s = 0.0f64;
        for (hij, xj) in row.iter().zip(x.iter()) {
            s += hij * xj;
        }
        out[i] = s;
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rayleigh-quotient power iteration for the largest eigenvalue of the
/// operator `v -> shift*v - H v` (or plain `H v` when `shift` is zero).
fn power_largest(h: &[f64], d: usize, shift: f64, iters: usize) -> f64 {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * ((i % 7) as f64)).collect();
    let n = norm2(&v);
    for x in v.iter_mut() {
        *x /= n;
    }
    let mut hv = vec![0.0f64; d];
    let apply = |v: &[f64], out: &mut [f64]| {
        matvec(h, d, v, out);
        if shift != 0.0 {
            for (o, vi) in out.iter_mut().zip(v.iter()) {
                *o = shift * vi - *o;
            }
        }
    };
    for _ in 0..iters {
        apply(&v, &mut hv);
        let n = norm2(&hv);
        if n < 1e-300 {
            return 0.0;
        }
        for (vi, hvi) in v.iter_mut().zip(hv.iter()) {
            *vi = hvi / n;
        }
    }
    apply(&v, &mut hv);
    v.iter().zip(hv.iter()).map(|(a, b)| a * b).sum()
}

/// Power-iteration estimate of `λ_max(2H)`, the gradient Lipschitz constant
/// of `Δwᵀ H Δw`. Returns a tiny positive floor for the zero matrix.
pub fn estimate_lipschitz(h: &DenseMatrix, iters: usize) -> f64 {
    assert_eq!(h.rows(), h.cols(), "hessian must be square");
    let hf = h.to_f64();
    let lam_max = power_largest(&hf, h.rows(), 0.0, iters);
    (2.0 * lam_max).max(1e-12)
}

/// Per-batch scalars shared by every column solve.
#[derive(Debug, Clone, Copy)]
struct BatchScales {
    step: f64,
    /// `2 * (halved smallest-eigenvalue estimate)`; converts a projected
    /// gradient norm into a conservative solution-error estimate.
    err_denom: f64,
}

fn batch_scales(hf: &[f64], d: usize, cfg: &SolverConfig) -> BatchScales {
    let lam_max = power_largest(hf, d, 0.0, cfg.power_iters).max(0.0);
    let l_hat = (2.0 * lam_max).max(1e-12);
    let step = 1.0 / (LIPSCHITZ_SAFETY * l_hat);
    let shift = LIPSCHITZ_SAFETY * lam_max;
    let lam_min = if lam_max > 0.0 {
        (shift - power_largest(hf, d, shift, cfg.power_iters)).max(0.0)
    } else {
        0.0
    };
    BatchScales {
        step,
        err_denom: lam_min, // 2 * (0.5 * lam_min)
    }
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Infinity norm of the projected gradient `x - P(x - g)` with `g = 2 h x`.
fn projected_gradient_norm(x: &[f64], hx: &[f64], p: &ColumnProblem) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let g = 2.0 * hx[i];
        let stepped = (x[i] - g).max(p.lower[i]).min(p.upper[i]);
        worst = worst.max((x[i] - stepped).abs());
    }
    worst
}

fn solve_column(
    hf: &[f64],
    d: usize,
    p: &ColumnProblem,
    scales: BatchScales,
    cfg: &SolverConfig,
    mut restart_trace: Option<&mut Vec<f64>>,
) -> SolveResult {
    debug_assert_eq!(p.dim(), d);
    let tol_err = cfg.abs_tol * cfg.rel_tol;
    let threshold = |x_scale: f64| scales.err_denom * tol_err * (1.0 + x_scale);

    let mut x = p.zeroing_point();
    let mut hx = vec![0.0f64; d];
    matvec(hf, d, &x, &mut hx);
    let obj0: f64 = x.iter().zip(hx.iter()).map(|(a, b)| a * b).sum();
    let res0 = projected_gradient_norm(&x, &hx, p);

    let mut best_x = x.clone();
    let mut best_obj = obj0;

    if res0 <= threshold(max_abs(&x)) {
        return SolveResult {
            col: p.col,
            delta: x,
            iterations: 0,
            kkt_residual: res0,
            status: SolveStatus::Converged,
        };
    }

    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut obj_prev = obj0;
    let mut cycle = 0usize;
    let mut x_next = vec![0.0f64; d];
    let mut status = SolveStatus::MaxIters;
    let mut iterations = cfg.max_iters;
    let mut converged_result: Option<(Vec<f64>, f64)> = None;

    for k in 1..=cfg.max_iters {
        matvec(hf, d, &y, &mut hx); // hx = H y
        for i in 0..d {
            x_next[i] = y[i] - scales.step * 2.0 * hx[i];
        }
        p.project(&mut x_next);
        matvec(hf, d, &x_next, &mut hx); // hx = H x_next
        let obj: f64 = x_next.iter().zip(hx.iter()).map(|(a, b)| a * b).sum();

        if !obj.is_finite() || x_next.iter().any(|v| !v.is_finite()) {
            status = SolveStatus::Degenerate;
            iterations = k;
            break;
        }

        let res = projected_gradient_norm(&x_next, &hx, p);
        if obj < best_obj {
            best_obj = obj;
            best_x.copy_from_slice(&x_next);
        }
        if res <= threshold(max_abs(&x_next)) && obj <= obj0 {
            status = SolveStatus::Converged;
            iterations = k;
            converged_result = Some((x_next.clone(), res));
            break;
        }

        let restart = match cfg.restart {
            RestartPolicy::Adaptive => obj > obj_prev || cycle + 1 >= ADAPTIVE_CYCLE_CAP,
            RestartPolicy::Fixed(cycle_len) => cycle + 1 >= cycle_len.max(1),
        };
        if restart {
            if let Some(trace) = restart_trace.as_deref_mut() {
                trace.push(best_obj);
            }
            t = 1.0;
            y.copy_from_slice(&x_next);
            cycle = 0;
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for i in 0..d {
                y[i] = x_next[i] + beta * (x_next[i] - x[i]);
            }
            t = t_next;
            cycle += 1;
        }
        x.copy_from_slice(&x_next);
        obj_prev = obj;
    }

    let (mut delta, kkt_residual) = match converged_result {
        Some((delta, res)) => (delta, res),
        None => {
            // Fall back to the best iterate; recompute its residual.
            matvec(hf, d, &best_x, &mut hx);
            let res = projected_gradient_norm(&best_x, &hx, p);
            (best_x, res)
        }
    };
    // Fixed entries are already clamped to their bounds; re-assert bit
    // equality with -w for the feasibility contract.
    for &i in &p.pruned {
        delta[i] = -(p.w[i] as f64);
    }
    SolveResult {
        col: p.col,
        delta,
        iterations,
        kkt_residual,
        status,
    }
}

/// Solves every column problem in the batch.
///
/// Columns are independent and solved by parallel workers sharing the
/// read-only Hessian; results are ordered by their position in the batch,
/// and the output is bitwise identical for any worker count.
pub fn solve_batch(batch: &ColumnQpBatch<'_>, cfg: &SolverConfig) -> Vec<SolveResult> {
    let h = batch.hessian;
    let d = h.rows();
    let hf = h.to_f64();
    let scales = batch_scales(&hf, d, cfg);
    batch
        .columns
        .par_iter()
        .map(|p| solve_column(&hf, d, p, scales, cfg, None))
        .collect()
}

/// Best-of-grid heavy-ball momentum descent on the reduced objective.
///
/// Each learning rate runs with a linearly decaying schedule from the zero
/// start; the iterate with the lowest final objective wins. There is no
/// convergence guarantee: runs can stall short of the minimum or diverge
/// outright. If every run diverges to non-finite values the zeroing point
/// (all zeros) is returned.
pub fn solve_baseline_momentum(
    reduced: &ReducedQp,
    lr_grid: &[f64],
    steps: usize,
) -> Vec<f64> {
    let n = reduced.dim;
    if n == 0 {
        return Vec::new();
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut grad = vec![0.0f64; n];
    for &lr0 in lr_grid {
        let mut x = vec![0.0f64; n];
        let mut vel = vec![0.0f64; n];
        let mut diverged = false;
        for s in 0..steps {
            let lr = lr0 * (1.0 - s as f64 / steps as f64);
            for i in 0..n {
                let mut qx = 0.0f64;
                for j in 0..n {
                    qx += reduced.q[i * n + j] * x[j];
                }
                grad[i] = 2.0 * qx + reduced.c[i];
            }
            for i in 0..n {
                vel[i] = BASELINE_MOMENTUM * vel[i] - lr * grad[i];
                x[i] += vel[i];
            }
            if x.iter().any(|v| !v.is_finite()) {
                diverged = true;
                break;
            }
        }
        if diverged {
            continue;
        }
        let obj = reduced.objective(&x);
        if !obj.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    match best {
        Some((_, x)) => x,
        None => vec![0.0; n],
    }
}
