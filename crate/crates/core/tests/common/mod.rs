//! Shared helpers for integration tests: independent oracles and instance
//! builders. Each test binary uses its own subset.
#![allow(dead_code)]

use qprune_core::tensor::DenseMatrix;

/// Cyclic Jacobi eigenvalue iteration for symmetric matrices. Used as an
/// independent spectrum oracle; O(d^3) per sweep, fine for small `d`.
pub fn jacobi_eigenvalues(m: &DenseMatrix) -> Vec<f64> {
    let d = m.rows();
    assert_eq!(d, m.cols());
    let mut a = m.to_f64();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in i + 1..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `‖H_IS w_S‖∞` for a column instance: the coupling between pruned and
/// kept coordinates that determines whether any improvement is possible.
pub fn coupling_inf_norm(h: &DenseMatrix, w: &[f32], pruned: &[usize]) -> f64 {
    let d = w.len();
    let mut is_pruned = vec![false; d];
    for &i in pruned {
        is_pruned[i] = true;
    }
    let mut worst = 0.0f64;
    for i in 0..d {
        if is_pruned[i] {
            continue;
        }
        let mut s = 0.0f64;
        for &j in pruned {
            s += h.get(i, j) as f64 * w[j] as f64;
        }
        worst = worst.max(s.abs());
    }
    worst
}
