//! Incremental accumulation of the shared layer Hessian `H = XᵀX`.
//!
//! Calibration activations arrive as per-sequence slices `y_i`; the Gram
//! matrices `y_iᵀ y_i` are summed one slice at a time so the stacked
//! activation matrix never has to be materialized. The running sum is kept
//! in 64-bit floats because token counts at realistic calibration sizes
//! would otherwise lose low-order digits.

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Default diagonal damping as a fraction of the mean diagonal.
///
/// The damped Hessian `H + λI` with `λ = damping * mean(diag)` stays
/// positive definite even when calibration is under-determined
/// (`n_tokens < d_in`), which the direct block solve requires.
pub const DEFAULT_DAMPING: f64 = 1e-2;

/// Running sum of per-sequence Gram matrices.
///
/// The buffer is exactly symmetric at all times: each update writes the
/// same product to `(i, j)` and `(j, i)`.
#[derive(Debug, Clone)]
pub struct HessianAccumulator {
    dim: usize,
    sum: Vec<f64>,
    sequences_seen: usize,
}

impl HessianAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sum: vec![0.0; dim * dim],
            sequences_seen: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sequences_seen(&self) -> usize {
        self.sequences_seen
    }

    /// Raw accumulated sum, row-major `dim x dim`.
    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    /// Adds one sequence's Gram matrix `yᵀy` to the running sum.
    pub fn accumulate(&mut self, y: &DenseMatrix) -> Result<()> {
        if y.cols() != self.dim {
            return Err(Error::Shape(format!(
                "sequence has {} features, accumulator expects {}",
                y.cols(),
                self.dim
            )));
        }
        let d = self.dim;
        for r in 0..y.rows() {
            let row = y.row(r);
            for i in 0..d {
                let yi = row[i] as f64;
                if yi == 0.0 {
                    continue;
                }
                for j in i..d {
                    let p = yi * row[j] as f64;
                    self.sum[i * d + j] += p;
                    if i != j {
                        self.sum[j * d + i] += p;
                    }
                }
            }
        }
        self.sequences_seen += 1;
        Ok(())
    }

    /// Merges another accumulator into this one. Summation is associative
    /// and commutative up to floating-point reordering, so per-worker
    /// accumulators can be combined in any order.
    pub fn merge(&mut self, other: &HessianAccumulator) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Shape(format!(
                "cannot merge accumulators of dim {} and {}",
                other.dim, self.dim
            )));
        }
        for (a, b) in self.sum.iter_mut().zip(other.sum.iter()) {
            *a += b;
        }
        self.sequences_seen += other.sequences_seen;
        Ok(())
    }

    /// L2 norm of each input feature across all accumulated rows.
    ///
    /// The diagonal of the raw Gram sum is `‖X[:,i]‖₂²`, so these norms come
    /// for free from the same pass that builds the Hessian.
    pub fn feature_norms(&self) -> Vec<f32> {
        (0..self.dim)
            .map(|i| self.sum[i * self.dim + i].max(0.0).sqrt() as f32)
            .collect()
    }

    /// Returns `sum + λI` with `λ = damping * mean(diag(sum))`.
    pub fn finalize(&self, damping: f64) -> Result<DenseMatrix> {
        if self.sequences_seen == 0 {
            return Err(Error::EmptyCalibration);
        }
        if damping.is_nan() || damping < 0.0 {
            return Err(Error::Config(format!(
                "damping must be nonnegative, got {damping}"
            )));
        }
        let d = self.dim;
        let mean_diag = (0..d).map(|i| self.sum[i * d + i]).sum::<f64>() / d as f64;
        let lambda = damping * mean_diag;

        let mut data = vec![0.0f32; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut v = self.sum[i * d + j];
                if i == j {
                    v += lambda;
                }
                data[i * d + j] = v as f32;
            }
        }
        DenseMatrix::new(d, d, data)
    }
}
