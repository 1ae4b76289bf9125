//! Construction of the batched column-wise QPs.
//!
//! For one weight column `w` with pruned index set `S`, the update `Δw`
//! minimizes `Δwᵀ H Δw` subject to `Δw_i = -w_i` for `i ∈ S`. The equality
//! constraints are encoded as tight variable bounds (`lower = upper = -w_i`),
//! which locks those variables without any explicit constraint matrix; the
//! remaining entries are free.
//!
//! Eliminating the fixed entries instead gives the reduced problem
//! `min Δw_Iᵀ Q Δw_I + cᵀ Δw_I + const` with `Q = H_II`,
//! `c = -2 H_IS w_S`, and `const = w_Sᵀ H_SS w_S`; that form backs the
//! closed-form oracle and the baseline optimizer.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::mask::PruneMask;
use crate::tensor::DenseMatrix;

/// Sentinel magnitude for an unbounded variable. Projection clamps against
/// `±FREE_BOUND`, which is a no-op for any value the solver can produce.
pub const FREE_BOUND: f64 = f64::MAX;

/// One column's QP: the original column, per-variable bounds, and the
/// pruned index set.
#[derive(Debug, Clone)]
pub struct ColumnProblem {
    /// Column index within the weight matrix.
    pub col: usize,
    /// Original weight column, length `d`.
    pub w: Vec<f32>,
    /// Lower bounds; `-FREE_BOUND` for free entries, `-w[i]` for fixed.
    pub lower: Vec<f64>,
    /// Upper bounds; `FREE_BOUND` for free entries, `-w[i]` for fixed.
    pub upper: Vec<f64>,
    /// Pruned row indices (ascending).
    pub pruned: Vec<usize>,
}

impl ColumnProblem {
    pub fn new(w: Vec<f32>, pruned: Vec<usize>, col: usize) -> Result<Self> {
        let d = w.len();
        let mut pruned = pruned;
        pruned.sort_unstable();
        pruned.dedup();
        if pruned.last().is_some_and(|&i| i >= d) {
            return Err(Error::Shape(format!(
                "pruned index {} out of range for column of length {}",
                pruned.last().unwrap(),
                d
            )));
        }
        let mut lower = vec![-FREE_BOUND; d];
        let mut upper = vec![FREE_BOUND; d];
        for &i in &pruned {
            let fixed = -(w[i] as f64);
            lower[i] = fixed;
            upper[i] = fixed;
        }
        Ok(Self {
            col,
            w,
            lower,
            upper,
            pruned,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    #[inline]
    pub fn is_fixed(&self, i: usize) -> bool {
        self.lower[i] == self.upper[i]
    }

    /// The always-feasible start: `Δw_S = -w_S`, `Δw_I = 0`. Its objective
    /// equals the reduced problem's constant term, i.e. the error of
    /// zeroing the pruned weights without updating the rest.
    pub fn zeroing_point(&self) -> Vec<f64> {
        let mut x = vec![0.0f64; self.dim()];
        for &i in &self.pruned {
            x[i] = -(self.w[i] as f64);
        }
        x
    }

    /// Clamps a vector into the feasible box.
    pub fn project(&self, x: &mut [f64]) {
        for ((v, &lo), &hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.max(lo).min(hi);
        }
    }
}

/// A set of column problems sharing one Hessian.
#[derive(Debug)]
pub struct ColumnQpBatch<'a> {
    pub hessian: &'a DenseMatrix,
    pub columns: Vec<ColumnProblem>,
}

/// Builds one [`ColumnProblem`] per column in `col_range`.
pub fn build_batch<'a>(
    h: &'a DenseMatrix,
    w: &DenseMatrix,
    mask: &PruneMask,
    col_range: Range<usize>,
) -> Result<ColumnQpBatch<'a>> {
    let d = w.rows();
    if h.rows() != d || h.cols() != d {
        return Err(Error::Shape(format!(
            "hessian is {}x{}, expected {}x{}",
            h.rows(),
            h.cols(),
            d,
            d
        )));
    }
    if mask.rows() != w.rows() || mask.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match weights {}x{}",
            mask.rows(),
            mask.cols(),
            w.rows(),
            w.cols()
        )));
    }
    if col_range.end > w.cols() {
        return Err(Error::Shape(format!(
            "column range {:?} exceeds {} columns",
            col_range,
            w.cols()
        )));
    }
    debug_assert!(
        (0..d).all(|i| (0..d).all(|j| h.get(i, j) == h.get(j, i))),
        "batch hessian must be symmetric"
    );
    let columns = col_range
        .map(|j| ColumnProblem::new(w.column(j), mask.pruned_rows(j), j))
        .collect::<Result<Vec<_>>>()?;
    Ok(ColumnQpBatch {
        hessian: h,
        columns,
    })
}

/// The unconstrained reduction of one column problem.
///
/// Index order inside the kept set preserves the original column order, so
/// expanding a reduced solution back to full length is unambiguous.
#[derive(Debug, Clone)]
pub struct ReducedQp {
    /// `H_II`, row-major `dim x dim`, lifted to f64.
    pub q: Vec<f64>,
    /// Number of kept (free) variables.
    pub dim: usize,
    /// `-2 H_IS w_S`, length `dim`.
    pub c: Vec<f64>,
    /// `w_Sᵀ H_SS w_S`; the objective value of the zeroing point.
    pub const_term: f64,
    /// Kept row indices in original order.
    pub kept: Vec<usize>,
}

impl ReducedQp {
    /// `xᵀ Q x + cᵀ x + const_term`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let mut quad = 0.0f64;
        for i in 0..self.dim {
            let mut t = 0.0f64;
            for j in 0..self.dim {
                t += self.q[i * self.dim + j] * x[j];
            }
            quad += x[i] * t;
        }
        let lin: f64 = self.c.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        quad + lin + self.const_term
    }
}

/// Partitions `H` and the column by the pruned set and eliminates the fixed
/// variables.
pub fn reduce(h: &DenseMatrix, w_col: &[f32], pruned_idx: &[usize]) -> Result<ReducedQp> {
    let d = w_col.len();
    if h.rows() != d || h.cols() != d {
        return Err(Error::Shape(format!(
            "hessian is {}x{}, column has length {}",
            h.rows(),
            h.cols(),
            d
        )));
    }
    let mut pruned = pruned_idx.to_vec();
    pruned.sort_unstable();
    pruned.dedup();
    if pruned.last().is_some_and(|&i| i >= d) {
        return Err(Error::Shape(format!(
            "pruned index {} out of range for dimension {}",
            pruned.last().unwrap(),
            d
        )));
    }

    let mut is_pruned = vec![false; d];
    for &i in &pruned {
        is_pruned[i] = true;
    }
    let kept: Vec<usize> = (0..d).filter(|&i| !is_pruned[i]).collect();
    let k = kept.len();

    let mut q = vec![0.0f64; k * k];
    for (a, &i) in kept.iter().enumerate() {
        for (b, &j) in kept.iter().enumerate() {
            q[a * k + b] = h.get(i, j) as f64;
        }
    }
    let mut c = vec![0.0f64; k];
    for (a, &i) in kept.iter().enumerate() {
        let mut t = 0.0f64;
        for &j in &pruned {
            t += h.get(i, j) as f64 * w_col[j] as f64;
        }
        c[a] = -2.0 * t;
    }
    let mut const_term = 0.0f64;
    for &i in &pruned {
        let mut t = 0.0f64;
        for &j in &pruned {
            t += h.get(i, j) as f64 * w_col[j] as f64;
        }
        const_term += w_col[i] as f64 * t;
    }

    Ok(ReducedQp {
        q,
        dim: k,
        c,
        const_term,
        kept,
    })
}

/// Full objective `Δwᵀ H Δw` with 64-bit accumulation.
pub fn objective(h: &DenseMatrix, delta: &[f64]) -> f64 {
    debug_assert_eq!(h.rows(), delta.len());
    debug_assert_eq!(h.cols(), delta.len());
    let d = delta.len();
    let mut obj = 0.0f64;
    for i in 0..d {
        let row = h.row(i);
        let mut t = 0.0f64;
        for j in 0..d {
            t += row[j] as f64 * delta[j];
        }
        obj += delta[i] * t;
    }
    obj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{select_unstructured, PruneMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn h22() -> DenseMatrix {
        DenseMatrix::new(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap()
    }

    /// Builds a full-length feasible vector from free values.
    fn expand_for_test(free: &[f64], w: &[f32], kept: &[usize], pruned: &[usize]) -> Vec<f64> {
        let mut x = vec![0.0f64; w.len()];
        for (a, &i) in kept.iter().enumerate() {
            x[i] = free[a];
        }
        for &i in pruned {
            x[i] = -(w[i] as f64);
        }
        x
    }

    #[test]
    fn full_ones_mask_leaves_all_free() {
        let h = h22();
        let w = DenseMatrix::new(2, 1, vec![1.0, 0.5]).unwrap();
        let mask = PruneMask::ones(2, 1);
        let batch = build_batch(&h, &w, &mask, 0..1).unwrap();
        let p = &batch.columns[0];
        assert!(p.pruned.is_empty());
        assert_eq!(p.lower, vec![-FREE_BOUND; 2]);
        assert_eq!(p.upper, vec![FREE_BOUND; 2]);
    }

    #[test]
    fn all_zeros_mask_fixes_everything() {
        let h = h22();
        let w = DenseMatrix::new(2, 1, vec![1.0, 0.5]).unwrap();
        let zeros = PruneMask::from_matrix(&DenseMatrix::zeros(2, 1)).unwrap();
        let batch = build_batch(&h, &w, &zeros, 0..1).unwrap();
        let p = &batch.columns[0];
        assert_eq!(p.pruned, vec![0, 1]);
        assert_eq!(p.lower, vec![-1.0, -0.5]);
        assert_eq!(p.upper, vec![-1.0, -0.5]);
        // Fully determined: objective at the only feasible point is wᵀHw.
        let x = p.zeroing_point();
        let manual = {
            let (w0, w1) = (1.0f64, 0.5f64);
            2.0 * w0 * w0 + 2.0 * w0 * w1 + 2.0 * w1 * w1
        };
        assert!((objective(&h, &x) - manual).abs() < 1e-12);
    }

    #[test]
    fn single_pruned_entry_bounds() {
        let h = h22();
        let w = DenseMatrix::new(2, 1, vec![1.0, 0.5]).unwrap();
        let m = DenseMatrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let mask = PruneMask::from_matrix(&m).unwrap();
        let batch = build_batch(&h, &w, &mask, 0..1).unwrap();
        let p = &batch.columns[0];
        assert_eq!(p.lower, vec![-FREE_BOUND, -0.5]);
        assert_eq!(p.upper, vec![FREE_BOUND, -0.5]);
    }

    #[test]
    fn reduce_hand_example() {
        // H = [[2,1],[1,2]], w = [1, 0.5], S = {1}
        let r = reduce(&h22(), &[1.0, 0.5], &[1]).unwrap();
        assert_eq!(r.dim, 1);
        assert_eq!(r.q, vec![2.0]);
        assert_eq!(r.c, vec![-1.0]);
        assert_eq!(r.const_term, 0.5);
        assert_eq!(r.kept, vec![0]);

        // Brute-force confirmation: reduced and full objectives agree on a
        // sweep of free values.
        for k in -10..=10 {
            let x_free = [k as f64 * 0.1];
            let full = expand_for_test(&x_free, &[1.0, 0.5], &r.kept, &[1]);
            let a = r.objective(&x_free);
            let b = objective(&h22(), &full);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn reduce_empty_pruned_set() {
        let r = reduce(&h22(), &[1.0, 0.5], &[]).unwrap();
        assert_eq!(r.dim, 2);
        assert_eq!(r.q, vec![2.0, 1.0, 1.0, 2.0]);
        assert_eq!(r.c, vec![0.0, 0.0]);
        assert_eq!(r.const_term, 0.0);
    }

    #[test]
    fn reduce_all_pruned() {
        let r = reduce(&h22(), &[1.0, 0.5], &[0, 1]).unwrap();
        assert_eq!(r.dim, 0);
        assert!(r.q.is_empty());
        let w0 = 1.0f64;
        let w1 = 0.5f64;
        let want = 2.0 * w0 * w0 + 2.0 * w0 * w1 + 2.0 * w1 * w1;
        assert!((r.const_term - want).abs() < 1e-12);
    }

    #[test]
    fn objective_examples() {
        assert_eq!(objective(&h22(), &[0.0, 0.0]), 0.0);
        let i2 = DenseMatrix::identity(2);
        assert_eq!(objective(&i2, &[3.0, 4.0]), 25.0);
    }

    #[test]
    fn objective_equals_explicit_x_norm() {
        // H built from explicit X: Δᵀ(XᵀX)Δ must match ‖XΔ‖².
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = rng.gen_range(3..12);
            let d = rng.gen_range(2..8);
            let xdata: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let x = DenseMatrix::new(n, d, xdata).unwrap();
            let mut acc = crate::hessian::HessianAccumulator::new(d);
            acc.accumulate(&x).unwrap();
            let h = acc.finalize(0.0).unwrap();

            let delta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let via_h = objective(&h, &delta);
            let mut via_x = 0.0f64;
            for r in 0..n {
                let mut s = 0.0f64;
                for j in 0..d {
                    s += x.get(r, j) as f64 * delta[j];
                }
                via_x += s * s;
            }
            assert!(
                (via_h - via_x).abs() <= 1e-5 * via_x.abs().max(1.0),
                "{via_h} vs {via_x}"
            );
        }
    }

    #[test]
    fn zeroing_point_objective_equals_const_term_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let d = rng.gen_range(2..10);
            let hdata: Vec<f32> = {
                let mut m = vec![0.0f32; d * d];
                for i in 0..d {
                    for j in i..d {
                        let v = rng.gen_range(-1.0f32..1.0);
                        m[i * d + j] = v;
                        m[j * d + i] = v;
                    }
                }
                m
            };
            let h = DenseMatrix::new(d, d, hdata).unwrap();
            let w: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let n_pruned = rng.gen_range(0..=d);
            let mut pruned: Vec<usize> = (0..d).collect();
            // deterministic subset: every other index up to n_pruned
            pruned.truncate(n_pruned);

            let r = reduce(&h, &w, &pruned).unwrap();
            let p = ColumnProblem::new(w.clone(), pruned.clone(), 0).unwrap();
            let obj = objective(&h, &p.zeroing_point());
            assert_eq!(obj, r.const_term);
        }
    }

    #[test]
    fn constrained_and_reduced_objectives_agree_on_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..30 {
            let d = rng.gen_range(2..10);
            let mut acc = crate::hessian::HessianAccumulator::new(d);
            let xdata: Vec<f32> = (0..3 * d * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            acc.accumulate(&DenseMatrix::new(3 * d, d, xdata).unwrap())
                .unwrap();
            let h = acc.finalize(0.01).unwrap();
            let w: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let pruned: Vec<usize> = (0..d).filter(|_| rng.gen_bool(0.5)).collect();
            let r = reduce(&h, &w, &pruned).unwrap();

            for _ in 0..30 {
                let free: Vec<f64> = (0..r.dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let full = expand_for_test(&free, &w, &r.kept, &pruned);
                let a = r.objective(&free);
                let b = objective(&h, &full);
                assert!(
                    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12),
                    "reduced {a} vs full {b}"
                );
            }
        }
    }

    #[test]
    fn batch_over_range_equals_union_of_single_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let d = 6;
        let cols = 5;
        let wdata: Vec<f32> = (0..d * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let w = DenseMatrix::new(d, cols, wdata).unwrap();
        let scores = crate::mask::score(&w, &crate::mask::ScoreRule::Magnitude).unwrap();
        let mask = select_unstructured(&scores, 0.5).unwrap();
        let h = DenseMatrix::identity(d);

        let whole = build_batch(&h, &w, &mask, 0..cols).unwrap();
        for j in 0..cols {
            let single = build_batch(&h, &w, &mask, j..j + 1).unwrap();
            let a = &whole.columns[j];
            let b = &single.columns[0];
            assert_eq!(a.col, b.col);
            assert_eq!(a.w, b.w);
            assert_eq!(a.lower, b.lower);
            assert_eq!(a.upper, b.upper);
            assert_eq!(a.pruned, b.pruned);
        }
    }

    #[test]
    fn build_batch_rejects_shape_mismatches() {
        let h = DenseMatrix::identity(3);
        let w = DenseMatrix::zeros(2, 2);
        let mask = PruneMask::ones(2, 2);
        assert!(matches!(
            build_batch(&h, &w, &mask, 0..2),
            Err(Error::Shape(_))
        ));
        let h2 = DenseMatrix::identity(2);
        let bad_mask = PruneMask::ones(3, 2);
        assert!(matches!(
            build_batch(&h2, &w, &bad_mask, 0..2),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            build_batch(&h2, &w, &mask, 0..3),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zeroing_point_is_feasible() {
        let w = vec![1.0f32, -2.0, 0.5];
        let p = ColumnProblem::new(w, vec![0, 2], 0).unwrap();
        let mut x = p.zeroing_point();
        let before = x.clone();
        p.project(&mut x);
        assert_eq!(x, before);
        assert_eq!(x[0], -1.0);
        assert_eq!(x[1], 0.0);
        assert_eq!(x[2], -0.5);
    }
}
