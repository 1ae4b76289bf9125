//! Binary pruning masks: magnitude and input-scaled scoring, unstructured
//! and N:M selection, and QPTN-backed mask I/O.
//!
//! Selection is per column (each column feeds one independent QP) and fully
//! deterministic: score ties are broken by pruning the lower row index
//! first. Masks from external selectors enter through [`load_mask`].

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, DenseMatrix};

/// Binary mask congruent to a weight matrix; 0 = pruned, 1 = kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl PruneMask {
    /// All-ones (keep everything) mask.
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![1; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c] == 1
    }

    /// Row indices pruned in column `c`, ascending.
    pub fn pruned_rows(&self, c: usize) -> Vec<usize> {
        (0..self.rows).filter(|&r| !self.is_kept(r, c)).collect()
    }

    pub fn zeros_in_column(&self, c: usize) -> usize {
        (0..self.rows).filter(|&r| !self.is_kept(r, c)).count()
    }

    /// Fraction of pruned entries over the whole mask.
    pub fn sparsity(&self) -> f64 {
        let zeros = self.bits.iter().filter(|&&b| b == 0).count();
        zeros as f64 / self.bits.len().max(1) as f64
    }

    /// Elementwise product with a congruent matrix.
    pub fn apply(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        if w.rows() != self.rows || w.cols() != self.cols {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match weights {}x{}",
                self.rows,
                self.cols,
                w.rows(),
                w.cols()
            )));
        }
        let data = w
            .data()
            .iter()
            .zip(self.bits.iter())
            .map(|(&v, &b)| if b == 1 { v } else { 0.0 })
            .collect();
        DenseMatrix::new(self.rows, self.cols, data)
    }

    /// 0.0/1.0 matrix view for serialization.
    pub fn to_matrix(&self) -> DenseMatrix {
        let data = self.bits.iter().map(|&b| b as f32).collect();
        DenseMatrix::new(self.rows, self.cols, data).expect("bits are finite")
    }

    /// Validates a 0.0/1.0 matrix as a mask.
    pub fn from_matrix(m: &DenseMatrix) -> Result<Self> {
        let mut bits = Vec::with_capacity(m.data().len());
        for (i, &v) in m.data().iter().enumerate() {
            if v == 0.0 {
                bits.push(0);
            } else if v == 1.0 {
                bits.push(1);
            } else {
                return Err(Error::Validation(format!(
                    "mask entry {} at flat index {} is not 0 or 1",
                    v, i
                )));
            }
        }
        Ok(Self {
            rows: m.rows(),
            cols: m.cols(),
            bits,
        })
    }
}

/// How to score weights before selection.
#[derive(Debug, Clone)]
pub enum ScoreRule {
    /// `|w_ij|`.
    Magnitude,
    /// `|w_ij| * feature_norms[i]`, the input-scaled score used by
    /// activation-aware selectors. `feature_norms[i]` is the L2 norm of
    /// calibration activations for input feature `i` (length `w.rows`).
    InputScaled { feature_norms: Vec<f32> },
}

/// Computes nonnegative saliency scores for every weight.
pub fn score(w: &DenseMatrix, rule: &ScoreRule) -> Result<DenseMatrix> {
    match rule {
        ScoreRule::Magnitude => {
            let data = w.data().iter().map(|v| v.abs()).collect();
            DenseMatrix::new(w.rows(), w.cols(), data)
        }
        ScoreRule::InputScaled { feature_norms } => {
            if feature_norms.len() != w.rows() {
                return Err(Error::Config(format!(
                    "input-scaled scoring needs {} feature norms, got {}",
                    w.rows(),
                    feature_norms.len()
                )));
            }
            if let Some(bad) = feature_norms.iter().find(|n| n.is_nan() || **n < 0.0) {
                return Err(Error::Validation(format!(
                    "feature norm {} is negative or non-finite",
                    bad
                )));
            }
            let mut data = vec![0.0f32; w.rows() * w.cols()];
            for r in 0..w.rows() {
                let norm = feature_norms[r];
                for c in 0..w.cols() {
                    data[r * w.cols() + c] = w.get(r, c).abs() * norm;
                }
            }
            DenseMatrix::new(w.rows(), w.cols(), data)
        }
    }
}

/// Prunes exactly `floor(sparsity * rows)` lowest-scoring entries per column.
pub fn select_unstructured(scores: &DenseMatrix, sparsity: f64) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!(
            "sparsity must lie in [0, 1), got {sparsity}"
        )));
    }
    let rows = scores.rows();
    let prune_per_col = (sparsity * rows as f64).floor() as usize;
    let mut mask = PruneMask::ones(rows, scores.cols());
    let mut order: Vec<usize> = Vec::with_capacity(rows);
    for c in 0..scores.cols() {
        order.clear();
        order.extend(0..rows);
        order.sort_by(|&a, &b| {
            scores
                .get(a, c)
                .total_cmp(&scores.get(b, c))
                .then(a.cmp(&b))
        });
        for &r in order.iter().take(prune_per_col) {
            mask.bits[r * mask.cols + c] = 0;
        }
    }
    Ok(mask)
}

/// Within every aligned group of `m` consecutive row entries per column,
/// keeps the `n` highest-scoring weights.
pub fn select_nm(scores: &DenseMatrix, n: usize, m: usize) -> Result<PruneMask> {
    if m == 0 || n >= m {
        return Err(Error::Config(format!(
            "n:m pattern requires 0 < n < m, got {n}:{m}"
        )));
    }
    if !scores.rows().is_multiple_of(m) {
        return Err(Error::Shape(format!(
            "{} rows are not divisible by group size {}",
            scores.rows(),
            m
        )));
    }
    let mut mask = PruneMask::ones(scores.rows(), scores.cols());
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for c in 0..scores.cols() {
        for g in 0..scores.rows() / m {
            let base = g * m;
            order.clear();
            order.extend(base..base + m);
            order.sort_by(|&a, &b| {
                scores
                    .get(a, c)
                    .total_cmp(&scores.get(b, c))
                    .then(a.cmp(&b))
            });
            for &r in order.iter().take(m - n) {
                mask.bits[r * mask.cols + c] = 0;
            }
        }
    }
    Ok(mask)
}

/// Reads an externally produced mask from a QPTN file of 0.0/1.0 entries.
pub fn load_mask(path: impl AsRef<Path>) -> Result<PruneMask> {
    let m = read_tensor(path)?;
    PruneMask::from_matrix(&m)
}

/// Writes a mask as a QPTN file of 0.0/1.0 entries.
pub fn save_mask(path: impl AsRef<Path>, mask: &PruneMask) -> Result<()> {
    write_tensor(path, &mask.to_matrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col_matrix(values: &[f32]) -> DenseMatrix {
        DenseMatrix::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn magnitude_score_is_absolute_value() {
        let w = col_matrix(&[3.0, -1.0, 0.5, 2.0]);
        let s = score(&w, &ScoreRule::Magnitude).unwrap();
        assert_eq!(s.data(), &[3.0, 1.0, 0.5, 2.0]);
    }

    #[test]
    fn input_scaled_score_multiplies_norms() {
        let w = col_matrix(&[1.0, 2.0]);
        let s = score(
            &w,
            &ScoreRule::InputScaled {
                feature_norms: vec![10.0, 1.0],
            },
        )
        .unwrap();
        assert_eq!(s.data(), &[10.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_zero_scores() {
        let w = DenseMatrix::zeros(3, 2);
        for rule in [
            ScoreRule::Magnitude,
            ScoreRule::InputScaled {
                feature_norms: vec![1.0, 2.0, 3.0],
            },
        ] {
            let s = score(&w, &rule).unwrap();
            assert!(s.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn input_scaled_requires_norms_of_right_length() {
        let w = DenseMatrix::zeros(3, 1);
        let r = score(
            &w,
            &ScoreRule::InputScaled {
                feature_norms: vec![1.0],
            },
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn unstructured_prunes_bottom_half() {
        let s = col_matrix(&[3.0, 1.0, 0.5, 2.0]);
        let mask = select_unstructured(&s, 0.5).unwrap();
        let kept: Vec<u8> = (0..4).map(|r| mask.is_kept(r, 0) as u8).collect();
        assert_eq!(kept, vec![1, 0, 0, 1]);
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let s = col_matrix(&[1.0, 2.0]);
        let mask = select_unstructured(&s, 0.0).unwrap();
        assert_eq!(mask, PruneMask::ones(2, 1));
    }

    #[test]
    fn ties_prune_lower_index_first() {
        let s = col_matrix(&[1.0, 1.0, 2.0, 2.0]);
        let mask = select_unstructured(&s, 0.5).unwrap();
        let kept: Vec<u8> = (0..4).map(|r| mask.is_kept(r, 0) as u8).collect();
        assert_eq!(kept, vec![0, 0, 1, 1]);
    }

    #[test]
    fn sparsity_one_is_rejected() {
        let s = col_matrix(&[1.0]);
        assert!(matches!(
            select_unstructured(&s, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            select_unstructured(&s, 1.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nm_keeps_top_two_of_four() {
        let s = col_matrix(&[0.1, 5.0, 3.0, 0.2]);
        let mask = select_nm(&s, 2, 4).unwrap();
        let kept: Vec<u8> = (0..4).map(|r| mask.is_kept(r, 0) as u8).collect();
        assert_eq!(kept, vec![0, 1, 1, 0]);
    }

    #[test]
    fn nm_tie_prunes_lower_index() {
        let s = col_matrix(&[2.0, 2.0]);
        let mask = select_nm(&s, 1, 2).unwrap();
        let kept: Vec<u8> = (0..2).map(|r| mask.is_kept(r, 0) as u8).collect();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn nm_group_counts_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f32> = (0..16 * 8).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let s = DenseMatrix::new(16, 8, data).unwrap();
        let mask = select_nm(&s, 2, 4).unwrap();
        for c in 0..8 {
            for g in 0..4 {
                let ones: usize = (g * 4..(g + 1) * 4)
                    .filter(|&r| mask.is_kept(r, c))
                    .count();
                assert_eq!(ones, 2);
            }
        }
    }

    #[test]
    fn nm_rejects_indivisible_rows() {
        let s = DenseMatrix::zeros(6, 1);
        assert!(matches!(select_nm(&s, 2, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn load_mask_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();

        let ones_path = dir.path().join("ones.qptn");
        crate::tensor::write_tensor(&ones_path, &PruneMask::ones(3, 2).to_matrix()).unwrap();
        assert_eq!(load_mask(&ones_path).unwrap(), PruneMask::ones(3, 2));

        let s = col_matrix(&[3.0, 1.0, 0.5, 2.0]);
        let mask = select_unstructured(&s, 0.5).unwrap();
        let path = dir.path().join("m.qptn");
        save_mask(&path, &mask).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);

        let bad = DenseMatrix::new(1, 2, vec![1.0, 0.5]).unwrap();
        let bad_path = dir.path().join("bad.qptn");
        crate::tensor::write_tensor(&bad_path, &bad).unwrap();
        assert!(matches!(load_mask(&bad_path), Err(Error::Validation(_))));
    }

    #[test]
    fn unstructured_zero_count_is_exact_per_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let rows = rng.gen_range(1..40);
            let cols = rng.gen_range(1..6);
            let sparsity = rng.gen_range(0.0..1.0);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s = DenseMatrix::new(rows, cols, data).unwrap();
            let mask = select_unstructured(&s, sparsity).unwrap();
            let want = (sparsity * rows as f64).floor() as usize;
            for c in 0..cols {
                assert_eq!(mask.zeros_in_column(c), want);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn selection_is_scale_invariant(seed in any::<u64>(), exp in -8i32..9) {
            // Powers of two scale exactly in IEEE arithmetic, so the argsort
            // is preserved bit-for-bit.
            let scale = (exp as f32).exp2();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = 12;
            let data: Vec<f32> = (0..rows * 2).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            let s = DenseMatrix::new(rows, 2, data.clone()).unwrap();
            let scaled = DenseMatrix::new(
                rows,
                2,
                data.iter().map(|v| v * scale).collect(),
            ).unwrap();
            let m1 = select_unstructured(&s, 0.5).unwrap();
            let m2 = select_unstructured(&scaled, 0.5).unwrap();
            prop_assert_eq!(m1, m2);

            let n1 = select_nm(&s, 2, 4).unwrap();
            let n2 = select_nm(&scaled, 2, 4).unwrap();
            prop_assert_eq!(n1, n2);
        }
    }
}
