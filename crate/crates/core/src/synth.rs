//! Seeded generators for synthetic models, calibration data, and QP test
//! instances. Everything is driven by a caller-supplied ChaCha RNG, so
//! identical seeds produce byte-identical artifacts on every platform.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::manifest::{Activation, LayerSpec, ModelManifest};
use crate::tensor::{write_tensor, DenseMatrix};

/// Draws `n` rows whose features share a common factor: each row is
/// `x_j = sqrt(rho) * z0 + sqrt(1 - rho) * z_j` with independent standard
/// normals, so the population feature covariance has unit diagonal and
/// off-diagonal `rho`.
pub fn correlated_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, rho: f64) -> Result<DenseMatrix> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!(
            "correlation must lie in [0, 1), got {rho}"
        )));
    }
    let shared = rho.sqrt();
    let indep = (1.0 - rho).sqrt();
    let mut data = vec![0.0f32; n * d];
    for r in 0..n {
        let z0: f64 = rng.sample(StandardNormal);
        for c in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            data[r * d + c] = (shared * z0 + indep * z) as f32;
        }
    }
    DenseMatrix::new(n, d, data)
}

/// Random weights with `1/sqrt(rows)` scale so activations keep O(1)
/// magnitude as they propagate through the layer chain.
pub fn gaussian_weights(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let scale = 1.0 / (rows as f64).sqrt();
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * scale) as f32
        })
        .collect();
    DenseMatrix::new(rows, cols, data).expect("finite by construction")
}

/// Symmetric positive definite matrix with eigenvalues log-spaced in
/// `[1/cond, 1]`, conjugated by a product of random Householder
/// reflections. The returned matrix is exactly symmetric.
pub fn spd_with_condition(rng: &mut ChaCha8Rng, d: usize, cond: f64) -> DenseMatrix {
    assert!(d >= 1 && cond >= 1.0);
    let mut m = vec![0.0f64; d * d];
    for i in 0..d {
        let t = if d == 1 { 1.0 } else { i as f64 / (d - 1) as f64 };
        // log-spaced from 1/cond up to 1
        m[i * d + i] = cond.powf(t - 1.0);
    }
    let mut tmp = vec![0.0f64; d];
    for _ in 0..3 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            continue;
        }
        for x in v.iter_mut() {
            *x /= n;
        }
        // m <- (I - 2vv')m: subtract 2 v (v'm)
        for j in 0..d {
            tmp[j] = (0..d).map(|i| v[i] * m[i * d + j]).sum();
        }
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] -= 2.0 * v[i] * tmp[j];
            }
        }
        // m <- m(I - 2vv'): subtract 2 (m v) v'
        for i in 0..d {
            tmp[i] = (0..d).map(|j| m[i * d + j] * v[j]).sum();
        }
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] -= 2.0 * tmp[i] * v[j];
            }
        }
    }
    let mut data = vec![0.0f32; d * d];
    for i in 0..d {
        for j in i..d {
            let v = (0.5 * (m[i * d + j] + m[j * d + i])) as f32;
            data[i * d + j] = v;
            data[j * d + i] = v;
        }
    }
    DenseMatrix::new(d, d, data).expect("finite by construction")
}

/// One column QP instance: an SPD Hessian with the requested condition
/// number, a random column, and a pruned set of `floor(sparsity * d)` rows.
pub fn conditioned_instance(
    rng: &mut ChaCha8Rng,
    d: usize,
    cond: f64,
    sparsity: f64,
) -> (DenseMatrix, Vec<f32>, Vec<usize>) {
    let h = spd_with_condition(rng, d, cond);
    let w: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(rng);
    let k = (sparsity * d as f64).floor() as usize;
    let mut pruned: Vec<usize> = idx.into_iter().take(k).collect();
    pruned.sort_unstable();
    (h, w, pruned)
}

/// Files produced by [`generate_model`].
#[derive(Debug)]
pub struct GeneratedModel {
    pub manifest_path: PathBuf,
    pub calibration_path: PathBuf,
    pub weight_paths: Vec<PathBuf>,
}

/// Writes a chain of `layers` square random layers of width `dim`, plus a
/// calibration matrix of `rows` correlated samples, into `out_dir`.
pub fn generate_model(
    out_dir: &Path,
    layers: usize,
    dim: usize,
    rows: usize,
    rho: f64,
    activation: Activation,
    seed: u64,
) -> Result<GeneratedModel> {
    if layers == 0 {
        return Err(Error::Config("need at least one layer".to_string()));
    }
    if dim < 2 {
        return Err(Error::Config(format!(
            "layer width must be at least 2, got {dim}"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let calib = correlated_rows(&mut rng, rows, dim, rho)?;
    let calibration_path = out_dir.join("calib.qptn");
    write_tensor(&calibration_path, &calib)?;

    let mut specs = Vec::with_capacity(layers);
    let mut weight_paths = Vec::with_capacity(layers);
    for l in 0..layers {
        let name = format!("fc{l}");
        let w = gaussian_weights(&mut rng, dim, dim);
        let file = format!("{name}.qptn");
        let path = out_dir.join(&file);
        write_tensor(&path, &w)?;
        weight_paths.push(path);
        specs.push(LayerSpec {
            name,
            rows: dim,
            cols: dim,
            weight_file: file,
            activation,
        });
    }
    let manifest = ModelManifest { layers: specs };
    manifest.validate()?;
    let manifest_path = out_dir.join("model.json");
    crate::manifest::write_manifest(&manifest_path, &manifest)?;

    Ok(GeneratedModel {
        manifest_path,
        calibration_path,
        weight_paths,
    })
}
