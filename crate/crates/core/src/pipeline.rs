//! End-to-end layer-wise pruning: Hessian accumulation, mask selection,
//! batched column solves, the skip-layer safeguard, and propagation of
//! pruned activations to the next layer.
//!
//! Layers run strictly in order because each consumes the previous layer's
//! pruned outputs. Within a layer, column batches share the read-only
//! Hessian and may be solved by parallel workers; results are aggregated by
//! column index so reports and weights do not depend on the worker count.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::{HessianAccumulator, DEFAULT_DAMPING};
use crate::manifest::{read_manifest, write_manifest, LayerSpec, ModelManifest};
use crate::mask::{self, PruneMask, ScoreRule};
use crate::oracle;
use crate::qp::{self, build_batch};
use crate::solver::{
    solve_batch, solve_baseline_momentum, SolveStatus, SolverConfig, BASELINE_LR_GRID,
};
use crate::tensor::{matmul, read_tensor, write_tensor, DenseMatrix};

/// How pruning masks are chosen.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Selector {
    /// `|w|` scores.
    Magnitude,
    /// `|w| * ‖X[:,i]‖₂` scores from the calibration activations.
    Wanda,
    /// Externally produced mask, one QPTN file per layer named
    /// `<layer>.qptn` under `dir` (or the file itself for a single layer).
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SparsityPattern {
    Unstructured { sparsity: f64 },
    Nm { n: usize, m: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMethod {
    /// Column-wise QP reconstruction.
    Qp,
    /// Zero pruned weights, leave the rest untouched.
    None,
    /// Best-of-grid momentum descent on the reduced objective.
    BaselineMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    /// Restarted accelerated projected gradient.
    Iterative,
    /// Closed-form block solve per column.
    Direct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    pub calibration_path: PathBuf,
    pub out_dir: PathBuf,
    pub selector: Selector,
    pub pattern: SparsityPattern,
    pub update: UpdateMethod,
    pub solver_mode: SolverMode,
    pub solver: SolverConfig,
    /// Diagonal damping as a fraction of the Hessian's mean diagonal.
    pub damping: f64,
    /// Columns per solver batch; the last batch may be smaller.
    pub batch_cols: usize,
    /// Skip threshold τ: a layer is skipped when fewer than this fraction
    /// of its columns converge, or when the update worsens the error.
    pub skip_threshold: f64,
    /// Rows per calibration sequence for Hessian accumulation; the whole
    /// matrix is one sequence when absent.
    pub sequence_len: Option<usize>,
    /// Steps per learning rate for the baseline momentum optimizer.
    pub baseline_steps: usize,
    /// Write each layer's finalized Hessian next to its pruned weights.
    pub dump_hessian: bool,
    pub seed: u64,
    /// Worker cap; resolved from `QPRUNE_THREADS` by the CLI. Not part of
    /// the report echo because results do not depend on it.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn new(
        manifest_path: impl Into<PathBuf>,
        calibration_path: impl Into<PathBuf>,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            manifest_path: manifest_path.into(),
            calibration_path: calibration_path.into(),
            out_dir: out_dir.into(),
            selector: Selector::Magnitude,
            pattern: SparsityPattern::Unstructured { sparsity: 0.5 },
            update: UpdateMethod::Qp,
            solver_mode: SolverMode::Iterative,
            solver: SolverConfig::default(),
            damping: DEFAULT_DAMPING,
            batch_cols: 512,
            skip_threshold: 0.5,
            sequence_len: None,
            baseline_steps: 500,
            dump_hessian: false,
            seed: 0,
            threads: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.skip_threshold > 0.0 && self.skip_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "skip threshold must lie in (0, 1], got {}",
                self.skip_threshold
            )));
        }
        if self.batch_cols == 0 {
            return Err(Error::Config("batch size must be at least 1".to_string()));
        }
        if self.damping.is_nan() || self.damping < 0.0 {
            return Err(Error::Config(format!(
                "damping must be nonnegative, got {}",
                self.damping
            )));
        }
        match self.pattern {
            SparsityPattern::Unstructured { sparsity } => {
                if !(0.0..1.0).contains(&sparsity) {
                    return Err(Error::Config(format!(
                        "sparsity must lie in [0, 1), got {sparsity}"
                    )));
                }
            }
            SparsityPattern::Nm { n, m } => {
                if m == 0 || n >= m {
                    return Err(Error::Config(format!(
                        "n:m pattern requires 0 < n < m, got {n}:{m}"
                    )));
                }
            }
        }
        if self.sequence_len == Some(0) {
            return Err(Error::Config("sequence length must be positive".to_string()));
        }
        if !(self.solver.rel_tol > 0.0) || !(self.solver.abs_tol > 0.0) {
            return Err(Error::Config(format!(
                "solver tolerances must be positive, got rel {} abs {}",
                self.solver.rel_tol, self.solver.abs_tol
            )));
        }
        if self.solver.max_iters == 0 {
            return Err(Error::Config("max iterations must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// The layer-level safeguard: abandon the computed update when too few
/// columns converged or when it made the reconstruction error worse.
fn skip_decision(
    update: UpdateMethod,
    converged_fraction: f64,
    threshold: f64,
    final_error: f64,
    initial_error: f64,
) -> Option<String> {
    if update == UpdateMethod::None {
        return None;
    }
    if converged_fraction < threshold {
        return Some(format!(
            "converged fraction {converged_fraction:.3} below threshold {threshold}"
        ));
    }
    if final_error > initial_error {
        return Some(format!(
            "final error {final_error:.6e} exceeds initial {initial_error:.6e}"
        ));
    }
    None
}

/// Per-layer outcome of a pruning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    /// MSE of the zeroing-only update against the dense output.
    pub initial_error: f64,
    /// MSE of the stored weights against the dense output.
    pub final_error: f64,
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
    pub converged_fraction: f64,
    pub iterations_p50: usize,
    pub iterations_p95: usize,
    pub sparsity_achieved: f64,
}

/// `final_error / initial_error` with a flag for the 0/0 case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRatio {
    pub value: f64,
    pub degenerate: bool,
}

pub fn relative_error_ratio(report: &LayerReport) -> ErrorRatio {
    if report.initial_error > 0.0 {
        ErrorRatio {
            value: report.final_error / report.initial_error,
            degenerate: false,
        }
    } else {
        ErrorRatio {
            value: 1.0,
            degenerate: true,
        }
    }
}

/// Mean squared difference over all entries, accumulated in f64.
pub fn layer_error(y_dense: &DenseMatrix, y_pruned: &DenseMatrix) -> Result<f64> {
    if y_dense.rows() != y_pruned.rows() || y_dense.cols() != y_pruned.cols() {
        return Err(Error::Shape(format!(
            "outputs {}x{} vs {}x{}",
            y_dense.rows(),
            y_dense.cols(),
            y_pruned.rows(),
            y_pruned.cols()
        )));
    }
    let mut sum = 0.0f64;
    for (a, b) in y_dense.data().iter().zip(y_pruned.data().iter()) {
        let diff = *a as f64 - *b as f64;
        sum += diff * diff;
    }
    Ok(sum / y_dense.data().len().max(1) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTotals {
    pub layers: usize,
    pub layers_skipped: usize,
    pub geometric_mean_ratio: f64,
    pub columns_total: usize,
    pub converged_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub layers: Vec<LayerReport>,
    pub config: RunConfig,
    pub totals: RunTotals,
}

/// Removes every tracked output file unless disarmed; keeps failed runs
/// from leaving partial artifacts behind.
struct OutputGuard {
    created: Vec<PathBuf>,
    armed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        Self {
            created: Vec::new(),
            armed: true,
        }
    }
    fn track(&mut self, p: PathBuf) {
        self.created.push(p);
    }
    fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.armed {
            for p in &self.created {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn percentile(sorted: &[usize], q: f64) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Per-column outcome used to assemble the layer update.
struct ColumnOutcome {
    delta: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn apply_activation(m: DenseMatrix, act: crate::manifest::Activation) -> DenseMatrix {
    let (rows, cols) = (m.rows(), m.cols());
    let data = m.data().iter().map(|&v| act.apply(v)).collect();
    DenseMatrix::new(rows, cols, data).expect("activation preserves finiteness")
}

fn select_layer_mask(
    cfg: &RunConfig,
    layer: &LayerSpec,
    w: &DenseMatrix,
    acc: &HessianAccumulator,
    total_layers: usize,
) -> Result<PruneMask> {
    let scores = match &cfg.selector {
        Selector::Magnitude => mask::score(w, &ScoreRule::Magnitude)?,
        Selector::Wanda => mask::score(
            w,
            &ScoreRule::InputScaled {
                feature_norms: acc.feature_norms(),
            },
        )?,
        Selector::File { path } => {
            let mask_path = if path.is_dir() {
                path.join(format!("{}.qptn", layer.name))
            } else if total_layers > 1 {
                return Err(Error::Config(format!(
                    "mask path {} is a single file but the model has {} layers; \
                     pass a directory of per-layer masks",
                    path.display(),
                    total_layers
                )));
            } else {
                path.clone()
            };
            let m = mask::load_mask(&mask_path)?;
            if m.rows() != w.rows() || m.cols() != w.cols() {
                return Err(Error::Shape(format!(
                    "mask {}x{} from {} does not match layer '{}' weights {}x{}",
                    m.rows(),
                    m.cols(),
                    mask_path.display(),
                    layer.name,
                    w.rows(),
                    w.cols()
                )));
            }
            return Ok(m);
        }
    };
    match cfg.pattern {
        SparsityPattern::Unstructured { sparsity } => mask::select_unstructured(&scores, sparsity),
        SparsityPattern::Nm { n, m } => mask::select_nm(&scores, n, m),
    }
}

fn solve_layer_columns(
    cfg: &RunConfig,
    h: &DenseMatrix,
    w: &DenseMatrix,
    mask: &PruneMask,
) -> Result<Vec<ColumnOutcome>> {
    let cols = w.cols();
    let mut outcomes = Vec::with_capacity(cols);
    match (cfg.update, cfg.solver_mode) {
        (UpdateMethod::None, _) => {
            for _ in 0..cols {
                outcomes.push(ColumnOutcome {
                    delta: vec![0.0; w.rows()],
                    iterations: 0,
                    converged: true,
                });
            }
        }
        (UpdateMethod::Qp, SolverMode::Iterative) => {
            let mut start = 0;
            while start < cols {
                let end = (start + cfg.batch_cols).min(cols);
                let batch = build_batch(h, w, mask, start..end)?;
                for r in solve_batch(&batch, &cfg.solver) {
                    outcomes.push(ColumnOutcome {
                        delta: r.delta,
                        iterations: r.iterations,
                        converged: r.status == SolveStatus::Converged,
                    });
                }
                start = end;
            }
        }
        (UpdateMethod::Qp, SolverMode::Direct) => {
            for j in 0..cols {
                let w_col = w.column(j);
                let pruned = mask.pruned_rows(j);
                let reduced = qp::reduce(h, &w_col, &pruned)?;
                match oracle::solve_direct(&reduced) {
                    Ok(free) => outcomes.push(ColumnOutcome {
                        delta: oracle::expand(&free, &w_col, &pruned),
                        iterations: 0,
                        converged: true,
                    }),
                    Err(Error::Singular(_)) => {
                        // fall back to the zeroing point for this column
                        let zeros = vec![0.0f64; reduced.dim];
                        outcomes.push(ColumnOutcome {
                            delta: oracle::expand(&zeros, &w_col, &pruned),
                            iterations: 0,
                            converged: false,
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        (UpdateMethod::BaselineMomentum, _) => {
            for j in 0..cols {
                let w_col = w.column(j);
                let pruned = mask.pruned_rows(j);
                let reduced = qp::reduce(h, &w_col, &pruned)?;
                let free = solve_baseline_momentum(&reduced, &BASELINE_LR_GRID, cfg.baseline_steps);
                let obj = reduced.objective(&free);
                outcomes.push(ColumnOutcome {
                    delta: oracle::expand(&free, &w_col, &pruned),
                    iterations: cfg.baseline_steps,
                    converged: obj.is_finite() && obj <= reduced.const_term,
                });
            }
        }
    }
    Ok(outcomes)
}

/// Runs the full layer-by-layer pruning pass and writes pruned weights, an
/// updated manifest, and `report.json` into the output directory.
pub fn prune_model(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| prune_model_inner(cfg))
        }
        None => prune_model_inner(cfg),
    }
}

fn prune_model_inner(cfg: &RunConfig) -> Result<RunReport> {
    let (manifest, base_dir) = read_manifest(&cfg.manifest_path)?;
    let calibration = read_tensor(&cfg.calibration_path)?;
    if let Some(first) = manifest.layers.first() {
        if calibration.cols() != first.rows {
            return Err(Error::Config(format!(
                "calibration has {} features but layer '{}' expects {}",
                calibration.cols(),
                first.name,
                first.rows
            )));
        }
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let mut guard = OutputGuard::new();
    let mut reports: Vec<LayerReport> = Vec::with_capacity(manifest.layers.len());
    let mut out_layers: Vec<LayerSpec> = Vec::with_capacity(manifest.layers.len());
    let mut x = calibration;

    for layer in &manifest.layers {
        let w = read_tensor(manifest.weight_path(&base_dir, layer))?;
        if w.rows() != layer.rows || w.cols() != layer.cols {
            return Err(Error::Shape(format!(
                "layer '{}' declares {}x{} but weight file holds {}x{}",
                layer.name,
                layer.rows,
                layer.cols,
                w.rows(),
                w.cols()
            )));
        }
        if x.cols() != layer.rows {
            return Err(Error::Shape(format!(
                "activations provide {} features but layer '{}' expects {}",
                x.cols(),
                layer.name,
                layer.rows
            )));
        }

        // Shared Hessian from the current (already-pruned upstream)
        // activations, accumulated per sequence.
        let mut acc = HessianAccumulator::new(layer.rows);
        let chunk = cfg.sequence_len.unwrap_or(x.rows().max(1));
        let mut r = 0;
        while r < x.rows() {
            let end = (r + chunk).min(x.rows());
            let slice = DenseMatrix::new(
                end - r,
                x.cols(),
                x.data()[r * x.cols()..end * x.cols()].to_vec(),
            )?;
            acc.accumulate(&slice)?;
            r = end;
        }
        let h = acc.finalize(cfg.damping)?;

        let layer_mask = select_layer_mask(cfg, layer, &w, &acc, manifest.layers.len())?;

        let y_dense = matmul(&x, &w)?;
        let w_zero = layer_mask.apply(&w)?;
        let y_zero = matmul(&x, &w_zero)?;
        let initial_error = layer_error(&y_dense, &y_zero)?;

        let outcomes = solve_layer_columns(cfg, &h, &w, &layer_mask)?;

        let cols = w.cols();
        let converged = outcomes.iter().filter(|o| o.converged).count();
        let converged_fraction = converged as f64 / cols.max(1) as f64;
        let mut iters: Vec<usize> = outcomes.iter().map(|o| o.iterations).collect();
        iters.sort_unstable();
        let iterations_p50 = percentile(&iters, 0.50);
        let iterations_p95 = percentile(&iters, 0.95);

        // W_hat = M ⊙ (W + ΔW)
        let mut updated = vec![0.0f32; w.rows() * cols];
        for (j, o) in outcomes.iter().enumerate() {
            for i in 0..w.rows() {
                let v = if layer_mask.is_kept(i, j) {
                    (w.get(i, j) as f64 + o.delta[i]) as f32
                } else {
                    0.0
                };
                updated[i * cols + j] = v;
            }
        }
        let w_hat = DenseMatrix::new(w.rows(), cols, updated)?;
        let y_new = matmul(&x, &w_hat)?;
        let final_error = layer_error(&y_dense, &y_new)?;

        let skip_reason = skip_decision(
            cfg.update,
            converged_fraction,
            cfg.skip_threshold,
            final_error,
            initial_error,
        );
        let skipped = skip_reason.is_some();
        let (w_hat, final_error, y_out) = if skipped {
            (w_zero, initial_error, y_zero)
        } else {
            (w_hat, final_error, y_new)
        };

        // Track before writing so a failed write still gets cleaned up.
        let out_file = format!("{}.qptn", layer.name);
        let out_path = cfg.out_dir.join(&out_file);
        guard.track(out_path.clone());
        write_tensor(&out_path, &w_hat)?;
        if cfg.dump_hessian {
            let h_path = cfg.out_dir.join(format!("{}.hessian.qptn", layer.name));
            guard.track(h_path.clone());
            write_tensor(&h_path, &h)?;
        }

        reports.push(LayerReport {
            name: layer.name.clone(),
            initial_error,
            final_error,
            skipped,
            skip_reason,
            converged_fraction,
            iterations_p50,
            iterations_p95,
            sparsity_achieved: layer_mask.sparsity(),
        });
        out_layers.push(LayerSpec {
            name: layer.name.clone(),
            rows: layer.rows,
            cols: layer.cols,
            weight_file: out_file,
            activation: layer.activation,
        });

        // The stored weights' output was already computed for the error
        // metric; propagation reuses it.
        x = apply_activation(y_out, layer.activation);
    }

    let out_manifest = ModelManifest { layers: out_layers };
    let manifest_path = cfg.out_dir.join("model.json");
    guard.track(manifest_path.clone());
    write_manifest(&manifest_path, &out_manifest)?;

    let layers_skipped = reports.iter().filter(|r| r.skipped).count();
    let columns_total: usize = manifest.layers.iter().map(|l| l.cols).sum();
    let overall_converged = if reports.is_empty() {
        1.0
    } else {
        reports
            .iter()
            .zip(manifest.layers.iter())
            .map(|(r, l)| r.converged_fraction * l.cols as f64)
            .sum::<f64>()
            / columns_total.max(1) as f64
    };
    let geometric_mean_ratio = if reports.is_empty() {
        1.0
    } else {
        let log_sum: f64 = reports
            .iter()
            .map(|r| relative_error_ratio(r).value.max(1e-300).ln())
            .sum();
        (log_sum / reports.len() as f64).exp()
    };

    let report = RunReport {
        layers: reports,
        config: cfg.clone(),
        totals: RunTotals {
            layers: manifest.layers.len(),
            layers_skipped,
            geometric_mean_ratio,
            columns_total,
            converged_fraction: overall_converged,
        },
    };

    let report_path = cfg.out_dir.join("report.json");
    guard.track(report_path.clone());
    let file = fs::File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, &report).map_err(|e| Error::Json {
        path: report_path.clone(),
        source: e,
    })?;
    use std::io::Write as _;
    writer
        .write_all(b"\n")
        .map_err(|e| Error::io(&report_path, e))?;
    writer.flush().map_err(|e| Error::io(&report_path, e))?;

    guard.disarm();
    Ok(report)
}

/// Loads a previously written run report.
pub fn read_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
