//! Command-line front end: pruning runs, synthetic model generation,
//! solver verification, and report printing.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
//! `QPRUNE_THREADS` caps the worker count; it never changes results.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qprune_core::manifest::Activation;
use qprune_core::oracle;
use qprune_core::pipeline::{
    self, read_report, relative_error_ratio, LayerReport, RunConfig, RunReport, Selector,
    SolverMode, SparsityPattern, UpdateMethod,
};
use qprune_core::qp::{self, ColumnProblem, ColumnQpBatch};
use qprune_core::solver::{self, RestartPolicy, SolveStatus, SolverConfig};
use qprune_core::synth;

#[derive(Parser)]
#[command(
    name = "qprune",
    version,
    about = "One-shot post-training pruning with per-column QP weight reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune a model: per-layer Hessian, mask selection, batched column
    /// QP updates, and pruned-activation propagation.
    Prune(PruneArgs),
    /// Generate a synthetic model and correlated calibration data.
    GenSynthetic(GenArgs),
    /// Compare the iterative solver against the closed-form oracle on a
    /// seeded instance grid.
    Verify(VerifyArgs),
    /// Print the per-layer table from a previous run's report.json.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SelectorArg {
    Magnitude,
    Wanda,
    File,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum UpdateArg {
    Qp,
    None,
    BaselineMomentum,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverArg {
    Iterative,
    Direct,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ActivationArg {
    Identity,
    Relu,
}

#[derive(Clone, Copy)]
enum PatternArg {
    Unstructured,
    Nm { n: usize, m: usize },
}

fn parse_pattern(s: &str) -> Result<PatternArg, String> {
    if s.eq_ignore_ascii_case("unstructured") {
        return Ok(PatternArg::Unstructured);
    }
    let (n, m) = s
        .split_once(':')
        .ok_or_else(|| format!("expected 'unstructured' or 'N:M', got '{s}'"))?;
    let n: usize = n.parse().map_err(|_| format!("bad N in '{s}'"))?;
    let m: usize = m.parse().map_err(|_| format!("bad M in '{s}'"))?;
    if n == 0 || n >= m {
        return Err(format!("N:M requires 0 < N < M, got {n}:{m}"));
    }
    Ok(PatternArg::Nm { n, m })
}

fn parse_sparsity(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: '{s}'"))?;
    if !(0.0..1.0).contains(&v) {
        return Err(format!("sparsity must lie in [0, 1), got {v}"));
    }
    Ok(v)
}

fn parse_rho(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: '{s}'"))?;
    if !(0.0..1.0).contains(&v) {
        return Err(format!("correlation must lie in [0, 1), got {v}"));
    }
    Ok(v)
}

fn parse_positive_tol(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: '{s}'"))?;
    if !(v > 0.0) {
        return Err(format!("tolerance must be positive, got {v}"));
    }
    Ok(v)
}

fn parse_restart(s: &str) -> Result<RestartPolicy, String> {
    if s.eq_ignore_ascii_case("adaptive") {
        return Ok(RestartPolicy::Adaptive);
    }
    if let Some(k) = s.strip_prefix("fixed:") {
        let k: usize = k.parse().map_err(|_| format!("bad cycle length in '{s}'"))?;
        if k == 0 {
            return Err("fixed restart cycle must be positive".to_string());
        }
        return Ok(RestartPolicy::Fixed(k));
    }
    Err(format!("expected 'adaptive' or 'fixed:K', got '{s}'"))
}

#[derive(Args)]
struct PruneArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Calibration activations (QPTN, tokens x d_in of the first layer).
    #[arg(long)]
    calib: PathBuf,
    /// Output directory for pruned weights, manifest, and report.json.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of weights pruned per column (unstructured pattern).
    #[arg(long, default_value = "0.5", value_parser = parse_sparsity)]
    sparsity: f64,
    /// 'unstructured' or an 'N:M' group pattern such as 2:4.
    #[arg(long, default_value = "unstructured", value_parser = parse_pattern)]
    pattern: PatternArg,
    #[arg(long, value_enum, default_value_t = SelectorArg::Magnitude)]
    selector: SelectorArg,
    /// Mask file or directory of per-layer masks (requires --selector file).
    #[arg(long, required_if_eq("selector", "file"))]
    mask_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = UpdateArg::Qp)]
    update: UpdateArg,
    /// Sets both solver tolerances.
    #[arg(long, default_value = "0.01", value_parser = parse_positive_tol)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    /// Columns per solver batch.
    #[arg(long, default_value_t = 512)]
    batch_cols: usize,
    /// Hessian damping as a fraction of the mean diagonal.
    #[arg(long, default_value_t = 0.01)]
    damping: f64,
    /// Minimum converged-column fraction below which a layer is skipped.
    #[arg(long, default_value_t = 0.5)]
    skip_threshold: f64,
    #[arg(long, value_enum, default_value_t = SolverArg::Iterative)]
    solver: SolverArg,
    /// 'adaptive' or 'fixed:K'.
    #[arg(long, default_value = "adaptive", value_parser = parse_restart)]
    restart: RestartPolicy,
    /// Rows per calibration sequence for Hessian accumulation.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    seq_len: Option<u64>,
    /// Write each layer's finalized Hessian as QPTN.
    #[arg(long)]
    dump_hessian: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Width of every (square) layer.
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Calibration rows.
    #[arg(long, default_value_t = 4096)]
    rows: usize,
    /// Pairwise feature correlation of the calibration data.
    #[arg(long, default_value = "0.6", value_parser = parse_rho)]
    rho: f64,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    activation: ActivationArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum allowed normalized deviation from the oracle.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Instances per dimension in the grid.
    #[arg(long, default_value = "10", value_parser = clap::value_parser!(u64).range(1..))]
    instances: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Path to a report.json produced by `qprune prune`.
    report: PathBuf,
}

fn threads_from_env() -> Result<Option<usize>, String> {
    match std::env::var("QPRUNE_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| format!("QPRUNE_THREADS must be a positive integer, got '{v}'")),
        Err(_) => Ok(None),
    }
}

fn print_layer_table(layers: &[LayerReport]) {
    println!(
        "{:<16} {:>10} {:>12} {:>10} {:>14} {:>10}",
        "layer", "ratio", "status", "converged", "iters p50/p95", "sparsity"
    );
    for l in layers {
        let ratio = relative_error_ratio(l);
        let status = if l.skipped { "skipped" } else { "updated" };
        println!(
            "{:<16} {:>10.4} {:>12} {:>10.3} {:>8}/{:<5} {:>10.3}",
            l.name,
            ratio.value,
            status,
            l.converged_fraction,
            l.iterations_p50,
            l.iterations_p95,
            l.sparsity_achieved
        );
        if let Some(reason) = &l.skip_reason {
            println!("{:<16} {}", "", reason);
        }
    }
}

fn print_report(report: &RunReport) {
    print_layer_table(&report.layers);
    println!(
        "layers: {} ({} skipped), geometric mean ratio {:.4}, converged fraction {:.3}",
        report.totals.layers,
        report.totals.layers_skipped,
        report.totals.geometric_mean_ratio,
        report.totals.converged_fraction
    );
}

fn cmd_prune(args: PruneArgs) -> Result<(), String> {
    if args.mask_file.is_some() && args.selector != SelectorArg::File {
        // usage inconsistency, not a runtime failure
        let mut cmd = Cli::command();
        cmd.error(
            clap::error::ErrorKind::ArgumentConflict,
            "--mask-file requires --selector file",
        )
        .exit();
    }
    let mut cfg = RunConfig::new(&args.model, &args.calib, &args.out);
    cfg.selector = match args.selector {
        SelectorArg::Magnitude => Selector::Magnitude,
        SelectorArg::Wanda => Selector::Wanda,
        SelectorArg::File => Selector::File {
            path: args.mask_file.expect("enforced by required_if_eq"),
        },
    };
    cfg.pattern = match args.pattern {
        PatternArg::Unstructured => SparsityPattern::Unstructured {
            sparsity: args.sparsity,
        },
        PatternArg::Nm { n, m } => SparsityPattern::Nm { n, m },
    };
    cfg.update = match args.update {
        UpdateArg::Qp => UpdateMethod::Qp,
        UpdateArg::None => UpdateMethod::None,
        UpdateArg::BaselineMomentum => UpdateMethod::BaselineMomentum,
    };
    cfg.solver_mode = match args.solver {
        SolverArg::Iterative => SolverMode::Iterative,
        SolverArg::Direct => SolverMode::Direct,
    };
    cfg.solver = SolverConfig {
        rel_tol: args.tol,
        abs_tol: args.tol,
        max_iters: args.max_iters,
        restart: args.restart,
        ..SolverConfig::default()
    };
    cfg.damping = args.damping;
    cfg.batch_cols = args.batch_cols;
    cfg.skip_threshold = args.skip_threshold;
    cfg.sequence_len = args.seq_len.map(|n| n as usize);
    cfg.dump_hessian = args.dump_hessian;
    cfg.seed = args.seed;
    cfg.threads = threads_from_env()?;

    let report = pipeline::prune_model(&cfg).map_err(|e| e.to_string())?;
    print_report(&report);
    println!("outputs written to {}", args.out.display());
    Ok(())
}

fn cmd_gen_synthetic(args: GenArgs) -> Result<(), String> {
    let activation = match args.activation {
        ActivationArg::Identity => Activation::Identity,
        ActivationArg::Relu => Activation::Relu,
    };
    let gen = synth::generate_model(
        &args.out,
        args.layers,
        args.dim,
        args.rows,
        args.rho,
        activation,
        args.seed,
    )
    .map_err(|e| e.to_string())?;
    println!("manifest:    {}", gen.manifest_path.display());
    println!("calibration: {}", gen.calibration_path.display());
    println!("layers:      {}", gen.weight_paths.len());
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<bool, String> {
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst = 0.0f64;
    let mut worst_desc = String::new();
    let mut total = 0usize;
    for &d in &[8usize, 32, 128] {
        let mut dim_worst = 0.0f64;
        for i in 0..args.instances {
            let cond = 10f64.powf(rng.gen_range(1.0..3.0));
            let (h, w, pruned) = synth::conditioned_instance(&mut rng, d, cond, 0.5);
            let reduced = qp::reduce(&h, &w, &pruned).map_err(|e| e.to_string())?;
            let free = oracle::solve_direct(&reduced).map_err(|e| e.to_string())?;
            let want = oracle::expand(&free, &w, &pruned);

            let problem = ColumnProblem::new(w.clone(), pruned.clone(), 0)
                .map_err(|e| e.to_string())?;
            let batch = ColumnQpBatch {
                hessian: &h,
                columns: vec![problem],
            };
            let got = solver::solve_batch(&batch, &cfg).remove(0);
            let scale = 1.0 + want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let dev = got
                .delta
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
                / scale;
            if dev > worst {
                worst = dev;
                worst_desc = format!(
                    "d={d} instance={i} cond={cond:.1} status={:?} iterations={}",
                    got.status, got.iterations
                );
            }
            dim_worst = dim_worst.max(dev);
            total += 1;
            if got.status != SolveStatus::Converged {
                println!("warning: instance d={d} #{i} did not converge");
            }
        }
        println!("d={d:4}: worst normalized deviation {dim_worst:.3e}");
    }
    println!("max deviation over {total} instances: {worst:.3e} (tolerance {:.3e})", args.tol);
    if worst <= args.tol {
        Ok(true)
    } else {
        println!("worst instance: {worst_desc}");
        Ok(false)
    }
}

fn cmd_report(args: ReportArgs) -> Result<(), String> {
    let report = read_report(&args.report).map_err(|e| e.to_string())?;
    print_report(&report);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prune(args) => cmd_prune(args).map(|()| true),
        Command::GenSynthetic(args) => cmd_gen_synthetic(args).map(|()| true),
        Command::Verify(args) => cmd_verify(args),
        Command::Report(args) => cmd_report(args).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
