//! The `rcl` command line: experiment subcommands driven by a JSON config,
//! the theory checks and a standalone spectrum tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::collapse::{full_gram_eigenvalues, gm_full, gm_k, gram_spectrum, hm_full, hm_k, normalized_mass, write_spectra_csv};
use crate::config::{ExperimentKind, RunConfig, TheoryConfig};
use crate::error::{Error, Result};
use crate::harness::{
    aggregate_both, collapse_sweep, probe_sweep, run_grid, select_lambdas, write_eigen_plotdata,
    write_noise_plotdata, write_ranks_csv, write_records_csv, ExperimentRecord, RankReport,
};
use crate::matrix::Matrix;
use crate::net::{EncoderConfig, EncoderModel};
use crate::oracle::{closed_form_pseudo_loss, ls_residual_loss, mc_pseudo_loss, min_linear_map_loss, verify_theorem_1};

/// Default output root when neither flag, environment nor config sets one.
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "rcl", version, about = "Representation-consistency fine-tuning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune every method over the λ grid and seeds.
    Train(RunArgs),
    /// Fine-tune on the main task, then probe the encoders on a disjoint task.
    Probe(RunArgs),
    /// Fine-tune under increasing label noise.
    NoiseSweep(RunArgs),
    /// Fine-tune on nested training subsets.
    SizeSweep(RunArgs),
    /// Fine-tune and report final-layer Gram spectra.
    Collapse(RunArgs),
    /// Run the numerical theory checks; exits nonzero on any failure.
    VerifyTheory(RunArgs),
    /// GM-k / HM-k / normalized mass of an N×d embedding CSV.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root directory.
    #[arg(long, env = "RCL_OUTPUT_DIR")]
    pub output: Option<PathBuf>,
    /// Run this single seed instead of the configured seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum number of concurrent fine-tuning runs.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Numeric CSV with one embedding per row; a non-numeric first row is a header.
    pub path: PathBuf,
    #[arg(short, long, value_delimiter = ',', default_value = "5,10,20")]
    pub k: Vec<usize>,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(a) => cmd_experiment(ExperimentKind::Train, &a),
        Command::Probe(a) => cmd_experiment(ExperimentKind::Probe, &a),
        Command::NoiseSweep(a) => cmd_experiment(ExperimentKind::NoiseSweep, &a),
        Command::SizeSweep(a) => cmd_experiment(ExperimentKind::SizeSweep, &a),
        Command::Collapse(a) => cmd_experiment(ExperimentKind::Collapse, &a),
        Command::VerifyTheory(a) => cmd_verify_theory(&a),
        Command::Metrics(a) => cmd_metrics(&a.path, &a.k),
    }
}

fn load_config(args: &RunArgs, kind: ExperimentKind) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cfg.experiment.kind {
        Some(k) if k != kind => {
            return Err(Error::Config(format!(
                "config is for `{k}` but the `{kind}` subcommand was run"
            )))
        }
        _ => cfg.experiment.kind = Some(kind),
    }
    if let Some(seed) = args.seed {
        cfg.experiment.seeds = Some(vec![seed]);
        cfg.theory.seed = seed;
    }
    if args.parallel == 0 {
        return Err(Error::Config("--parallel must be >= 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment_dir(args: &RunArgs, cfg: &RunConfig, kind: ExperimentKind) -> Result<PathBuf> {
    let root = args
        .output
        .clone()
        .or_else(|| cfg.experiment.output.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    let name = cfg.experiment.name.clone().unwrap_or_else(|| kind.name().to_string());
    let dir = root.join(name);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Timestamps live only here so every other artifact is reproducible.
struct Sidecar(fs::File);

impl Sidecar {
    fn open(dir: &Path) -> Result<Self> {
        Ok(Self(fs::OpenOptions::new().create(true).append(true).open(dir.join("run.log"))?))
    }

    fn line(&mut self, msg: &str) -> Result<()> {
        let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        writeln!(self.0, "{t:.3} {msg}")?;
        Ok(())
    }
}

fn path_component(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._+-".contains(c) { c } else { '_' })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// One `<task>/<method>/seed<k>.json` file per (task, method, seed).
fn write_seed_files(dir: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut groups: std::collections::BTreeMap<(String, String, u64), Vec<&ExperimentRecord>> = Default::default();
    for r in records {
        groups.entry((r.task.clone(), r.method.clone(), r.seed)).or_default().push(r);
    }
    for ((task, method, seed), rs) in groups {
        let d = dir.join(path_component(&task)).join(path_component(&method));
        fs::create_dir_all(&d)?;
        write_json(&d.join(format!("seed{seed}.json")), &rs)?;
    }
    Ok(())
}

fn print_summary(report: &RankReport) {
    println!("{:<16} {:>12} {:>10} {:>6} {:>7}", "method", "mean metric", "avg rank", "runs", "failed");
    for m in &report.methods {
        println!(
            "{:<16} {:>12.4} {:>10.3} {:>6} {:>7}",
            m.method, m.mean_metric, m.average_rank, m.runs, m.failed_runs
        );
    }
}

pub fn cmd_experiment(kind: ExperimentKind, args: &RunArgs) -> Result<i32> {
    let cfg = load_config(args, kind)?;
    let dir = experiment_dir(args, &cfg, kind)?;
    let mut sidecar = Sidecar::open(&dir)?;
    sidecar.line(&format!("start {kind}"))?;
    write_json(&dir.join("config.json"), &cfg)?;

    let grid = cfg.experiment.grid(kind);
    grid.validate()?;
    let prepared = cfg.prepare()?;
    prepared.pretrained.save(&dir.join("pretrained.json"))?;
    let pre = &prepared.pretrained;
    let tasks = std::slice::from_ref(&prepared.main);
    let methods = &cfg.regularizers;
    info!("{kind}: {} cells per method and λ", grid.seeds.len() * grid.sizes.len() * grid.noise_ps.len());

    let (all, selected) = match kind {
        ExperimentKind::Probe => {
            let task_b = prepared
                .probe_task
                .as_ref()
                .ok_or_else(|| Error::Config("probing needs a probe task (dataset.probe_csv)".into()))?;
            let recs = probe_sweep(pre, &prepared.main, task_b, methods, &grid, &cfg.train, &cfg.probe, args.parallel)?;
            (recs.clone(), recs)
        }
        ExperimentKind::Collapse => {
            let (recs, spectra) = collapse_sweep(pre, tasks, methods, &grid, &cfg.train, args.parallel)?;
            write_spectra_csv(fs::File::create(dir.join("spectra.csv"))?, &spectra)?;
            fs::create_dir_all(dir.join("plotdata"))?;
            let top = spectra.iter().map(|s| s.report.d).min().unwrap_or(0).min(crate::collapse::CSV_EIGENVALUES);
            write_eigen_plotdata(fs::File::create(dir.join("plotdata").join("eigen.csv"))?, &spectra, top)?;
            let mut gm5: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
            for s in &spectra {
                if let Some(v) = s.report.gm(5) {
                    gm5.entry(s.method.as_str()).or_default().push(v);
                }
            }
            for (method, vals) in gm5 {
                println!("{method:<16} mean GM-5 {:.4} over {} runs", vals.iter().sum::<f64>() / vals.len() as f64, vals.len());
            }
            (recs.clone(), recs)
        }
        ExperimentKind::Train | ExperimentKind::NoiseSweep | ExperimentKind::SizeSweep => {
            let recs = run_grid(pre, tasks, methods, &grid, &cfg.train, args.parallel)?;
            let selected = select_lambdas(&recs);
            (recs, selected)
        }
        ExperimentKind::VerifyTheory => unreachable!("handled by cmd_verify_theory"),
    };
    if kind == ExperimentKind::NoiseSweep {
        fs::create_dir_all(dir.join("plotdata"))?;
        write_noise_plotdata(fs::File::create(dir.join("plotdata").join("noise.csv"))?, &selected)?;
    }
    write_records_csv(fs::File::create(dir.join("records.csv"))?, &all)?;
    let (raw, filtered) = aggregate_both(&selected);
    write_ranks_csv(fs::File::create(dir.join("ranks.csv"))?, &[&raw, &filtered])?;
    write_seed_files(&dir, &all)?;

    print_summary(&filtered);
    let failed = all.iter().filter(|r| r.failed).count();
    if failed > 0 {
        println!("{failed} of {} runs failed (at or below the majority baseline)", all.len());
    }
    println!("wrote {}", dir.display());
    sidecar.line(&format!("done {kind}"))?;
    Ok(0)
}

/// Outcome of one numerical theory check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Worst error in the check's own unit (relative error or |z-score|).
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, errors: &[f64], tolerance: f64) -> Self {
        let worst = errors.iter().copied().fold(0.0, f64::max);
        Self {
            name: name.to_string(),
            instances: errors.len(),
            worst,
            tolerance,
            passed: !errors.is_empty() && errors.iter().all(|e| e.is_finite() && *e <= tolerance),
        }
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Gradient descent on ‖y − Bv‖² from zero with step 0.5 / trace(BᵀB).
fn gd_residual(b: &Matrix, y: &[f64], steps: usize) -> Result<f64> {
    let step = 0.5 / b.gram().trace();
    let mut v = vec![0.0; b.cols()];
    for _ in 0..steps {
        let r: Vec<f64> = b.matvec(&v)?.iter().zip(y).map(|(f, t)| t - f).collect();
        let g = b.tr_matvec(&r)?;
        v.iter_mut().zip(&g).for_each(|(vi, gi)| *vi += 2.0 * step * gi);
    }
    Ok(b.matvec(&v)?.iter().zip(y).map(|(f, t)| (t - f) * (t - f)).sum())
}

/// Equivalences between the pseudo multi-task loss, its closed form and the
/// Gram-spectrum statistics on seeded random instances.
pub fn theory_checks(cfg: &TheoryConfig) -> Result<Vec<CheckResult>> {
    if cfg.instances == 0 {
        return Err(Error::Config("theory.instances must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();

    let mut errs = Vec::new();
    for _ in 0..cfg.instances * 5 {
        let n = rng.random_range(8..=32);
        let pre = gaussian(n, rng.random_range(2..=8), &mut rng);
        let fin = gaussian(n, rng.random_range(2..=8), &mut rng);
        let closed = closed_form_pseudo_loss(&pre, &fin)?;
        let (min_map, _) = min_linear_map_loss(&pre, &fin)?;
        errs.push((min_map - closed).abs() / (1.0 + closed));
    }
    out.push(CheckResult::new("min linear map = closed form", &errs, 1e-8));

    let mut errs = Vec::new();
    for i in 0..cfg.instances {
        let n = rng.random_range(8..=32);
        let pre = gaussian(n, rng.random_range(2..=8), &mut rng);
        let fin = gaussian(n, rng.random_range(2..=8), &mut rng);
        let closed = closed_form_pseudo_loss(&pre, &fin)?;
        let (mean, se) = mc_pseudo_loss(&pre, &fin, cfg.mc_samples, cfg.seed.wrapping_add(i as u64))?;
        errs.push(if se > 0.0 { (mean - closed).abs() / se } else { (mean - closed).abs() });
    }
    out.push(CheckResult::new("Gaussian pseudo-task mean (|z|)", &errs, 3.0));

    let mut errs = Vec::new();
    for _ in 0..cfg.instances {
        let d = rng.random_range(2..=6);
        let b = gaussian(rng.random_range(4 * d..=40), d, &mut rng);
        let y: Vec<f64> = (0..b.rows()).map(|_| StandardNormal.sample(&mut rng)).collect();
        errs.push(rel(ls_residual_loss(&b, &y)?, gd_residual(&b, &y, cfg.gd_steps)?));
    }
    out.push(CheckResult::new("least-squares residual = gradient descent", &errs, 1e-6));

    let mut errs = Vec::new();
    for i in 0..cfg.instances {
        let enc = EncoderConfig {
            input_dim: 6,
            hidden_dim: 5,
            num_layers: 2,
            activation: Default::default(),
            num_classes: 2,
            seed: rng.random(),
        };
        let pre = EncoderModel::init(enc.clone())?;
        let fin = EncoderModel::init(EncoderConfig { seed: rng.random(), ..enc })?;
        let inputs = gaussian(40, 6, &mut rng);
        let rep = verify_theorem_1(&pre, &fin, &inputs, cfg.pseudo_tasks, cfg.seed.wrapping_add(i as u64))?;
        errs.push(rep.z_score().abs());
    }
    out.push(CheckResult::new("multi-task pseudo loss = T x closed form (|z|)", &errs, 3.0));

    let mut errs = Vec::new();
    for _ in 0..cfg.instances {
        let d = rng.random_range(2..=8);
        let z = gaussian(rng.random_range(d + 2..=32), d, &mut rng);
        let report = gram_spectrum(&z)?;
        errs.push(rel(gm_k(&report, d)?, gm_full(&z)?));
        errs.push(rel(hm_k(&report, d)?, hm_full(&z)?));
        let outer = full_gram_eigenvalues(&z)?;
        for (a, b) in report.eigenvalues.iter().zip(&outer) {
            errs.push((a - b).abs() / report.eigenvalues[0]);
        }
    }
    out.push(CheckResult::new("spectral identities", &errs, 1e-8));
    Ok(out)
}

pub fn cmd_verify_theory(args: &RunArgs) -> Result<i32> {
    let cfg = load_config(args, ExperimentKind::VerifyTheory)?;
    let dir = experiment_dir(args, &cfg, ExperimentKind::VerifyTheory)?;
    let mut sidecar = Sidecar::open(&dir)?;
    sidecar.line("start verify-theory")?;
    let checks = theory_checks(&cfg.theory)?;
    println!("{:<48} {:>9} {:>11} {:>9}  result", "check", "instances", "worst", "tolerance");
    for c in &checks {
        println!(
            "{:<48} {:>9} {:>11.3e} {:>9.1e}  {}",
            c.name,
            c.instances,
            c.worst,
            c.tolerance,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    write_json(&dir.join("theory.json"), &checks)?;
    sidecar.line("done verify-theory")?;
    Ok(if checks.iter().all(|c| c.passed) { 0 } else { 1 })
}

/// Reads an N×d numeric CSV. A first row that does not parse is a header.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, (usize, String)> = rec
            .iter()
            .enumerate()
            .map(|(j, f)| f.trim().parse::<f64>().map_err(|e| (j, format!("`{f}`: {e}"))))
            .collect();
        match parsed {
            Ok(row) => {
                if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Parse { path: path.into(), row: i + 1, col: j, msg: "non-finite value".into() });
                }
                rows.push(row);
            }
            Err(_) if i == 0 => continue,
            Err((col, msg)) => return Err(Error::Parse { path: path.into(), row: i + 1, col, msg }),
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse { path: path.into(), row: 0, col: 0, msg: "no numeric rows".into() });
    }
    Matrix::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub k: usize,
    pub gm: f64,
    pub hm: f64,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub d: usize,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues below 1e-10 of the largest.
    pub zero_eigenvalues: usize,
    pub rows: Vec<MetricsRow>,
}

/// Spectrum statistics for every requested k that does not exceed d.
pub fn metrics_report(z: &Matrix, ks: &[usize]) -> Result<MetricsReport> {
    let report = gram_spectrum(z)?;
    let top = report.eigenvalues.first().copied().unwrap_or(0.0);
    let zero_eigenvalues = report.eigenvalues.iter().filter(|&&l| l <= 1e-10 * top).count();
    let mut rows = Vec::new();
    for &k in ks.iter().filter(|&&k| k >= 1 && k <= report.d) {
        rows.push(MetricsRow {
            k,
            gm: gm_k(&report, k)?,
            hm: hm_k(&report, k)?,
            mass: normalized_mass(&report, k)?,
        });
    }
    Ok(MetricsReport {
        n: report.n,
        d: report.d,
        eigenvalues: report.eigenvalues,
        zero_eigenvalues,
        rows,
    })
}

pub fn cmd_metrics(path: &Path, ks: &[usize]) -> Result<i32> {
    let z = read_matrix_csv(path)?;
    let rep = metrics_report(&z, ks)?;
    println!("N = {}, d = {}", rep.n, rep.d);
    let shown: Vec<String> = rep.eigenvalues.iter().take(10).map(|l| format!("{l:.6e}")).collect();
    println!("top eigenvalues: {}", shown.join(" "));
    println!("zero eigenvalues: {}", rep.zero_eigenvalues);
    println!("{:>4} {:>14} {:>14} {:>10}", "k", "GM-k", "HM-k", "mass");
    for r in &rep.rows {
        println!("{:>4} {:>14.6e} {:>14.6e} {:>10.6}", r.k, r.gm, r.hm, r.mass);
    }
    for &k in ks.iter().filter(|&&k| k == 0 || k > rep.d) {
        println!("{k:>4} skipped (k must be in 1..={})", rep.d);
    }
    Ok(0)
}
