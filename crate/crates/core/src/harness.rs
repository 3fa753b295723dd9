//! Experiment orchestration: grids over (task, size, noise, method, λ, seed),
//! heldout λ selection, probing, rank aggregation and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collapse::{gram_spectrum, SpectrumRecord};
use crate::data::{inject_label_noise, metric, subsample, Dataset, NoiseConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::{argmax, softmax, Dense, EncoderModel};
use crate::regularize::{RegularizerKind, RegularizerSpec};
use crate::train::{finetune, AdamParams, AdamW, TrainConfig, TrainingRun};

/// Label-noise levels of the robustness sweep.
pub const NOISE_GRID: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.3];
/// Few-sample training sizes; the full desk training set has 2000 points.
pub const SIZE_GRID: [usize; 4] = [250, 500, 1000, 2000];
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// A named regularizer with its λ search grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Method {
    pub name: String,
    pub regularizer: RegularizerSpec,
    /// Defaults to the kind's grid when empty.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
}

impl Method {
    pub fn new(kind: RegularizerKind) -> Self {
        let name = match kind {
            RegularizerKind::None => "std++".to_string(),
            k => k.name().to_string(),
        };
        Self {
            name,
            regularizer: RegularizerSpec::new(kind, 0.0),
            lambda_grid: kind.default_lambda_grid(),
        }
    }

    pub fn baseline() -> Self {
        Self::new(RegularizerKind::None)
    }

    pub fn grid(&self) -> Vec<f64> {
        if self.lambda_grid.is_empty() {
            self.regularizer.kind.default_lambda_grid()
        } else {
            self.lambda_grid.clone()
        }
    }

    pub fn spec(&self, lambda: f64) -> RegularizerSpec {
        RegularizerSpec {
            lambda,
            ..self.regularizer.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub train_size: usize,
    pub noise_p: f64,
    pub lambda: f64,
    /// Dev metric (probe metric for probing records).
    pub metric: f64,
    pub heldout_metric: f64,
    pub failed: bool,
}

impl ExperimentRecord {
    /// Task column used for ranking: one "task" per (task, size, p).
    pub fn group_key(&self) -> String {
        format!("{}|n={}|p={}", self.task, self.train_size, self.noise_p)
    }

    fn sort_key(&self) -> (String, usize, u64, String, u64, u64) {
        (
            self.task.clone(),
            self.train_size,
            self.noise_p.to_bits(),
            self.method.clone(),
            self.lambda.to_bits(),
            self.seed,
        )
    }
}

pub fn sort_records(records: &mut [ExperimentRecord]) {
    records.sort_by_key(|r| r.sort_key());
}

/// One fine-tuning job.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub task: usize,
    pub method: usize,
    pub seed: u64,
    pub train_size: usize,
    pub noise_p: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub seeds: Vec<u64>,
    /// Values at or above the training-set size mean "full".
    pub sizes: Vec<usize>,
    pub noise_ps: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS.to_vec(),
            sizes: vec![SIZE_GRID[3]],
            noise_ps: vec![0.0],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.sizes.is_empty() || self.noise_ps.is_empty() {
            return Err(Error::Config("seeds, sizes and noise_ps must be nonempty".into()));
        }
        for &p in &self.noise_ps {
            NoiseConfig { p, seed: 0 }.validate()?;
        }
        Ok(())
    }
}

/// Noise seed shared by every method for a (task, seed, p) triple.
pub fn noise_seed(task: &str, seed: u64, p: f64) -> u64 {
    let mut h = DefaultHasher::new();
    ("label-noise", task, seed, p.to_bits()).hash(&mut h);
    h.finish()
}

/// Training data of a cell: nested subset for `seed`, then shared label noise.
pub fn cell_dataset(ds: &Dataset, size: usize, p: f64, seed: u64) -> Result<Dataset> {
    let size = size.min(ds.train.len());
    let sub = subsample(ds, size, seed)?;
    if p == 0.0 {
        return Ok(sub);
    }
    inject_label_noise(
        &sub,
        NoiseConfig {
            p,
            seed: noise_seed(&ds.name, seed, p),
        },
    )
}

/// Enumerates the full factorial grid in a fixed order.
pub fn cells(tasks: &[Dataset], methods: &[Method], grid: &GridSpec) -> Vec<Cell> {
    let mut out = Vec::new();
    for (t, ds) in tasks.iter().enumerate() {
        let sizes: BTreeSet<usize> = grid.sizes.iter().map(|&s| s.min(ds.train.len())).collect();
        for &train_size in &sizes {
            for &noise_p in &grid.noise_ps {
                for (m, method) in methods.iter().enumerate() {
                    for lambda in method.grid() {
                        for &seed in &grid.seeds {
                            out.push(Cell {
                                task: t,
                                method: m,
                                seed,
                                train_size,
                                noise_p,
                                lambda,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

fn pool(parallel: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs every cell (at most `parallel` at a time) and maps each finished run
/// through `f`. Results come back in cell order.
pub fn run_cells<T, F>(
    pre: &EncoderModel,
    tasks: &[Dataset],
    methods: &[Method],
    cells: &[Cell],
    template: &TrainConfig,
    parallel: usize,
    f: F,
) -> Result<Vec<(ExperimentRecord, T)>>
where
    T: Send,
    F: Fn(&Cell, &Dataset, &TrainingRun) -> Result<T> + Sync,
{
    let job = |cell: &Cell| -> Result<(ExperimentRecord, T)> {
        let ds = &tasks[cell.task];
        let method = &methods[cell.method];
        let data = cell_dataset(ds, cell.train_size, cell.noise_p, cell.seed)?;
        let cfg = TrainConfig {
            regularizer: method.spec(cell.lambda),
            seed: cell.seed,
            ..template.clone()
        };
        let run = finetune(pre, &data, &cfg)?;
        let extra = f(cell, &data, &run)?;
        let rec = ExperimentRecord {
            task: ds.name.clone(),
            method: method.name.clone(),
            seed: cell.seed,
            train_size: cell.train_size,
            noise_p: cell.noise_p,
            lambda: cell.lambda,
            metric: run.dev_metric,
            heldout_metric: run.heldout_metric,
            failed: run.failed,
        };
        info!(
            "{} n={} p={} {} λ={} seed {}: dev {:.4} heldout {:.4}{}",
            rec.task,
            rec.train_size,
            rec.noise_p,
            rec.method,
            rec.lambda,
            rec.seed,
            rec.metric,
            rec.heldout_metric,
            if rec.failed { " (failed)" } else { "" }
        );
        Ok((rec, extra))
    };
    pool(parallel)?.install(|| cells.par_iter().map(job).collect())
}

/// Full-factorial fine-tuning records, sorted by cell key.
pub fn run_grid(
    pre: &EncoderModel,
    tasks: &[Dataset],
    methods: &[Method],
    grid: &GridSpec,
    template: &TrainConfig,
    parallel: usize,
) -> Result<Vec<ExperimentRecord>> {
    grid.validate()?;
    let cells = cells(tasks, methods, grid);
    let mut records: Vec<ExperimentRecord> =
        run_cells(pre, tasks, methods, &cells, template, parallel, |_, _, _| Ok(()))?
            .into_iter()
            .map(|(r, _)| r)
            .collect();
    sort_records(&mut records);
    Ok(records)
}

pub fn noise_sweep(
    pre: &EncoderModel,
    tasks: &[Dataset],
    methods: &[Method],
    p_grid: &[f64],
    seeds: &[u64],
    train_size: usize,
    template: &TrainConfig,
    parallel: usize,
) -> Result<Vec<ExperimentRecord>> {
    let grid = GridSpec {
        seeds: seeds.to_vec(),
        sizes: vec![train_size],
        noise_ps: p_grid.to_vec(),
    };
    run_grid(pre, tasks, methods, &grid, template, parallel)
}

pub fn size_sweep(
    pre: &EncoderModel,
    tasks: &[Dataset],
    methods: &[Method],
    sizes: &[usize],
    seeds: &[u64],
    template: &TrainConfig,
    parallel: usize,
) -> Result<Vec<ExperimentRecord>> {
    let grid = GridSpec {
        seeds: seeds.to_vec(),
        sizes: sizes.to_vec(),
        noise_ps: vec![0.0],
    };
    run_grid(pre, tasks, methods, &grid, template, parallel)
}

/// λ with the best mean heldout metric over seeds; ties go to the smaller λ.
/// `records` must all belong to one (task, size, p, method) group.
pub fn lambda_select(records: &[ExperimentRecord]) -> Option<f64> {
    let mut by_lambda: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        by_lambda
            .entry(r.lambda.to_bits())
            .or_insert_with(|| (r.lambda, vec![]))
            .1
            .push(r.heldout_metric);
    }
    let mut best: Option<(f64, f64)> = None;
    for (lambda, mut vals) in by_lambda.into_values() {
        vals.sort_by(f64::total_cmp);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        best = match best {
            Some((bl, bm)) if bm > mean || (bm == mean && bl <= lambda) => Some((bl, bm)),
            _ => Some((lambda, mean)),
        };
    }
    best.map(|(l, _)| l)
}

/// Keeps only the records of the heldout-selected λ of every
/// (task, size, p, method) group.
pub fn select_lambdas(records: &[ExperimentRecord]) -> Vec<ExperimentRecord> {
    let mut groups: BTreeMap<(String, String), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.group_key(), r.method.clone()))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for rs in groups.into_values() {
        let owned: Vec<ExperimentRecord> = rs.iter().map(|r| (*r).clone()).collect();
        let best = lambda_select(&owned).expect("nonempty group");
        out.extend(owned.into_iter().filter(|r| r.lambda.to_bits() == best.to_bits()));
    }
    sort_records(&mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Mean over tasks of the seed-averaged metric (tasks with no surviving run skipped).
    pub mean_metric: f64,
    pub average_rank: f64,
    pub runs: usize,
    pub failed_runs: usize,
    pub filtered_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub filtered: bool,
    pub tasks: Vec<String>,
    pub methods: Vec<MethodSummary>,
    /// ranks[t][m] in the order of `tasks` and `methods`.
    pub ranks: Vec<Vec<f64>>,
}

impl RankReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Means closer than this (relative) share a rank.
pub const RANK_TIE_TOL: f64 = 1e-12;

fn tied(a: f64, b: f64) -> bool {
    a == b
        || (a.is_finite() && b.is_finite() && (a - b).abs() <= RANK_TIE_TOL * a.abs().max(b.abs()).max(1.0))
}

/// Average ranks (1 = best) of `values`, higher is better; `None` ranks last,
/// and ties share the mean of their positions.
pub fn average_ranks(values: &[Option<f64>]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let key = |i: usize| values[i].unwrap_or(f64::NEG_INFINITY);
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && tied(key(idx[end]), key(idx[start])) {
            end += 1;
        }
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    ranks
}

/// Seed-averaged metrics ranked per task; with `filter_failed`, failed runs
/// are dropped before averaging and methods left without runs rank last.
pub fn aggregate(records: &[ExperimentRecord], filter_failed: bool) -> RankReport {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let tasks: Vec<String> = sorted
        .iter()
        .map(|r| r.group_key())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let methods: Vec<String> = sorted
        .iter()
        .map(|r| r.method.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut runs = vec![0usize; methods.len()];
    let mut failed = vec![0usize; methods.len()];
    for r in &sorted {
        let m = methods.binary_search(&r.method).expect("collected");
        runs[m] += 1;
        failed[m] += usize::from(r.failed);
        let entry = cells.entry((r.group_key(), r.method.clone())).or_default();
        if !(filter_failed && r.failed) {
            entry.push(r.metric);
        }
    }
    let mut ranks = Vec::with_capacity(tasks.len());
    let mut metric_sums = vec![(0.0, 0usize); methods.len()];
    for t in &tasks {
        let means: Vec<Option<f64>> = methods
            .iter()
            .map(|m| {
                cells
                    .get(&(t.clone(), m.clone()))
                    .filter(|v| !v.is_empty())
                    .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        for (acc, v) in metric_sums.iter_mut().zip(&means) {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
        ranks.push(average_ranks(&means));
    }
    let summaries = methods
        .iter()
        .enumerate()
        .map(|(m, name)| MethodSummary {
            method: name.clone(),
            mean_metric: if metric_sums[m].1 > 0 {
                metric_sums[m].0 / metric_sums[m].1 as f64
            } else {
                f64::NAN
            },
            average_rank: ranks.iter().map(|r| r[m]).sum::<f64>() / ranks.len().max(1) as f64,
            runs: runs[m],
            failed_runs: failed[m],
            filtered_fraction: failed[m] as f64 / runs[m].max(1) as f64,
        })
        .collect();
    RankReport {
        filtered: filter_failed,
        tasks,
        methods: summaries,
        ranks,
    }
}

/// Unfiltered and filtered reports.
pub fn aggregate_both(records: &[ExperimentRecord]) -> (RankReport, RankReport) {
    (aggregate(records, false), aggregate(records, true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Trains a zero-initialized linear head on frozen top-layer
/// representations of `task_b` and returns its dev metric.
pub fn probe(model: &EncoderModel, task_b: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let (_, dev) = probe_metrics(model, task_b, cfg)?;
    Ok(dev)
}

/// (train, dev) metrics of the linear probe.
pub fn probe_metrics(model: &EncoderModel, task_b: &Dataset, cfg: &ProbeConfig) -> Result<(f64, f64)> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("probe batch size must be >= 1".into()));
    }
    let layer = model.num_layers();
    let train = model.representations(&task_b.train.features, layer)?;
    let dev = model.representations(&task_b.dev.features, layer)?;
    let c = task_b.num_classes;
    let mut head = Dense::zeros(train.cols(), c);
    let params = AdamParams {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        ..AdamParams::default()
    };
    params.validate()?;
    let len = head.weight.data().len() + head.bias.len();
    let mask: Vec<bool> = (0..len).map(|i| i >= head.weight.data().len()).collect();
    let mut opt = AdamW::new(params, len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let mut grad = Dense::zeros(train.cols(), c);
            let inv = 1.0 / idx.len() as f64;
            for &i in idx {
                let z = train.row(i);
                let p = softmax(&head.apply(z));
                let y = task_b.train.labels[i];
                let d: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(k, pk)| inv * (pk - if k == y { 1.0 } else { 0.0 }))
                    .collect();
                head.backprop(z, &d, &mut grad);
            }
            let mut theta: Vec<f64> = head.weight.data().iter().chain(&head.bias).copied().collect();
            let g: Vec<f64> = grad.weight.data().iter().chain(&grad.bias).copied().collect();
            opt.step(&mut theta, &g, &mask);
            let (w, b) = theta.split_at(head.weight.data().len());
            head.weight.data_mut().copy_from_slice(w);
            head.bias.copy_from_slice(b);
        }
    }
    let score = |z: &Matrix, labels: &[usize]| {
        let preds: Vec<usize> = z.row_iter().map(|r| argmax(&head.apply(r))).collect();
        metric(&preds, labels, task_b.metric)
    };
    Ok((score(&train, &task_b.train.labels)?, score(&dev, &task_b.dev.labels)?))
}

/// Fine-tunes on `task_a` over the grid, selects λ on heldout, then probes the
/// selected encoders on `task_b`. Probe records carry task "A->B".
pub fn probe_sweep(
    pre: &EncoderModel,
    task_a: &Dataset,
    task_b: &Dataset,
    methods: &[Method],
    grid: &GridSpec,
    template: &TrainConfig,
    probe_cfg: &ProbeConfig,
    parallel: usize,
) -> Result<Vec<ExperimentRecord>> {
    grid.validate()?;
    let tasks = std::slice::from_ref(task_a);
    let cells = cells(tasks, methods, grid);
    let results = run_cells(pre, tasks, methods, &cells, template, parallel, |_, _, run| {
        probe(run.model(), task_b, probe_cfg)
    })?;
    let finetune_records: Vec<ExperimentRecord> = results.iter().map(|(r, _)| r.clone()).collect();
    let selected = select_lambdas(&finetune_records);
    let mut out: Vec<ExperimentRecord> = results
        .into_iter()
        .filter(|(r, _)| selected.contains(r))
        .map(|(r, probe_metric)| ExperimentRecord {
            task: format!("{}->{}", task_a.name, task_b.name),
            metric: probe_metric,
            ..r
        })
        .collect();
    sort_records(&mut out);
    Ok(out)
}

/// Fine-tunes every method over the grid, selects λ on heldout and returns
/// the final-layer dev-set spectra of the selected runs with their records.
pub fn collapse_sweep(
    pre: &EncoderModel,
    tasks: &[Dataset],
    methods: &[Method],
    grid: &GridSpec,
    template: &TrainConfig,
    parallel: usize,
) -> Result<(Vec<ExperimentRecord>, Vec<SpectrumRecord>)> {
    grid.validate()?;
    let cells = cells(tasks, methods, grid);
    let results = run_cells(pre, tasks, methods, &cells, template, parallel, |_, data, run| {
        let model = run.model();
        gram_spectrum(&model.representations(&data.dev.features, model.num_layers())?)
    })?;
    let records: Vec<ExperimentRecord> = results.iter().map(|(r, _)| r.clone()).collect();
    let selected = select_lambdas(&records);
    let mut spectra: Vec<(ExperimentRecord, SpectrumRecord)> = results
        .into_iter()
        .filter(|(r, _)| selected.contains(r))
        .map(|(r, report)| {
            let s = SpectrumRecord {
                method: r.method.clone(),
                task: r.group_key(),
                seed: r.seed,
                report,
            };
            (r, s)
        })
        .collect();
    spectra.sort_by_key(|(r, _)| r.sort_key());
    Ok((selected, spectra.into_iter().map(|(_, s)| s).collect()))
}

pub fn write_records_csv<W: Write>(out: W, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(input: R) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Serialize)]
struct RankRow<'a> {
    filtered: bool,
    method: &'a str,
    mean_metric: f64,
    average_rank: f64,
    runs: usize,
    failed_runs: usize,
    filtered_fraction: f64,
}

/// Both report variants in one table, distinguished by the `filtered` column.
pub fn write_ranks_csv<W: Write>(out: W, reports: &[&RankReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rep in reports {
        for m in &rep.methods {
            w.serialize(RankRow {
                filtered: rep.filtered,
                method: &m.method,
                mean_metric: m.mean_metric,
                average_rank: m.average_rank,
                runs: m.runs,
                failed_runs: m.failed_runs,
                filtered_fraction: m.filtered_fraction,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean normalized eigenvalue per (method, index) over all spectra.
pub fn write_eigen_plotdata<W: Write>(out: W, spectra: &[SpectrumRecord], top: usize) -> Result<()> {
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for s in spectra {
        let e = sums.entry(s.method.as_str()).or_insert_with(|| (vec![0.0; top], 0));
        for (acc, v) in e.0.iter_mut().zip(s.report.normalized_eigenvalues()) {
            *acc += v;
        }
        e.1 += 1;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "index", "normalized_eigenvalue"])?;
    for (method, (vals, n)) in sums {
        for (i, v) in vals.iter().enumerate() {
            w.write_record([method.to_string(), (i + 1).to_string(), (v / n as f64).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean metric per (method, p) curve point.
pub fn write_noise_plotdata<W: Write>(out: W, records: &[ExperimentRecord]) -> Result<()> {
    let mut sums: BTreeMap<(String, u64), (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums
            .entry((r.method.clone(), r.noise_p.to_bits()))
            .or_insert((r.noise_p, 0.0, 0));
        e.1 += r.metric;
        e.2 += 1;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "noise_p", "mean_metric", "runs"])?;
    for ((method, _), (p, sum, n)) in sums {
        w.write_record([method, p.to_string(), (sum / n as f64).to_string(), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_teacher_tasks, TeacherConfig};
    use crate::net::{Activation, EncoderConfig};
    use crate::train::{pretrain, PretrainConfig};

    fn rec(task: &str, method: &str, seed: u64, metric: f64, failed: bool) -> ExperimentRecord {
        ExperimentRecord {
            task: task.into(),
            method: method.into(),
            seed,
            train_size: 100,
            noise_p: 0.0,
            lambda: 0.0,
            metric,
            heldout_metric: metric,
            failed,
        }
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[Some(0.5)]), vec![1.0]);
        assert_eq!(average_ranks(&[Some(0.2), Some(0.9)]), vec![2.0, 1.0]);
        assert_eq!(
            average_ranks(&[Some(0.5), Some(0.7), Some(0.5), None]),
            vec![2.5, 1.0, 2.5, 4.0]
        );
        assert_eq!(average_ranks(&[None, None, Some(0.1)]), vec![2.5, 2.5, 1.0]);
    }

    #[test]
    fn aggregate_examples() {
        let single = vec![rec("a", "m", 0, 0.5, false), rec("b", "m", 0, 0.1, false)];
        let r = aggregate(&single, false);
        assert_eq!(r.method("m").unwrap().average_rank, 1.0);

        let two = vec![
            rec("a", "x", 0, 0.9, false),
            rec("a", "y", 0, 0.8, false),
            rec("b", "x", 0, 0.6, false),
            rec("b", "y", 0, 0.5, false),
        ];
        let r = aggregate(&two, false);
        assert_eq!(r.ranks, vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
    }

    /// Three methods on two tasks, two seeds; one failed run.
    fn fixture() -> Vec<ExperimentRecord> {
        vec![
            rec("t1", "a", 0, 0.80, false),
            rec("t1", "a", 1, 0.90, false),
            rec("t1", "b", 0, 0.70, false),
            rec("t1", "b", 1, 0.50, true),
            rec("t1", "c", 0, 0.85, false),
            rec("t1", "c", 1, 0.85, false),
            rec("t2", "a", 0, 0.60, false),
            rec("t2", "a", 1, 0.60, false),
            rec("t2", "b", 0, 0.65, false),
            rec("t2", "b", 1, 0.55, false),
            rec("t2", "c", 0, 0.70, false),
            rec("t2", "c", 1, 0.70, false),
        ]
    }

    #[test]
    fn fixture_matches_hand_ranks() {
        // Unfiltered means: t1 a .85 b .60 c .85 → ranks 1.5, 3, 1.5
        //                   t2 a .60 b .60 c .70 → ranks 2.5, 2.5, 1
        let r = aggregate(&fixture(), false);
        assert_eq!(r.ranks, vec![vec![1.5, 3.0, 1.5], vec![2.5, 2.5, 1.0]]);
        assert_eq!(r.method("a").unwrap().average_rank, 2.0);
        assert_eq!(r.method("b").unwrap().average_rank, 2.75);
        assert_eq!(r.method("c").unwrap().average_rank, 1.25);
        // Filtered: t1 b = .70 (failed .50 dropped) → still last.
        let f = aggregate(&fixture(), true);
        assert_eq!(f.ranks, vec![vec![1.5, 3.0, 1.5], vec![2.5, 2.5, 1.0]]);
        let b = f.method("b").unwrap();
        assert!((b.mean_metric - (0.70 + 0.60) / 2.0).abs() < 1e-12);
        assert!((r.method("b").unwrap().mean_metric - (0.60 + 0.60) / 2.0).abs() < 1e-12);
        assert_eq!(b.failed_runs, 1);
        assert!((b.filtered_fraction - 0.25).abs() < 1e-15);
    }

    #[test]
    fn all_failed_method_ranks_last() {
        let mut recs = fixture();
        for r in recs.iter_mut().filter(|r| r.method == "c" && r.task == "t1") {
            r.failed = true;
        }
        let f = aggregate(&recs, true);
        assert_eq!(f.ranks[0], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn aggregation_is_order_independent() {
        let recs = fixture();
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(aggregate(&recs, true), aggregate(&rev, true));
        assert_eq!(aggregate(&recs, false), aggregate(&aggregate_input(&recs), false));
    }

    fn aggregate_input(r: &[ExperimentRecord]) -> Vec<ExperimentRecord> {
        let mut v = r.to_vec();
        sort_records(&mut v);
        v
    }

    #[test]
    fn lambda_selection_prefers_smaller_on_ties() {
        let mk = |lambda: f64, seed: u64, h: f64| ExperimentRecord {
            lambda,
            heldout_metric: h,
            ..rec("t", "m", seed, 0.0, false)
        };
        let recs = vec![mk(0.5, 0, 0.8), mk(0.5, 1, 0.6), mk(0.1, 0, 0.7), mk(0.1, 1, 0.7), mk(1.0, 0, 0.6)];
        assert_eq!(lambda_select(&recs), Some(0.1));
        let recs = vec![mk(0.5, 0, 0.9), mk(0.1, 0, 0.7)];
        assert_eq!(lambda_select(&recs), Some(0.5));
        assert_eq!(lambda_select(&[]), None);
        let sel = select_lambdas(&[mk(0.5, 0, 0.9), mk(0.1, 0, 0.7), mk(0.5, 1, 0.9)]);
        assert!(sel.iter().all(|r| r.lambda == 0.5));
        assert_eq!(sel.len(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let recs = fixture();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &recs).unwrap();
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), recs);
        let (a, b) = aggregate_both(&recs);
        let mut buf = Vec::new();
        write_ranks_csv(&mut buf, &[&a, &b]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }

    fn desk() -> (EncoderModel, Dataset, Vec<Dataset>) {
        let tcfg = TeacherConfig {
            input_dim: 6,
            world_dim: 6,
            train: 200,
            dev: 100,
            heldout: 100,
            ..TeacherConfig::default()
        };
        let (main, aux) = gen_teacher_tasks(1, &tcfg, 4).unwrap();
        let mcfg = EncoderConfig {
            input_dim: 6,
            hidden_dim: 8,
            num_layers: 2,
            activation: Activation::Tanh,
            num_classes: 2,
            seed: 1,
        };
        let pcfg = PretrainConfig {
            epochs: 30,
            ..PretrainConfig::default()
        };
        let pre = pretrain(&mcfg, &aux[..2], &pcfg).unwrap();
        (pre, main, aux)
    }

    #[test]
    fn probe_examples() {
        let (pre, _, aux) = desk();
        let cfg = ProbeConfig::default();
        let (train_acc, _) = probe_metrics(&pre, &aux[0], &cfg).unwrap();
        assert!(train_acc >= 0.9, "{train_acc}");
        assert_eq!(probe(&pre, &aux[0], &cfg).unwrap(), probe(&pre, &aux[0], &cfg).unwrap());
        let zero = ProbeConfig { epochs: 0, ..cfg };
        let labels = &aux[0].dev.labels;
        let share0 = labels.iter().filter(|&&l| l == 0).count() as f64 / labels.len() as f64;
        assert_eq!(probe(&pre, &aux[0], &zero).unwrap(), share0);
    }

    #[test]
    fn shared_noise_across_methods() {
        let (_, main, _) = desk();
        let a = cell_dataset(&main, 150, 0.3, 2).unwrap();
        let b = cell_dataset(&main, 150, 0.3, 2).unwrap();
        assert_eq!(a.train.labels, b.train.labels);
        let c = cell_dataset(&main, 150, 0.3, 3).unwrap();
        assert_ne!(a.train.labels, c.train.labels);
        assert_eq!(cell_dataset(&main, 5000, 0.0, 2).unwrap().train, main.train);
    }

    #[test]
    fn grid_runs_are_deterministic_under_parallelism() {
        let (pre, main, _) = desk();
        let methods = vec![Method::baseline(), Method::new(RegularizerKind::CapcortI)];
        let grid = GridSpec {
            seeds: vec![0, 1],
            sizes: vec![100],
            noise_ps: vec![0.0, 0.2],
        };
        let template = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let serial = run_grid(&pre, std::slice::from_ref(&main), &methods, &grid, &template, 1).unwrap();
        let par = run_grid(&pre, std::slice::from_ref(&main), &methods, &grid, &template, 4).unwrap();
        assert_eq!(serial, par);
        // 2 p × (1 + 4 λ) × 2 seeds
        assert_eq!(serial.len(), 20);
        let selected = select_lambdas(&serial);
        assert_eq!(selected.len(), 8);
    }

    #[test]
    fn sweeps_emit_expected_cells() {
        let (pre, main, aux) = desk();
        let methods = vec![Method::baseline()];
        let template = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let recs = noise_sweep(&pre, std::slice::from_ref(&main), &methods, &NOISE_GRID, &[0], 2000, &template, 2).unwrap();
        assert_eq!(recs.len(), 5);
        assert!(recs.iter().all(|r| r.train_size == 200));
        let recs = size_sweep(&pre, std::slice::from_ref(&main), &methods, &[50, 100, 2000], &[0], &template, 2).unwrap();
        let sizes: Vec<usize> = recs.iter().map(|r| r.train_size).collect();
        assert_eq!(sizes, vec![50, 100, 200]);

        let grid = GridSpec {
            seeds: vec![0],
            sizes: vec![100],
            noise_ps: vec![0.0],
        };
        let probes = probe_sweep(&pre, &main, &aux[2], &methods, &grid, &template, &ProbeConfig::default(), 1).unwrap();
        assert_eq!(probes.len(), 1);
        assert!(probes[0].task.contains("->"));
        let (sel, spectra) = collapse_sweep(&pre, std::slice::from_ref(&main), &methods, &grid, &template, 1).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(spectra.len(), 1);
        assert_eq!(spectra[0].report.d, 8);
        let mut buf = Vec::new();
        write_eigen_plotdata(&mut buf, &spectra, 8).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 9);
    }
}
