//! Synthetic teacher tasks, CSV ingestion, label noise, nested subsets and
//! classification metrics.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::{argmax, Activation, EncoderConfig, EncoderModel};

pub const DEFAULT_TRAIN: usize = 2000;
pub const DEFAULT_DEV: usize = 500;
pub const DEFAULT_HELDOUT: usize = 500;
/// Task heads putting more than this share of samples in one class are redrawn.
pub const MAX_CLASS_SHARE: f64 = 0.9;
const MAX_HEAD_DRAWS: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Accuracy,
    MacroF1,
    MicroF1,
    Mcc,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::MacroF1 => "macro_f1",
            MetricKind::MicroF1 => "micro_f1",
            MetricKind::Mcc => "mcc",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Dev,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub p: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidParameter(format!(
                "noise probability {} outside [0, 1]",
                self.p
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub metric: MetricKind,
    pub train: Split,
    pub dev: Split,
    pub heldout: Split,
    pub seed: Option<u64>,
    pub noise: Option<NoiseConfig>,
}

/// Provenance summary written next to experiment outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub input_dim: usize,
    pub metric: MetricKind,
    pub train: usize,
    pub dev: usize,
    pub heldout: usize,
    pub seed: Option<u64>,
    pub noise: Option<NoiseConfig>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        train: Split,
        dev: Split,
        heldout: Split,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            num_classes,
            metric: MetricKind::Accuracy,
            train,
            dev,
            heldout,
            seed: None,
            noise: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::InvalidParameter("dataset needs at least one class".into()));
        }
        let dim = self.train.features.cols();
        for (tag, s) in self.splits() {
            if s.is_empty() {
                return Err(Error::InvalidParameter(format!("{tag:?} split is empty")));
            }
            if s.features.cols() != dim {
                return Err(Error::Dimension(format!(
                    "{tag:?} split has {} features, train has {dim}",
                    s.features.cols()
                )));
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::InvalidParameter(format!(
                    "{tag:?} label {bad} not below {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn splits(&self) -> [(SplitTag, &Split); 3] {
        [
            (SplitTag::Train, &self.train),
            (SplitTag::Dev, &self.dev),
            (SplitTag::Heldout, &self.heldout),
        ]
    }

    pub fn split(&self, tag: SplitTag) -> &Split {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Dev => &self.dev,
            SplitTag::Heldout => &self.heldout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.train.features.cols()
    }

    /// Most frequent train label (smallest on ties).
    pub fn majority_class(&self) -> usize {
        majority_class(&self.train.labels, self.num_classes)
    }

    /// Metric of the constant train-majority predictor on `tag`.
    pub fn majority_baseline(&self, tag: SplitTag) -> f64 {
        let s = self.split(tag);
        let preds = vec![self.majority_class(); s.len()];
        metric(&preds, &s.labels, self.metric).expect("equal lengths")
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            num_classes: self.num_classes,
            input_dim: self.input_dim(),
            metric: self.metric,
            train: self.train.len(),
            dev: self.dev.len(),
            heldout: self.heldout.len(),
            seed: self.seed,
            noise: self.noise,
        }
    }
}

pub fn majority_class(labels: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes.max(1)];
    for &l in labels {
        if l >= counts.len() {
            counts.resize(l + 1, 0);
        }
        counts[l] += 1;
    }
    // max_by_key keeps the last maximum; iterate in reverse so ties pick the smallest class.
    counts
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|(_, &c)| c)
        .map(|(k, _)| k)
        .unwrap_or(0)
}

/// Sizes and shapes of the synthetic teacher world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub input_dim: usize,
    pub world_dim: usize,
    pub world_layers: usize,
    pub num_classes: usize,
    pub train: usize,
    pub dev: usize,
    pub heldout: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            world_dim: 16,
            world_layers: 2,
            num_classes: 2,
            train: DEFAULT_TRAIN,
            dev: DEFAULT_DEV,
            heldout: DEFAULT_HELDOUT,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=13).contains(&self.num_classes) {
            return Err(Error::InvalidParameter(format!(
                "teacher tasks need 2..=13 classes, got {}",
                self.num_classes
            )));
        }
        if self.train == 0 || self.dev == 0 || self.heldout == 0 {
            return Err(Error::InvalidParameter("every split needs at least one sample".into()));
        }
        self.world_encoder_config(0).validate()
    }

    fn world_encoder_config(&self, seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.input_dim,
            hidden_dim: self.world_dim,
            num_layers: self.world_layers,
            activation: Activation::Tanh,
            num_classes: self.num_classes,
            seed,
        }
    }
}

/// Frozen random encoder whose features every teacher task is linear in.
#[derive(Clone, Debug)]
pub struct TeacherWorld {
    pub encoder: EncoderModel,
}

impl TeacherWorld {
    pub fn new(cfg: &TeacherConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder: EncoderModel::init(cfg.world_encoder_config(seed))?,
        })
    }

    /// The world used by [`gen_teacher_tasks`] for `seed`.
    pub fn for_tasks(cfg: &TeacherConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, ChaCha8Rng::seed_from_u64(seed).random())
    }

    pub fn features(&self, inputs: &Matrix) -> Result<Matrix> {
        self.encoder.representations(inputs, self.encoder.num_layers())
    }
}

/// Linear teacher head: label = argmax(W f + b).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl TeacherHead {
    /// Gaussian weights; biases center each score on the mean feature.
    pub fn sample<R: Rng + ?Sized>(classes: usize, features: &Matrix, rng: &mut R) -> Self {
        let d = features.cols();
        let weight = Matrix::from_fn(classes, d, |_, _| StandardNormal.sample(rng));
        let n = features.rows().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| features.col(j).iter().sum::<f64>() / n).collect();
        let bias = weight.matvec(&mean).expect("shapes").iter().map(|v| -v).collect();
        Self { weight, bias }
    }

    pub fn label(&self, f: &[f64]) -> usize {
        let mut s = self.weight.matvec(f).expect("shapes");
        for (v, b) in s.iter_mut().zip(&self.bias) {
            *v += b;
        }
        argmax(&s)
    }

    pub fn labels(&self, features: &Matrix) -> Vec<usize> {
        features.row_iter().map(|f| self.label(f)).collect()
    }
}

fn largest_share(labels: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    *counts.iter().max().unwrap_or(&0) as f64 / labels.len().max(1) as f64
}

fn gaussian_inputs<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Generates `num_tasks` tasks over shared inputs: the first is returned as
/// the main task, the rest as auxiliary tasks.
pub fn gen_teacher_tasks(
    seed: u64,
    cfg: &TeacherConfig,
    num_tasks: usize,
) -> Result<(Dataset, Vec<Dataset>)> {
    if num_tasks == 0 {
        return Err(Error::InvalidParameter("need at least one task".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = TeacherWorld::new(cfg, rng.random())?;
    let inputs = [
        gaussian_inputs(cfg.train, cfg.input_dim, &mut rng),
        gaussian_inputs(cfg.dev, cfg.input_dim, &mut rng),
        gaussian_inputs(cfg.heldout, cfg.input_dim, &mut rng),
    ];
    let feats = inputs
        .iter()
        .map(|x| world.features(x))
        .collect::<Result<Vec<_>>>()?;
    let all = feats[0].vstack(&feats[1])?.vstack(&feats[2])?;

    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let head = (0..MAX_HEAD_DRAWS)
            .map(|_| TeacherHead::sample(cfg.num_classes, &feats[0], &mut rng))
            .find(|h| largest_share(&h.labels(&all), cfg.num_classes) <= MAX_CLASS_SHARE)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "no balanced teacher head found in {MAX_HEAD_DRAWS} draws"
                ))
            })?;
        let split = |i: usize| Split::new(inputs[i].clone(), head.labels(&feats[i]));
        let mut ds = Dataset::new(
            format!("teacher{seed}-t{t}"),
            cfg.num_classes,
            split(0)?,
            split(1)?,
            split(2)?,
        )?;
        ds.seed = Some(seed);
        tasks.push(ds);
    }
    let main = tasks.remove(0);
    Ok((main, tasks))
}

/// Replaces each train label with probability p by a uniform draw from the
/// other classes. Features and the dev/heldout splits are untouched.
pub fn inject_label_noise(ds: &Dataset, cfg: NoiseConfig) -> Result<Dataset> {
    cfg.validate()?;
    let c = ds.num_classes;
    if c < 2 {
        return Err(Error::InvalidParameter(format!(
            "label noise needs at least 2 classes, got {c}"
        )));
    }
    let mut out = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for l in &mut out.train.labels {
        // Both draws happen for every sample so the flip pattern depends on p only.
        let u: f64 = rng.random();
        let other = rng.random_range(0..c - 1);
        if u < cfg.p {
            *l = if other >= *l { other + 1 } else { other };
        }
    }
    out.noise = Some(cfg);
    Ok(out)
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// First `n` train samples of a seeded permutation, so smaller subsets are
/// nested in larger ones for the same seed.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let total = ds.train.len();
    if n == 0 || n > total {
        return Err(Error::OutOfRange {
            what: "subsample size",
            value: n,
            min: 1,
            max: total,
        });
    }
    let mut out = ds.clone();
    if n < total {
        let mut idx = permutation(total, seed);
        idx.truncate(n);
        idx.sort_unstable();
        out.train = ds.train.select(&idx);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
struct Confusion {
    /// counts[truth][pred]
    counts: Vec<Vec<usize>>,
    n: usize,
}

impl Confusion {
    fn new(preds: &[usize], labels: &[usize]) -> Self {
        let c = preds.iter().chain(labels).max().map_or(1, |m| m + 1);
        let mut counts = vec![vec![0; c]; c];
        for (&p, &t) in preds.iter().zip(labels) {
            counts[t][p] += 1;
        }
        Self {
            counts,
            n: labels.len(),
        }
    }

    fn classes(&self) -> usize {
        self.counts.len()
    }

    fn true_total(&self, k: usize) -> usize {
        self.counts[k].iter().sum()
    }

    fn pred_total(&self, k: usize) -> usize {
        self.counts.iter().map(|r| r[k]).sum()
    }

    fn correct(&self) -> usize {
        (0..self.classes()).map(|k| self.counts[k][k]).sum()
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

/// Classification metric. Macro-F1 averages over classes that occur in the
/// labels or the predictions; MCC is the multiclass (Gorodkin) form and is 0
/// when undefined.
pub fn metric(preds: &[usize], labels: &[usize], kind: MetricKind) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let cm = Confusion::new(preds, labels);
    let n = cm.n as f64;
    Ok(match kind {
        MetricKind::Accuracy | MetricKind::MicroF1 => cm.correct() as f64 / n,
        MetricKind::MacroF1 => {
            let mut sum = 0.0;
            let mut present = 0;
            for k in 0..cm.classes() {
                let (t, p) = (cm.true_total(k), cm.pred_total(k));
                if t + p == 0 {
                    continue;
                }
                present += 1;
                sum += ratio(2.0 * cm.counts[k][k] as f64, (t + p) as f64);
            }
            sum / present as f64
        }
        MetricKind::Mcc => {
            let c = cm.correct() as f64;
            let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
            for k in 0..cm.classes() {
                let (t, p) = (cm.true_total(k) as f64, cm.pred_total(k) as f64);
                pt += p * t;
                pp += p * p;
                tt += t * t;
            }
            let denom = ((n * n - pp) * (n * n - tt)).sqrt();
            ratio(c * n - pt, denom).clamp(-1.0, 1.0)
        }
    })
}

/// Reads a headed CSV `f0,…,f{d-1},label` into a feature matrix and labels.
pub fn read_csv_rows(path: &Path) -> Result<Split> {
    let parse_err = |row: usize, col: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        col,
        msg,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.len() < 2 || &header[header.len() - 1] != "label" {
        return Err(parse_err(0, header.len(), "last header column must be `label`".into()));
    }
    let d = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(parse_err(row, rec.len(), format!("expected {} columns", d + 1)));
        }
        for col in 0..d {
            let v: f64 = rec[col]
                .trim()
                .parse()
                .map_err(|e| parse_err(row, col, format!("`{}`: {e}", &rec[col])))?;
            if !v.is_finite() {
                return Err(parse_err(row, col, "non-finite feature".into()));
            }
            data.push(v);
        }
        let label: usize = rec[d]
            .trim()
            .parse()
            .map_err(|e| parse_err(row, d, format!("`{}`: {e}", &rec[d])))?;
        labels.push(label);
    }
    Split::new(Matrix::new(labels.len(), d, data)?, labels)
}

/// Loads a CSV dataset and splits it 70/15/15 with a seed-0 permutation.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let all = read_csv_rows(path)?;
    if all.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "{}: need at least 3 rows to form train/dev/heldout splits",
            path.display()
        )));
    }
    let num_classes = all.labels.iter().max().map_or(1, |m| m + 1);
    let n = all.len();
    let n_dev = (n * 15 / 100).max(1);
    let n_held = (n * 15 / 100).max(1);
    let n_train = n - n_dev - n_held;
    let perm = permutation(n, 0);
    let pick = |r: std::ops::Range<usize>| {
        let mut idx = perm[r].to_vec();
        idx.sort_unstable();
        all.select(&idx)
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(
        name,
        num_classes,
        pick(0..n_train),
        pick(n_train..n_train + n_dev),
        pick(n_train + n_dev..n),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::softmax;
    use std::io::Write;

    fn small_cfg() -> TeacherConfig {
        TeacherConfig {
            train: 300,
            dev: 50,
            heldout: 50,
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn generator_is_pure() {
        let a = gen_teacher_tasks(3, &small_cfg(), 3).unwrap();
        let b = gen_teacher_tasks(3, &small_cfg(), 3).unwrap();
        assert_eq!(a, b);
        let c = gen_teacher_tasks(4, &small_cfg(), 3).unwrap();
        assert_ne!(a.0.train.labels, c.0.train.labels);
        assert_eq!(a.1.len(), 2);
        // Shared inputs, different labelings.
        assert_eq!(a.0.train.features, a.1[0].train.features);
        assert_ne!(a.0.train.labels, a.1[0].train.labels);
        assert!(gen_teacher_tasks(3, &small_cfg(), 0).is_err());
    }

    #[test]
    fn identical_heads_give_identical_labels() {
        let cfg = small_cfg();
        let world = TeacherWorld::new(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian_inputs(100, cfg.input_dim, &mut rng);
        let f = world.features(&x).unwrap();
        let head = TeacherHead::sample(2, &f, &mut rng);
        assert_eq!(head.labels(&f), head.clone().labels(&f));
    }

    #[test]
    fn tasks_are_balanced_enough() {
        let cfg = TeacherConfig {
            num_classes: 4,
            ..small_cfg()
        };
        let (main, aux) = gen_teacher_tasks(9, &cfg, 4).unwrap();
        for ds in std::iter::once(&main).chain(&aux) {
            assert!(largest_share(&ds.train.labels, 4) <= MAX_CLASS_SHARE + 0.05);
        }
    }

    /// Softmax regression by full-batch gradient descent.
    fn logistic_fit_accuracy(f: &Matrix, labels: &[usize], classes: usize) -> f64 {
        let x = f.with_constant_column(1.0);
        let d = x.cols();
        let mut w = Matrix::zeros(classes, d);
        let n = x.rows() as f64;
        for _ in 0..3000 {
            let mut g = Matrix::zeros(classes, d);
            for (row, &y) in x.row_iter().zip(labels) {
                let p = softmax(&w.matvec(row).unwrap());
                for k in 0..classes {
                    let r = p[k] - if k == y { 1.0 } else { 0.0 };
                    for j in 0..d {
                        g.set(k, j, g.get(k, j) + r * row[j] / n);
                    }
                }
            }
            w = w.sub(&g.scale(5.0)).unwrap();
        }
        let correct = x
            .row_iter()
            .zip(labels)
            .filter(|(row, &y)| argmax(&w.matvec(row).unwrap()) == y)
            .count();
        correct as f64 / n
    }

    #[test]
    fn teacher_task_is_linearly_separable_in_world_features() {
        let cfg = small_cfg();
        let world = TeacherWorld::for_tasks(&cfg, 2).unwrap();
        let (main, _) = gen_teacher_tasks(2, &cfg, 1).unwrap();
        let f = world.features(&main.train.features).unwrap();
        let acc = logistic_fit_accuracy(&f, &main.train.labels, 2);
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn label_noise_examples() {
        let (ds, _) = gen_teacher_tasks(1, &small_cfg(), 1).unwrap();
        let same = inject_label_noise(&ds, NoiseConfig { p: 0.0, seed: 4 }).unwrap();
        assert_eq!(same.train, ds.train);
        let all = inject_label_noise(&ds, NoiseConfig { p: 1.0, seed: 4 }).unwrap();
        assert!(all.train.labels.iter().zip(&ds.train.labels).all(|(a, b)| a != b));
        assert_eq!(all.train.features, ds.train.features);
        assert_eq!(all.dev, ds.dev);
        assert_eq!(all.heldout, ds.heldout);
        assert!(inject_label_noise(&ds, NoiseConfig { p: 1.5, seed: 4 }).is_err());
        let mut one = ds.clone();
        one.num_classes = 1;
        one.train.labels.iter_mut().for_each(|l| *l = 0);
        assert!(inject_label_noise(&one, NoiseConfig { p: 0.5, seed: 4 }).is_err());
    }

    #[test]
    fn flip_rate_within_binomial_band() {
        let n = 10_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let split = Split::new(Matrix::zeros(n, 1), labels.clone()).unwrap();
        let tiny = Split::new(Matrix::zeros(1, 1), vec![0]).unwrap();
        let ds = Dataset::new("x", 3, split, tiny.clone(), tiny).unwrap();
        let noisy = inject_label_noise(&ds, NoiseConfig { p: 0.3, seed: 11 }).unwrap();
        let flipped = noisy.train.labels.iter().zip(&labels).filter(|(a, b)| a != b).count();
        let frac = flipped as f64 / n as f64;
        assert!((frac - 0.3).abs() <= 0.015, "{frac}");
        // Replacement classes are uniform over the two alternatives.
        let to_next = noisy
            .train
            .labels
            .iter()
            .zip(&labels)
            .filter(|(a, b)| a != b && **a == (**b + 1) % 3)
            .count();
        let share = to_next as f64 / flipped as f64;
        assert!((share - 0.5).abs() < 0.04, "{share}");
    }

    #[test]
    fn subsets_nest() {
        let (ds, _) = gen_teacher_tasks(1, &TeacherConfig::default(), 1).unwrap();
        assert_eq!(subsample(&ds, 2000, 3).unwrap().train, ds.train);
        assert_eq!(subsample(&ds, 500, 3).unwrap(), subsample(&ds, 500, 3).unwrap());
        let rows = |n| {
            let s = subsample(&ds, n, 3).unwrap();
            s.train
                .features
                .row_iter()
                .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<std::collections::HashSet<_>>()
        };
        let (a, b, c) = (rows(250), rows(500), rows(1000));
        assert_eq!(a.len(), 250);
        assert!(a.is_subset(&b) && b.is_subset(&c));
        assert!(subsample(&ds, 2001, 3).is_err());
        assert!(subsample(&ds, 0, 3).is_err());
    }

    #[test]
    fn metric_examples() {
        let y = [0, 1, 0, 1];
        assert_eq!(metric(&y, &y, MetricKind::Accuracy).unwrap(), 1.0);
        assert_eq!(metric(&y, &y, MetricKind::Mcc).unwrap(), 1.0);
        assert_eq!(metric(&[0; 4], &y, MetricKind::Mcc).unwrap(), 0.0);
        assert_eq!(metric(&[1, 0, 1, 0], &y, MetricKind::Mcc).unwrap(), -1.0);
        assert!(metric(&[0], &y, MetricKind::Accuracy).is_err());
        // Constant predictor: class 1 has F1 0, class 0 has 2·2/(4+2).
        let f1 = metric(&[0; 4], &y, MetricKind::MacroF1).unwrap();
        assert!((f1 - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn metric_matches_hand_confusion() {
        let labels = [0, 0, 1, 1, 2, 2];
        let preds = [0, 1, 1, 1, 2, 0];
        // Confusion (truth × pred): [[1,1,0],[0,2,0],[1,0,1]].
        // Per-class F1: 2·1/(2+2)=0.5, 2·2/(2+3)=0.8, 2·1/(2+1)=2/3.
        let macro_f1 = (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
        assert!((metric(&preds, &labels, MetricKind::MacroF1).unwrap() - macro_f1).abs() < 1e-15);
        assert!((metric(&preds, &labels, MetricKind::Accuracy).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!((metric(&preds, &labels, MetricKind::MicroF1).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        // Gorodkin: (c·s − Σ p_k t_k) / sqrt((s² − Σ p_k²)(s² − Σ t_k²)),
        // c = 4, s = 6, p = (2,3,1), t = (2,2,2).
        let num = 4.0 * 6.0 - (2.0 * 2.0 + 3.0 * 2.0 + 1.0 * 2.0);
        let den = ((36.0 - (4.0 + 9.0 + 1.0)) * (36.0f64 - 12.0)).sqrt();
        assert!((metric(&preds, &labels, MetricKind::Mcc).unwrap() - num / den).abs() < 1e-15);
    }

    #[test]
    fn binary_mcc_matches_phi_coefficient() {
        let labels = [1, 1, 1, 0, 0, 0, 1, 0];
        let preds = [1, 0, 1, 0, 1, 0, 1, 0];
        let (tp, tn, fp, fneg) = (3.0, 3.0, 1.0, 1.0);
        let phi = (tp * tn - fp * fneg) / ((tp + fp) * (tp + fneg) * (tn + fp) * (tn + fneg) as f64).sqrt();
        assert!((metric(&preds, &labels, MetricKind::Mcc).unwrap() - phi).abs() < 1e-15);
    }

    #[test]
    fn majority_baseline() {
        let (ds, _) = gen_teacher_tasks(1, &small_cfg(), 1).unwrap();
        let m = ds.majority_class();
        let share = ds.heldout.labels.iter().filter(|&&l| l == m).count() as f64 / 50.0;
        assert!((ds.majority_baseline(SplitTag::Heldout) - share).abs() < 1e-15);
        assert_eq!(majority_class(&[1, 0, 1, 0], 2), 0);
        assert_eq!(majority_class(&[2, 2, 1], 3), 2);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "f0,f1,label").unwrap();
        for i in 0..20 {
            writeln!(f, "{},{},{}", i as f64 * 0.5, -(i as f64), i % 2).unwrap();
        }
        drop(f);
        let ds = load_csv(&path).unwrap();
        assert_eq!((ds.train.len(), ds.dev.len(), ds.heldout.len()), (14, 3, 3));
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.name, "toy");
        let rows = read_csv_rows(&path).unwrap();
        assert_eq!(rows.features.row(3), &[1.5, -3.0]);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "f0,f1,label\n1,2,0\n1,x,1\n").unwrap();
        match read_csv_rows(&bad) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&bad, "f0,f1,label\n1,2,-1\n").unwrap();
        assert!(matches!(read_csv_rows(&bad), Err(Error::Parse { row: 1, col: 2, .. })));
        std::fs::write(&bad, "f0,f1,y\n1,2,1\n").unwrap();
        assert!(matches!(read_csv_rows(&bad), Err(Error::Parse { .. })));
    }

    #[test]
    fn manifest_serializes() {
        let (ds, _) = gen_teacher_tasks(1, &small_cfg(), 1).unwrap();
        let noisy = inject_label_noise(&ds, NoiseConfig { p: 0.1, seed: 2 }).unwrap();
        let json = serde_json::to_string(&noisy.manifest()).unwrap();
        let back: DatasetManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, noisy.manifest());
        assert_eq!(back.noise.unwrap().p, 0.1);
    }
}
