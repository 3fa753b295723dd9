//! JSON run configuration: dataset source, encoder shape, pretraining,
//! fine-tuning template, methods, grid and probing settings.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_teacher_tasks, load_csv, Dataset, TeacherConfig};
use crate::error::{Error, Result};
use crate::harness::{GridSpec, Method, ProbeConfig, DEFAULT_SEEDS, NOISE_GRID, SIZE_GRID};
use crate::net::{Activation, EncoderConfig, EncoderModel};
use crate::regularize::RegularizerKind;
use crate::train::{pretrain, PretrainConfig, TrainConfig};

/// Training-set size of the few-sample experiments.
pub const FEW_SAMPLE_SIZE: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    Probe,
    NoiseSweep,
    SizeSweep,
    Collapse,
    VerifyTheory,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Probe => "probe",
            Self::NoiseSweep => "noise-sweep",
            Self::SizeSweep => "size-sweep",
            Self::Collapse => "collapse",
            Self::VerifyTheory => "verify-theory",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic teacher tasks: task 0 is fine-tuned, the next `pretrain_tasks`
/// pretrain the encoder and the last one is the probing task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub pretrain_tasks: usize,
    pub teacher: TeacherConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_tasks: 3,
            teacher: TeacherConfig::default(),
        }
    }
}

/// Exactly one of `generator` and `csv`. A CSV task has no pretraining
/// tasks, so its encoder comes from `model.pretrained` or a fresh init.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
    /// Probing task for CSV runs.
    #[serde(default)]
    pub probe_csv: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            generator: Some(GeneratorConfig::default()),
            csv: None,
            probe_csv: None,
        }
    }
}

/// Encoder shape; input width and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Saved encoder JSON used instead of pretraining.
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 3,
            activation: Activation::Tanh,
            seed: 1,
            pretrained: None,
        }
    }
}

/// Grid axes left unset take the per-kind defaults of [`ExperimentConfig::grid`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    /// Subdirectory of the output root; defaults to the kind name.
    pub name: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub sizes: Option<Vec<usize>>,
    pub noise_ps: Option<Vec<f64>>,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn grid(&self, kind: ExperimentKind) -> GridSpec {
        let (sizes, noise_ps) = match kind {
            ExperimentKind::NoiseSweep => (vec![SIZE_GRID[3]], NOISE_GRID.to_vec()),
            ExperimentKind::SizeSweep => (SIZE_GRID.to_vec(), vec![0.0]),
            ExperimentKind::Probe | ExperimentKind::Collapse => (vec![FEW_SAMPLE_SIZE], vec![0.0]),
            ExperimentKind::Train | ExperimentKind::VerifyTheory => (vec![SIZE_GRID[3]], vec![0.0]),
        };
        GridSpec {
            seeds: self.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
            sizes: self.sizes.clone().unwrap_or(sizes),
            noise_ps: self.noise_ps.clone().unwrap_or(noise_ps),
        }
    }
}

/// Sizes of the numerical theory checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub seed: u64,
    pub instances: usize,
    pub mc_samples: usize,
    pub pseudo_tasks: usize,
    pub gd_steps: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 10,
            mc_samples: 200_000,
            pseudo_tasks: 500,
            gd_steps: 10_000,
        }
    }
}

fn default_methods() -> Vec<Method> {
    [
        RegularizerKind::None,
        RegularizerKind::CapcortI,
        RegularizerKind::CapcortMlp,
    ]
    .into_iter()
    .map(Method::new)
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub regularizers: Vec<Method>,
    pub experiment: ExperimentConfig,
    pub probe: ProbeConfig,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig {
                epochs: 30,
                ..PretrainConfig::default()
            },
            train: TrainConfig::default(),
            regularizers: default_methods(),
            experiment: ExperimentConfig::default(),
            probe: ProbeConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

/// Everything an experiment needs after loading data and pretraining.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub pretrained: EncoderModel,
    /// The fine-tuning task.
    pub main: Dataset,
    /// The probing task, when the source provides one.
    pub probe_task: Option<Dataset>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks everything that does not need the data loaded.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match (&d.generator, &d.csv) {
            (Some(g), None) => {
                g.teacher.validate()?;
                if g.pretrain_tasks < 2 && self.model.pretrained.is_none() {
                    return Err(Error::Config(
                        "pretraining needs at least 2 generator tasks".into(),
                    ));
                }
                if d.probe_csv.is_some() {
                    return Err(Error::Config("probe_csv only applies to csv datasets".into()));
                }
            }
            (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "dataset needs exactly one of `generator` and `csv`".into(),
                ))
            }
        }
        if self.model.hidden_dim == 0 || self.model.num_layers == 0 {
            return Err(Error::Config("model needs hidden_dim and num_layers >= 1".into()));
        }
        self.train.optimizer.validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train epochs and batch_size must be >= 1".into()));
        }
        if self.regularizers.is_empty() {
            return Err(Error::Config("at least one regularizer entry is required".into()));
        }
        let mut names: Vec<&str> = self.regularizers.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("regularizer names must be unique".into()));
        }
        for m in &self.regularizers {
            if m.name.is_empty() || m.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid method name `{}`", m.name)));
            }
            for lambda in m.grid() {
                m.spec(lambda).validate(self.model.num_layers)?;
            }
        }
        if self.probe.batch_size == 0 {
            return Err(Error::Config("probe batch_size must be >= 1".into()));
        }
        if let Some(kind) = self.experiment.kind {
            self.experiment.grid(kind).validate()?;
        }
        Ok(())
    }

    pub fn encoder_config(&self, input_dim: usize, num_classes: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dim: self.model.hidden_dim,
            num_layers: self.model.num_layers,
            activation: self.model.activation,
            num_classes,
            seed: self.model.seed,
        }
    }

    /// Loads or generates the tasks and obtains the pretrained encoder.
    pub fn prepare(&self) -> Result<Prepared> {
        let d = &self.dataset;
        let (main, pretrain_tasks, probe_task) = if let Some(g) = &d.generator {
            let (main, mut aux) = gen_teacher_tasks(g.seed, &g.teacher, g.pretrain_tasks + 2)?;
            let probe_task = aux.pop();
            (main, aux, probe_task)
        } else {
            let path = d.csv.as_ref().expect("validated");
            let probe_task = d.probe_csv.as_deref().map(load_csv).transpose()?;
            (load_csv(path)?, Vec::new(), probe_task)
        };
        let model_cfg = self.encoder_config(main.input_dim(), main.num_classes);
        let pretrained = match &self.model.pretrained {
            Some(path) => {
                let m = EncoderModel::load(path)?;
                if m.config.input_dim != main.input_dim() {
                    return Err(Error::Config(format!(
                        "pretrained encoder expects {} inputs, data has {}",
                        m.config.input_dim,
                        main.input_dim()
                    )));
                }
                m
            }
            None if pretrain_tasks.is_empty() => {
                log::warn!("no pretraining tasks or pretrained encoder; starting from a random init");
                EncoderModel::init(model_cfg)?
            }
            None => pretrain(&model_cfg, &pretrain_tasks, &self.pretrain)?,
        };
        Ok(Prepared {
            pretrained,
            main,
            probe_task,
        })
    }
}
