//! Run manifests: the JSON document every subcommand is driven by.

use std::fs;
use std::path::{Path, PathBuf};

use mateloc::evaluation::{EvalMode, EvalOptions};
use mateloc::experiment::{Experiment, LabConfig, ModelKind, Protocol};
use mateloc::model::{ModelConfig, Sampling};
use mateloc::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenScenario,
    GenDataset,
    Train,
    Eval,
    Experiment,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenScenario => "gen-scenario",
            Command::GenDataset => "gen-dataset",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Experiment => "experiment",
            Command::Gradcheck => "gradcheck",
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetPaths {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

/// Scene and sample generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateOptions {
    /// Scenario ids of `gen-scenario`; scene `id` is seeded with `seed + id`.
    pub ids: Vec<u32>,
    pub num_antennas: usize,
    pub num_subcarriers: usize,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { ids: vec![1, 2, 3, 4, 5], num_antennas: 8, num_subcarriers: 8, train_samples: 2_000, test_samples: 1_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    /// Random-mode model for the first pass of iterative evaluation.
    pub coarse_checkpoint: Option<PathBuf>,
    /// Defaults to neighborhood mode at `l = 1` for analogical models and
    /// direct mode otherwise.
    pub mode: Option<EvalMode>,
    pub options: EvalOptions,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { checkpoint: None, coarse_checkpoint: None, mode: None, options: EvalOptions::default() }
    }
}

/// A pre-trained model the experiment should use instead of training one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub kind: ModelKind,
    pub train_scenarios: Vec<u32>,
    #[serde(default)]
    pub sampling: Sampling,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub lab: LabConfig,
    /// Protocol overrides; a protocol not listed runs with its defaults.
    pub protocols: Vec<Experiment>,
    pub checkpoints: Vec<ModelEntry>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { lab: LabConfig::default(), protocols: Vec::new(), checkpoints: Vec::new() }
    }
}

impl ExperimentSection {
    pub fn experiment(&self, name: &str) -> Result<Experiment, CliError> {
        if let Some(e) = self.protocols.iter().find(|e| e.protocol.name() == name) {
            return Ok(e.clone());
        }
        let protocol = Protocol::named(name).map_err(|_| {
            CliError::Usage(format!("unknown experiment {name:?}; expected one of {}", Protocol::NAMES.join(", ")))
        })?;
        let models = match protocol {
            Protocol::SingleScenario { .. } => {
                vec![ModelKind::Mateformer, ModelKind::Icl, ModelKind::D2lRaw, ModelKind::D2lAd]
            }
            Protocol::NeighborSweep { .. }
            | Protocol::InitialErrorSweep { .. }
            | Protocol::SamplingModes { .. } => vec![ModelKind::Mateformer],
            _ => vec![ModelKind::Mateformer, ModelKind::D2lRaw],
        };
        Ok(Experiment::new(protocol, models))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    /// Models to check; empty means the desk Mateformer, ICL and d2l models.
    pub models: Vec<ModelConfig>,
    pub probes: usize,
    pub groups: usize,
    pub samples: usize,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection { models: Vec::new(), probes: 20, groups: 2, samples: 300, tolerance: 1e-4 }
    }
}

/// Everything one run needs. `seed` is mandatory and overrides the seeds of
/// the train, eval and experiment sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: Command,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Scenario spec files.
    #[serde(default)]
    pub scenarios: Vec<PathBuf>,
    #[serde(default)]
    pub datasets: DatasetPaths,
    #[serde(default)]
    pub generate: GenerateOptions,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

impl RunManifest {
    /// Copies `seed` into every section that carries its own.
    pub fn resolve(&mut self) {
        self.train.seed = self.seed;
        self.eval.options.seed = self.seed;
        let lab = &mut self.experiment.lab;
        lab.data_seed = self.seed;
        lab.analogy_train.seed = self.seed;
        lab.d2l_train.seed = self.seed;
        lab.fine_tune.seed = self.seed;
        lab.eval.seed = self.seed;
    }

    /// Paths are resolved against `base` (the manifest's directory).
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.scenarios.iter_mut().for_each(fix);
        self.datasets.train.iter_mut().for_each(fix);
        self.datasets.test.iter_mut().for_each(fix);
        self.eval.checkpoint.iter_mut().for_each(fix);
        self.eval.coarse_checkpoint.iter_mut().for_each(fix);
        self.experiment.checkpoints.iter_mut().for_each(|c| fix(&mut c.checkpoint));
    }

    /// Fails on the first referenced input that does not exist.
    pub fn check_inputs(&self) -> Result<(), CliError> {
        let mut inputs: Vec<&PathBuf> = Vec::new();
        inputs.extend(&self.scenarios);
        inputs.extend(&self.datasets.train);
        inputs.extend(&self.datasets.test);
        let checkpoints = self.eval.checkpoint.iter().chain(&self.eval.coarse_checkpoint);
        let checkpoints = checkpoints.chain(self.experiment.checkpoints.iter().map(|c| &c.checkpoint));
        for c in checkpoints {
            let manifest = c.with_extension("json");
            if !manifest.exists() {
                return Err(mateloc::Error::MissingArtifact(manifest).into());
            }
        }
        match inputs.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(mateloc::Error::MissingArtifact(p.clone()).into()),
            None => Ok(()),
        }
    }
}

/// Parses and validates a manifest document. Errors name the offending key.
pub fn parse_manifest(text: &str) -> Result<RunManifest, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut m: RunManifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config { key: if path == "." { String::new() } else { path }, message: e.inner().to_string() }
    })?;
    m.resolve();
    validate(&m)?;
    Ok(m)
}

/// Reads a manifest file; relative paths inside it are taken relative to
/// the file's directory.
pub fn parse_config(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut m = parse_manifest(&text)?;
    m.rebase(path.parent().unwrap_or(Path::new("")));
    Ok(m)
}

fn validate(m: &RunManifest) -> Result<(), CliError> {
    let core = |e: mateloc::Error| match e {
        mateloc::Error::Config { key, message } => CliError::Config { key, message },
        other => CliError::Config { key: String::new(), message: other.to_string() },
    };
    let prefixed = |section: &str, e: mateloc::Error| match core(e) {
        CliError::Config { key, message } => CliError::Config { key: format!("{section}.{key}"), message },
        other => other,
    };
    m.train.validate().map_err(|e| prefixed("train", e))?;
    m.experiment.lab.analogy_train.validate().map_err(|e| prefixed("experiment.lab.analogy_train", e))?;
    m.experiment.lab.d2l_train.validate().map_err(|e| prefixed("experiment.lab.d2l_train", e))?;
    if let Some(c) = &m.model {
        c.validate().map_err(|e| CliError::Config { key: "model".into(), message: e.to_string() })?;
    }
    let need = |ok: bool, key: &str, message: &str| {
        if ok {
            Ok(())
        } else {
            Err(CliError::Config { key: key.into(), message: message.into() })
        }
    };
    match m.command {
        Command::GenScenario => need(!m.generate.ids.is_empty(), "generate.ids", "needs at least one scenario id"),
        Command::GenDataset => need(!m.scenarios.is_empty(), "scenarios", "needs at least one scenario spec path"),
        Command::Train => {
            need(m.model.is_some(), "model", "train needs a model config")?;
            need(!m.datasets.train.is_empty(), "datasets.train", "train needs at least one training dataset")
        }
        Command::Eval => {
            need(m.eval.checkpoint.is_some(), "eval.checkpoint", "eval needs a checkpoint")?;
            need(m.datasets.train.len() == 1, "datasets.train", "eval needs exactly one reference dataset")?;
            need(m.datasets.test.len() == 1, "datasets.test", "eval needs exactly one test dataset")
        }
        Command::Experiment => need(
            m.datasets.train.len() == m.datasets.test.len(),
            "datasets",
            "experiment datasets need one test set per training set",
        ),
        Command::Gradcheck => need(m.gradcheck.probes > 0, "gradcheck.probes", "must be ≥ 1"),
    }
}
