//! Experiment protocols: single-scenario accuracy, cross-scenario reuse,
//! transfer curves, joint training with a held-out scenario, and the
//! neighbor-count, noise, initial-error and sampling-mode studies.
//!
//! A [`Lab`] owns the scenario data and trains each (model, training
//! scenarios, sampling) combination at most once, so several protocols can
//! share models.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{D2lConfig, IclConfig, InputMode};
use crate::channel::ScenarioSpec;
use crate::dataset::{generate_dataset, Dataset, Role};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, evaluate_with, EvalMode, EvalOptions, EvalResult};
use crate::mateformer::MateformerConfig;
use crate::model::{Model, ModelConfig, ReferencePool, Sampling};
use crate::training::{fine_tune, train, CsiAugment, MetricLog, Probe, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mateformer,
    Icl,
    D2lRaw,
    D2lAd,
}

impl ModelKind {
    pub fn is_analogical(self) -> bool {
        matches!(self, ModelKind::Mateformer | ModelKind::Icl)
    }
}

fn default_models() -> Vec<ModelKind> {
    vec![ModelKind::Mateformer, ModelKind::D2lRaw]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub scenarios: Vec<ScenarioSpec>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub data_seed: u64,
    pub mateformer: MateformerConfig,
    pub d2l_hidden: Vec<usize>,
    /// Training for analogical models (Mateformer, ICL).
    pub analogy_train: TrainConfig,
    pub d2l_train: TrainConfig,
    /// Steps, rate and logging of transfer fine-tuning; `sampling` and the
    /// analogy ranges are taken from the source model's training config.
    pub fine_tune: TrainConfig,
    pub eval: EvalOptions,
    /// Coarse-location error `l` of neighborhood-mode evaluation, meters.
    pub coarse_error: f64,
    /// Random-mode reference count; 0 means `eval.neighbors`.
    pub random_k: usize,
    /// Neighborhood passes after the random pass in iterative mode.
    pub iterative_passes: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        let analogy_train = TrainConfig { batch_size: 16, augment: Some(CsiAugment::default()), ..TrainConfig::default() };
        let d2l_train = TrainConfig::default();
        let fine_tune = TrainConfig { steps: 4_000, learning_rate: 2e-4, log_every: 500, ..analogy_train.clone() };
        LabConfig {
            scenarios: ScenarioSpec::desk_family(),
            train_samples: 2_000,
            test_samples: 1_000,
            data_seed: 7,
            mateformer: MateformerConfig {
                depth: 3,
                d_model: 32,
                d_ff: 32,
                location_scale: 10.0,
                ..MateformerConfig::desk(8, 8)
            },
            d2l_hidden: vec![256, 256, 128],
            analogy_train,
            d2l_train,
            fine_tune,
            eval: EvalOptions::default(),
            coarse_error: 1.0,
            random_k: 0,
            iterative_passes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Protocol {
    SingleScenario { scenario: u32 },
    CrossScenario { train: u32, eval: u32 },
    Transfer { source: u32, target: u32 },
    Joint { train: Vec<u32>, held_out: u32 },
    NeighborSweep { scenario: u32, values: Vec<usize> },
    NoiseSweep { scenario: u32, values: Vec<f64> },
    InitialErrorSweep { scenario: u32, values: Vec<f64> },
    SamplingModes { scenario: u32 },
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::SingleScenario { .. } => "single-scenario",
            Protocol::CrossScenario { .. } => "cross-scenario",
            Protocol::Transfer { .. } => "transfer",
            Protocol::Joint { .. } => "joint",
            Protocol::NeighborSweep { .. } => "neighbor-sweep",
            Protocol::NoiseSweep { .. } => "noise-sweep",
            Protocol::InitialErrorSweep { .. } => "initial-error-sweep",
            Protocol::SamplingModes { .. } => "sampling-modes",
        }
    }

    /// The protocol with its default scenarios and sweep grid.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "single-scenario" => Protocol::SingleScenario { scenario: 1 },
            "cross-scenario" => Protocol::CrossScenario { train: 1, eval: 2 },
            "transfer" => Protocol::Transfer { source: 1, target: 2 },
            "joint" => Protocol::Joint { train: vec![1, 2, 4, 5], held_out: 3 },
            "neighbor-sweep" => Protocol::NeighborSweep { scenario: 1, values: vec![4, 8, 16, 32] },
            "noise-sweep" => Protocol::NoiseSweep { scenario: 1, values: vec![0.0, 0.05, 0.1, 0.2, 0.4] },
            "initial-error-sweep" => {
                Protocol::InitialErrorSweep { scenario: 1, values: vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0] }
            }
            "sampling-modes" => Protocol::SamplingModes { scenario: 1 },
            other => {
                return Err(Error::Config {
                    key: "experiment".into(),
                    message: format!("unknown experiment {other:?}"),
                })
            }
        })
    }

    pub const NAMES: [&'static str; 8] = [
        "single-scenario",
        "cross-scenario",
        "transfer",
        "joint",
        "neighbor-sweep",
        "noise-sweep",
        "initial-error-sweep",
        "sampling-modes",
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    #[serde(flatten)]
    pub protocol: Protocol,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
}

impl Experiment {
    pub fn new(protocol: Protocol, models: Vec<ModelKind>) -> Self {
        Experiment { protocol, models }
    }
}

/// One line of a result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    pub train_scenarios: String,
    pub eval_scenario: u32,
    pub mode: String,
    pub sweep_param: String,
    pub sweep_value: String,
    pub mean_m: f64,
    pub p10_m: f64,
    pub p90_m: f64,
    pub count: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub const CSV_HEADER: &str =
    "experiment,model,train_scenarios,eval_scenario,mode,sweep_param,sweep_value,mean_m,p10_m,p90_m,count,seed,config_hash";

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.experiment,
            r.model,
            r.train_scenarios,
            r.eval_scenario,
            r.mode,
            r.sweep_param,
            r.sweep_value,
            r.mean_m,
            r.p10_m,
            r.p90_m,
            r.count,
            r.seed,
            r.config_hash
        );
    }
    s
}

pub fn mode_label(mode: &EvalMode) -> String {
    match mode {
        EvalMode::Direct => "direct".into(),
        EvalMode::Neighborhood { l } => format!("neighborhood(l={l})"),
        EvalMode::Random { k } => format!("random(k={k})"),
        EvalMode::Iterative { k, passes } => format!("iterative(k={k};passes={passes})"),
    }
}

fn scenario_list(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join("+")
}

/// Short SHA-256 of a value's JSON form.
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&json)[..8]))
}

/// Generation seeds of a scenario's training and test sets.
pub fn dataset_seeds(data_seed: u64, scenario: u32) -> (u64, u64) {
    let base = data_seed.wrapping_mul(1_000_003).wrapping_add(u64::from(scenario) * 2);
    (base, base.wrapping_add(1))
}

type ModelKey = (ModelKind, Vec<u32>, Sampling);

pub struct Lab {
    config: LabConfig,
    pools: BTreeMap<u32, ReferencePool>,
    tests: BTreeMap<u32, Dataset>,
    models: HashMap<ModelKey, Model>,
    /// Metric logs of every training and fine-tuning run, by label.
    pub logs: Vec<(String, MetricLog)>,
}

impl Lab {
    /// Generates every scenario's training and test sets.
    pub fn generate(config: LabConfig) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in &config.scenarios {
            let (train_seed, test_seed) = dataset_seeds(config.data_seed, s.id);
            train.push(generate_dataset(s, config.train_samples, Role::Training, train_seed)?);
            test.push(generate_dataset(s, config.test_samples, Role::Testing, test_seed)?);
        }
        Self::from_datasets(config, train, test)
    }

    pub fn from_datasets(config: LabConfig, train: Vec<Dataset>, test: Vec<Dataset>) -> Result<Self> {
        let mut pools = BTreeMap::new();
        for d in train {
            if d.role != Role::Training {
                return Err(Error::pre(format!("scenario {} training set is tagged {:?}", d.id(), d.role)));
            }
            pools.insert(d.id(), ReferencePool::new(d)?);
        }
        let tests: BTreeMap<u32, Dataset> = test.into_iter().map(|d| (d.id(), d)).collect();
        Ok(Lab { config, pools, tests, models: HashMap::new(), logs: Vec::new() })
    }

    pub fn config(&self) -> &LabConfig {
        &self.config
    }

    pub fn pool(&self, id: u32) -> Result<&ReferencePool> {
        self.pools.get(&id).ok_or(Error::UnknownScenario(id))
    }

    pub fn test(&self, id: u32) -> Result<&Dataset> {
        self.tests.get(&id).ok_or(Error::UnknownScenario(id))
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        let m = &self.config.mateformer;
        let d2l = |input| {
            ModelConfig::D2l(D2lConfig {
                hidden: self.config.d2l_hidden.clone(),
                input,
                num_antennas: m.num_antennas,
                num_subcarriers: m.num_subcarriers,
            })
        };
        match kind {
            ModelKind::Mateformer => ModelConfig::Mateformer(m.clone()),
            ModelKind::Icl => ModelConfig::Icl(IclConfig::matching(m, self.config.analogy_train.neighbors)),
            ModelKind::D2lRaw => d2l(InputMode::Raw),
            ModelKind::D2lAd => d2l(InputMode::AngleDelay),
        }
    }

    fn train_config(&self, kind: ModelKind, sampling: Sampling) -> TrainConfig {
        if kind.is_analogical() {
            TrainConfig { sampling, ..self.config.analogy_train.clone() }
        } else {
            self.config.d2l_train.clone()
        }
    }

    /// Registers an externally trained model (e.g. a loaded checkpoint).
    pub fn insert_model(&mut self, kind: ModelKind, train: &[u32], sampling: Sampling, model: Model) {
        self.models.insert((kind, train.to_vec(), sampling), model);
    }

    /// The model of `kind` trained on `train`, training it on first use.
    pub fn model(&mut self, kind: ModelKind, train: &[u32], sampling: Sampling) -> Result<Model> {
        let key = (kind, train.to_vec(), sampling);
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let config = self.model_config(kind);
        let cfg = self.train_config(kind, sampling);
        let pools = train.iter().map(|&id| self.pool(id)).collect::<Result<Vec<_>>>()?;
        let (model, log) = train_model(&config, &cfg, &pools)?;
        let label = format!("{}-{}-{:?}", config.name(), scenario_list(train), sampling).to_lowercase();
        log::info!("trained {label}");
        self.logs.push((label, log));
        self.models.insert(key, model.clone());
        Ok(model)
    }

    pub fn default_mode(&self, kind: ModelKind) -> EvalMode {
        if kind.is_analogical() {
            EvalMode::Neighborhood { l: self.config.coarse_error }
        } else {
            EvalMode::Direct
        }
    }

    fn random_k(&self) -> usize {
        if self.config.random_k == 0 {
            self.config.eval.neighbors
        } else {
            self.config.random_k
        }
    }

    pub fn evaluate(&self, model: &Model, scenario: u32, mode: EvalMode, opts: &EvalOptions) -> Result<EvalResult> {
        evaluate(model, self.pool(scenario)?, self.test(scenario)?.samples(), mode, opts)
    }

    /// Runs one experiment and returns its result rows.
    pub fn run(&mut self, exp: &Experiment) -> Result<Vec<ResultRow>> {
        let hash = config_hash(&(&self.config, exp))?;
        let seed = self.config.analogy_train.seed;
        let name = exp.protocol.name();
        let opts = self.config.eval;
        let mut rows = Vec::new();
        let mut push = |model: &str, train: &[u32], eval: u32, mode: &EvalMode, sweep: (&str, String), r: &EvalResult| {
            rows.push(ResultRow {
                experiment: name.to_string(),
                model: model.to_string(),
                train_scenarios: scenario_list(train),
                eval_scenario: eval,
                mode: mode_label(mode),
                sweep_param: sweep.0.to_string(),
                sweep_value: sweep.1,
                mean_m: r.summary.mean,
                p10_m: r.summary.p10,
                p90_m: r.summary.p90,
                count: r.summary.count,
                seed,
                config_hash: hash.clone(),
            });
        };
        let none = || ("", String::new());

        match &exp.protocol {
            Protocol::SingleScenario { scenario } => {
                for &kind in &exp.models {
                    let m = self.model(kind, &[*scenario], Sampling::Neighborhood)?;
                    let mode = self.default_mode(kind);
                    let r = self.evaluate(&m, *scenario, mode, &opts)?;
                    push(m.name(), &[*scenario], *scenario, &mode, none(), &r);
                }
            }
            Protocol::CrossScenario { train, eval } => {
                for &kind in &exp.models {
                    let m = self.model(kind, &[*train], Sampling::Neighborhood)?;
                    let mode = self.default_mode(kind);
                    for s in [*train, *eval] {
                        let r = self.evaluate(&m, s, mode, &opts)?;
                        push(m.name(), &[*train], s, &mode, none(), &r);
                    }
                }
            }
            Protocol::Transfer { source, target } => {
                for &kind in &exp.models {
                    let src = self.model(kind, &[*source], Sampling::Neighborhood)?;
                    let mode = self.default_mode(kind);
                    let cfg = TrainConfig {
                        steps: self.config.fine_tune.steps,
                        learning_rate: self.config.fine_tune.learning_rate,
                        schedule: self.config.fine_tune.schedule,
                        log_every: self.config.fine_tune.log_every,
                        seed: self.config.fine_tune.seed,
                        ..self.train_config(kind, Sampling::Neighborhood)
                    };
                    let probes = [
                        Probe { reference: self.pool(*source)?, test: self.test(*source)?.samples(), mode, options: opts },
                        Probe { reference: self.pool(*target)?, test: self.test(*target)?.samples(), mode, options: opts },
                    ];
                    let (_, log) = fine_tune(&src, &cfg, &[self.pool(*target)?], &probes, &[])?;
                    for row in &log.rows {
                        for (i, s) in [*source, *target].into_iter().enumerate() {
                            let r = self.evaluate_logged(row.evals[i].1);
                            push(src.name(), &[*source, *target], s, &mode, ("fine_tune_step", row.step.to_string()), &r);
                        }
                    }
                    let label = format!("{}-transfer-{source}-{target}", src.name());
                    self.logs.push((label, log));
                }
            }
            Protocol::Joint { train, held_out } => {
                for &kind in &exp.models {
                    let joint = self.model(kind, train, Sampling::Neighborhood)?;
                    let single = self.model(kind, &[*held_out], Sampling::Neighborhood)?;
                    let mode = self.default_mode(kind);
                    for (m, t) in [(&joint, train.as_slice()), (&single, std::slice::from_ref(held_out))] {
                        let r = self.evaluate(m, *held_out, mode, &opts)?;
                        push(m.name(), t, *held_out, &mode, none(), &r);
                    }
                }
            }
            Protocol::NeighborSweep { scenario, values } => {
                for &kind in exp.models.iter().filter(|k| k.is_analogical()) {
                    let m = self.model(kind, &[*scenario], Sampling::Neighborhood)?;
                    let mode = self.default_mode(kind);
                    for &n in values {
                        let o = EvalOptions { neighbors: n, ..opts };
                        let r = self.evaluate(&m, *scenario, mode, &o)?;
                        push(m.name(), &[*scenario], *scenario, &mode, ("neighbors", n.to_string()), &r);
                    }
                }
            }
            Protocol::NoiseSweep { scenario, values } => {
                for &kind in &exp.models {
                    let m = self.model(kind, &[*scenario], Sampling::Neighborhood)?;
                    let mode = self.default_mode(kind);
                    for &sigma in values {
                        let o = EvalOptions { noise_sigma: sigma, ..opts };
                        let r = self.evaluate(&m, *scenario, mode, &o)?;
                        push(m.name(), &[*scenario], *scenario, &mode, ("noise_sigma", sigma.to_string()), &r);
                    }
                }
            }
            Protocol::InitialErrorSweep { scenario, values } => {
                for &kind in exp.models.iter().filter(|k| k.is_analogical()) {
                    let m = self.model(kind, &[*scenario], Sampling::Neighborhood)?;
                    for &l in values {
                        let mode = EvalMode::Neighborhood { l };
                        let r = self.evaluate(&m, *scenario, mode, &opts)?;
                        push(m.name(), &[*scenario], *scenario, &mode, ("initial_error_m", l.to_string()), &r);
                    }
                }
            }
            Protocol::SamplingModes { scenario } => {
                let k = self.random_k();
                let passes = self.config.iterative_passes;
                for &kind in exp.models.iter().filter(|k| k.is_analogical()) {
                    let near = self.model(kind, &[*scenario], Sampling::Neighborhood)?;
                    let random = self.model(kind, &[*scenario], Sampling::Random)?;
                    let pool = self.pool(*scenario)?;
                    let test = self.test(*scenario)?.samples();
                    let modes = [
                        (&near, &near, EvalMode::Neighborhood { l: self.config.coarse_error }),
                        (&random, &random, EvalMode::Random { k }),
                        (&random, &near, EvalMode::Iterative { k, passes }),
                    ];
                    for (first, m, mode) in modes {
                        let r = evaluate_with(first, m, pool, test, mode, &opts)?;
                        push(m.name(), &[*scenario], *scenario, &mode, none(), &r);
                    }
                }
            }
        }
        Ok(rows)
    }

    /// Fine-tuning logs carry only mean errors; rows built from them
    /// report the mean in every statistic column.
    fn evaluate_logged(&self, mean: f64) -> EvalResult {
        let count = self.config.test_samples;
        EvalResult {
            summary: crate::evaluation::ErrorSummary { mean, p10: mean, p90: mean, count },
            records: Vec::new(),
        }
    }
}

fn train_model(config: &ModelConfig, cfg: &TrainConfig, pools: &[&ReferencePool]) -> Result<(Model, MetricLog)> {
    train(config, cfg, pools, &[])
}
