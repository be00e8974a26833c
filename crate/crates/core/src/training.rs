//! Batch assembly, the learning-rate schedule, and the training loop shared
//! by every model kind.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines::{self, LocationNorm};
use crate::channel::{subcarrier_frequency, Location, SPEED_OF_LIGHT};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalMode, EvalOptions};
use crate::gradcheck::{finite_diff_gradcheck, GradCheckReport};
use crate::mateformer::{self, AnalogyBatch};
use crate::model::{FixedNorm, Model, ModelConfig, ReferencePool, Sampling};
use crate::nn::matrix;
use crate::params::{adam_step, AdamState, Bound, ParamSet};
use crate::tensor::Real;

/// Step decay: the rate is multiplied by `factor` every `interval` steps,
/// the first time at `activation + interval`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub factor: f64,
    pub interval: u64,
    pub activation: u64,
}

impl Schedule {
    /// ×0.2 every 50,000 steps after step 100,000.
    pub fn full_scale() -> Self {
        Schedule { factor: 0.2, interval: 50_000, activation: 100_000 }
    }

    pub fn constant() -> Self {
        Schedule { factor: 1.0, interval: 0, activation: 0 }
    }
}

pub fn lr_at_step(step: u64, base: f64, schedule: &Schedule) -> f64 {
    if schedule.interval == 0 || step < schedule.activation {
        return base;
    }
    let decays = (step - schedule.activation) / schedule.interval;
    base * schedule.factor.powi(decays.min(i32::MAX as u64) as i32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Analogy groups (or isolated samples for data-to-label models) per step.
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub schedule: Schedule,
    /// Neighbors per anchor list, `n`; lists hold `n + 1` entries.
    pub neighbors: usize,
    pub p_range: [usize; 2],
    pub q_range: [usize; 2],
    pub seed: u64,
    pub log_every: u64,
    pub sampling: Sampling,
    pub precision: Precision,
    /// Per-group CSI transform for analogical models; `None` disables it.
    pub augment: Option<CsiAugment>,
}

/// Random transform applied to every CSI of a group alike: a common phase,
/// a common delay shift and a common shift of the array's angular axis.
/// Groups then differ in reference frame, so the mapping must be read from
/// the embedded pairs rather than memorized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsiAugment {
    /// Delay shifts are uniform in ±`delay_m` meters of path length.
    pub delay_m: f64,
    /// Shifts of `sin θ` are uniform in ±`angle`.
    pub angle: f64,
}

impl Default for CsiAugment {
    fn default() -> Self {
        CsiAugment { delay_m: 20.0, angle: 0.0 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 20_000,
            learning_rate: 1e-3,
            schedule: Schedule { factor: 0.2, interval: 5_000, activation: 10_000 },
            neighbors: 32,
            p_range: [8, 32],
            q_range: [1, 16],
            seed: 0,
            log_every: 1_000,
            sampling: Sampling::Neighborhood,
            precision: Precision::F32,
            augment: None,
        }
    }
}

impl TrainConfig {
    /// Batch 500, 300,000 steps, rate 1e-4 with the full-scale schedule, n = 64,
    /// p ∈ [16, 64], q ∈ [1, 64].
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 500,
            steps: 300_000,
            learning_rate: 1e-4,
            schedule: Schedule::full_scale(),
            neighbors: 64,
            p_range: [16, 64],
            q_range: [1, 64],
            log_every: 5_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, message: String| Err(Error::Config { key: key.to_string(), message });
        if self.batch_size == 0 {
            return cfg_err("batch_size", "must be ≥ 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return cfg_err("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        let cap = self.neighbors + 1;
        for (key, [lo, hi]) in [("p_range", self.p_range), ("q_range", self.q_range)] {
            if lo == 0 || lo > hi || hi > cap {
                return cfg_err(key, format!("[{lo}, {hi}] must satisfy 1 ≤ lo ≤ hi ≤ n + 1 = {cap}"));
            }
        }
        if self.log_every == 0 {
            return cfg_err("log_every", "must be ≥ 1".into());
        }
        Ok(())
    }
}

/// One sampled analogy problem with its ground truth and the reference
/// indices it was drawn from.
#[derive(Clone, Debug)]
pub struct SampledGroup {
    pub batch: AnalogyBatch,
    pub truth: Vec<Location>,
    pub embedded: Vec<usize>,
    pub queries: Vec<usize>,
}

/// Draws `p` embedded and `q` query pairs from `support`, each without
/// replacement; the two draws are independent and may overlap.
pub fn sample_group(pool: &ReferencePool, support: &[usize], p: usize, q: usize, rng: &mut impl Rng) -> Result<SampledGroup> {
    if p == 0 || q == 0 || p > support.len() || q > support.len() {
        return Err(Error::pre(format!("cannot draw p={p}, q={q} from {} candidates", support.len())));
    }
    let embedded: Vec<usize> = sample_indices(rng, support.len(), p).into_iter().map(|i| support[i]).collect();
    let queries: Vec<usize> = sample_indices(rng, support.len(), q).into_iter().map(|i| support[i]).collect();
    let batch = pool.batch(&embedded, queries.iter().map(|&i| pool.feature(i).to_vec()).collect())?;
    let truth = queries.iter().map(|&i| pool.location(i)).collect();
    Ok(SampledGroup { batch, truth, embedded, queries })
}

fn draw_in(range: [usize; 2], rng: &mut impl Rng) -> usize {
    rng.random_range(range[0]..=range[1])
}

/// Anchor uniform over the pool, `p` and `q` uniform over their ranges,
/// pairs drawn from the anchor's neighbor list.
pub fn sample_analogy_batch(
    pool: &ReferencePool,
    lists: &[Vec<usize>],
    rng: &mut impl Rng,
    p_range: [usize; 2],
    q_range: [usize; 2],
) -> Result<SampledGroup> {
    if lists.len() != pool.len() {
        return Err(Error::pre("neighbor lists do not match the pool"));
    }
    let anchor = rng.random_range(0..pool.len());
    let (p, q) = (draw_in(p_range, rng), draw_in(q_range, rng));
    sample_group(pool, &lists[anchor], p, q, rng)
}

/// Mean of squared differences over all components.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::pre(format!("mse over {} predictions and {} targets", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Periodic evaluation attached to a training run.
#[derive(Clone, Copy, Debug)]
pub struct Probe<'a> {
    pub reference: &'a ReferencePool,
    pub test: &'a [Sample],
    pub mode: EvalMode,
    pub options: EvalOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// `(scenario id, mean error in meters)` per probe.
    pub evals: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<LogRow>,
}

impl MetricLog {
    /// CSV with columns `step,lr,train_loss` then one
    /// `eval_scenario_id,eval_mean_error` pair per probe.
    pub fn to_csv(&self) -> String {
        let probes = self.rows.iter().map(|r| r.evals.len()).max().unwrap_or(0);
        let mut s = String::from("step,lr,train_loss");
        for _ in 0..probes {
            s.push_str(",eval_scenario_id,eval_mean_error");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{:e},{:e}", r.step, r.lr, r.train_loss);
            for (id, e) in &r.evals {
                let _ = write!(s, ",{id},{e}");
            }
            s.push('\n');
        }
        s
    }

    /// Mean error series of probe `i`.
    pub fn probe_series(&self, i: usize) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.evals.get(i).map(|e| e.1)).collect()
    }
}

/// Data for one optimization step, independent of the float type.
enum StepData {
    Analogy { groups: Vec<AnalogyBatch>, truth: Vec<Vec<Location>> },
    Direct { scenario: u32, features: Vec<Vec<f32>>, targets: Vec<f32> },
}

struct Sampler<'a> {
    pools: &'a [&'a ReferencePool],
    lists: Vec<Option<Vec<Vec<usize>>>>,
    everything: Vec<Vec<usize>>,
    direct: Vec<Vec<Vec<f32>>>,
}

impl<'a> Sampler<'a> {
    fn new(model: &Model, cfg: &TrainConfig, pools: &'a [&'a ReferencePool]) -> Result<Self> {
        let analogical = model.config.is_analogical();
        let mut lists = Vec::with_capacity(pools.len());
        let mut direct = Vec::with_capacity(pools.len());
        for pool in pools {
            if pool.dataset().dims() != model.config.dims() {
                return Err(Error::pre(format!(
                    "scenario {} has radio dims {:?}, model expects {:?}",
                    pool.id(),
                    pool.dataset().dims(),
                    model.config.dims()
                )));
            }
            let need = analogical && cfg.sampling == Sampling::Neighborhood;
            lists.push(if need { Some(pool.neighbor_lists(cfg.neighbors)?) } else { None });
            if analogical {
                direct.push(Vec::new());
            } else {
                let csi: Vec<_> = pool.samples().iter().map(|s| &s.csi).collect();
                direct.push(model.direct_features(&csi)?);
            }
        }
        let everything = pools.iter().map(|p| (0..p.len()).collect()).collect();
        Ok(Sampler { pools, lists, everything, direct })
    }

    fn draw(&self, model: &Model, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<StepData> {
        let s = rng.random_range(0..self.pools.len());
        let pool = self.pools[s];
        match &model.config {
            ModelConfig::Mateformer(_) | ModelConfig::Icl(_) => {
                let icl = matches!(model.config, ModelConfig::Icl(_));
                let support = |rng: &mut ChaCha8Rng| -> &[usize] {
                    match &self.lists[s] {
                        Some(l) => &l[rng.random_range(0..l.len())],
                        None => &self.everything[s],
                    }
                };
                let (p, q) = if icl {
                    let mut p = draw_in(cfg.p_range, rng);
                    if let ModelConfig::Icl(c) = &model.config {
                        p = p.min(c.max_pairs);
                    }
                    (p.min(cfg.neighbors), 1)
                } else {
                    (draw_in(cfg.p_range, rng), draw_in(cfg.q_range, rng))
                };
                let mut groups = Vec::with_capacity(cfg.batch_size);
                let mut truth = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    let sup = support(rng);
                    let mut g = if icl { sample_icl_group(pool, sup, p, rng)? } else { sample_group(pool, sup, p, q, rng)? };
                    if let Some(a) = &cfg.augment {
                        augment_group(&mut g, pool, a, rng);
                    }
                    groups.push(g.batch);
                    truth.push(g.truth);
                }
                Ok(StepData::Analogy { groups, truth })
            }
            ModelConfig::D2l(_) | ModelConfig::Multitask(_) => {
                let norm = model.norm.as_ref().expect("normalization fitted before training").location;
                let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..pool.len())).collect();
                let features = picks.iter().map(|&i| self.direct[s][i].clone()).collect();
                let targets = picks.iter().flat_map(|&i| norm.encode(pool.location(i))).collect();
                Ok(StepData::Direct { scenario: pool.id(), features, targets })
            }
        }
    }
}

fn augment_group(g: &mut SampledGroup, pool: &ReferencePool, a: &CsiAugment, rng: &mut impl Rng) {
    let spec = &pool.dataset().scenario;
    let (nt, nc) = (spec.num_antennas, spec.num_subcarriers);
    let phase = rng.random_range(0.0..2.0 * PI);
    let delay = if a.delay_m > 0.0 { rng.random_range(-a.delay_m..a.delay_m) / SPEED_OF_LIGHT } else { 0.0 };
    let shift = if a.angle > 0.0 { rng.random_range(-a.angle..a.angle) } else { 0.0 };
    let rot: Vec<Complex64> = (0..nt * nc)
        .map(|i| {
            let (m, k) = (i / nc, i % nc);
            let f = subcarrier_frequency(k, nc, spec.bandwidth_hz);
            Complex64::from_polar(1.0, phase + PI * m as f64 * shift - 2.0 * PI * f * delay)
        })
        .collect();
    for row in g.batch.embedded_csi.iter_mut().chain(g.batch.query_csi.iter_mut()) {
        for (i, r) in rot.iter().enumerate() {
            let c = Complex64::new(f64::from(row[2 * i]), f64::from(row[2 * i + 1])) * r;
            row[2 * i] = c.re as f32;
            row[2 * i + 1] = c.im as f32;
        }
    }
}

/// Context of `p` pairs and one query, all distinct, from a joint shuffle
/// of the support.
pub fn sample_icl_group(pool: &ReferencePool, support: &[usize], p: usize, rng: &mut impl Rng) -> Result<SampledGroup> {
    if p == 0 || p + 1 > support.len() {
        return Err(Error::pre(format!("cannot draw {p} context pairs and a query from {} candidates", support.len())));
    }
    let picked: Vec<usize> = sample_indices(rng, support.len(), p + 1).into_iter().map(|i| support[i]).collect();
    let (embedded, queries) = (picked[..p].to_vec(), vec![picked[p]]);
    let batch = pool.batch(&embedded, vec![pool.feature(queries[0]).to_vec()])?;
    let truth = vec![pool.location(queries[0])];
    Ok(SampledGroup { batch, truth, embedded, queries })
}

fn step_loss<T: Real>(tape: &mut Tape<T>, b: &Bound<'_, T>, config: &ModelConfig, data: &StepData) -> Result<Var> {
    match (config, data) {
        (ModelConfig::Mateformer(c), StepData::Analogy { groups, truth }) => mateformer::loss_on_tape(tape, b, c, groups, truth),
        (ModelConfig::Icl(c), StepData::Analogy { groups, truth }) => {
            let f = baselines::icl_forward_on_tape(tape, b, c, groups)?;
            let target: Vec<f32> = groups.iter().zip(truth).flat_map(|(g, t)| g.targets(t, c.location_scale)).collect();
            let rows = target.len() / 2;
            let target = tape.constant(matrix(rows, 2, target)?);
            tape.mse(f.last, target)
        }
        (ModelConfig::D2l(c), StepData::Direct { features, targets, .. }) => {
            let out = baselines::d2l_forward_on_tape(tape, b, c, features)?;
            let t = tape.constant(matrix(features.len(), 2, targets.iter().copied())?);
            tape.mse(out, t)
        }
        (ModelConfig::Multitask(c), StepData::Direct { scenario, features, targets }) => {
            let out = baselines::multitask_forward_on_tape(tape, b, c, *scenario, features)?;
            let t = tape.constant(matrix(features.len(), 2, targets.iter().copied())?);
            tape.mse(out, t)
        }
        _ => unreachable!("step data always matches the model family"),
    }
}

/// Fresh model for `config`: parameters from the seed's init stream and, for
/// data-to-label models, normalization fitted on the pooled training data.
pub fn init_model(config: &ModelConfig, cfg: &TrainConfig, pools: &[&ReferencePool]) -> Result<Model> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let params = config.init_params(&mut init_rng)?;
    let norm = if config.is_analogical() {
        None
    } else {
        let mut sq = 0.0;
        let mut count = 0usize;
        let mut locs = Vec::new();
        for p in pools {
            for s in p.samples() {
                sq += s.csi.values().iter().map(|c| c.norm_sqr() as f64).sum::<f64>();
                count += s.csi.values().len();
                locs.push(s.location);
            }
        }
        if count == 0 {
            return Err(Error::pre("no training samples"));
        }
        Some(FixedNorm { csi_scale: (sq / count as f64).sqrt(), location: LocationNorm::fit(&locs)? })
    };
    Ok(Model { config: config.clone(), params, norm, sampling: cfg.sampling })
}

/// Trains a new model on the given scenarios. Each step draws its scenario
/// uniformly, so no batch mixes scenarios.
pub fn train(
    config: &ModelConfig,
    cfg: &TrainConfig,
    pools: &[&ReferencePool],
    probes: &[Probe<'_>],
) -> Result<(Model, MetricLog)> {
    let model = init_model(config, cfg, pools)?;
    run(model, cfg, pools, probes, &[])
}

/// Continues training from `source` on new scenarios. Data-to-label models
/// keep their input normalization. Parameters named in `frozen` stay fixed.
pub fn fine_tune(
    source: &Model,
    cfg: &TrainConfig,
    pools: &[&ReferencePool],
    probes: &[Probe<'_>],
    frozen: &[String],
) -> Result<(Model, MetricLog)> {
    let mut model = source.clone();
    model.sampling = cfg.sampling;
    run(model, cfg, pools, probes, frozen)
}

fn run(model: Model, cfg: &TrainConfig, pools: &[&ReferencePool], probes: &[Probe<'_>], frozen: &[String]) -> Result<(Model, MetricLog)> {
    cfg.validate()?;
    if pools.is_empty() {
        return Err(Error::pre("training needs at least one scenario"));
    }
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(model, cfg, pools, probes, frozen),
        Precision::F64 => run_typed::<f64>(model, cfg, pools, probes, frozen),
    }
}

fn run_typed<T: Real>(
    mut model: Model,
    cfg: &TrainConfig,
    pools: &[&ReferencePool],
    probes: &[Probe<'_>],
    frozen: &[String],
) -> Result<(Model, MetricLog)> {
    let sampler = Sampler::new(&model, cfg, pools)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: ParamSet<T> = model.params.cast();
    let mut adam = AdamState::new(&params);
    adam.freeze(&params, frozen)?;
    let mut log = MetricLog::default();

    for step in 0..=cfg.steps {
        let data = sampler.draw(&model, cfg, &mut rng)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let loss = step_loss(&mut tape, &bound, &model.config, &data)?;
        let loss_value = tape.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        let lr = lr_at_step(step, cfg.learning_rate, &cfg.schedule);
        if step % cfg.log_every == 0 || step == cfg.steps {
            model.params = params.cast();
            let mut evals = Vec::with_capacity(probes.len());
            for p in probes {
                let r = evaluate(&model, p.reference, p.test, p.mode, &p.options)?;
                evals.push((p.reference.id(), r.summary.mean));
            }
            log::debug!("step {step} lr {lr:.3e} loss {loss_value:.5e} evals {evals:?}");
            log.rows.push(LogRow { step, lr, train_loss: loss_value, evals });
        }
        if step == cfg.steps {
            break;
        }
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        drop(bound);
        adam_step(&mut params, &grads, &mut adam, lr)?;
    }
    model.params = params.cast();
    Ok((model, log))
}

/// Neighborhood evaluation at coarse error `l` with `n` embedded pairs,
/// or direct evaluation for data-to-label models.
pub fn default_probe_mode(model: &ModelConfig, l: f64) -> EvalMode {
    if model.is_analogical() {
        EvalMode::Neighborhood { l }
    } else {
        EvalMode::Direct
    }
}

/// Central-difference check of the training loss gradient for a freshly
/// initialized `config`, in 64-bit arithmetic, on one small batch of
/// `groups` groups (or samples) drawn from `pool`. The step is 1e-7: layer
/// norm over near-constant location tokens at init has curvature large
/// enough that the truncation error at 1e-3 exceeds 1e-1.
pub fn gradcheck_model(
    config: &ModelConfig,
    pool: &ReferencePool,
    groups: usize,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let cfg = TrainConfig {
        batch_size: groups,
        neighbors: 16,
        p_range: [4, 12],
        q_range: [1, 4],
        seed,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let pools = [pool];
    let model = init_model(config, &cfg, &pools)?;
    let sampler = Sampler::new(&model, &cfg, &pools)?;
    let data = sampler.draw(&model, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let params: ParamSet<f64> = model.params.cast();
    finite_diff_gradcheck(|tape, b| step_loss(tape, b, &model.config, &data), &params, probes, 1e-7, seed)
}
