//! Localization error metrics and model evaluation in the three inference
//! modes.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_csi_noise, Location};
use crate::dataset::{coarse_location, sample_rng, Sample};
use crate::error::{Error, Result};
use crate::mateformer::AnalogyBatch;
use crate::model::{Model, ReferencePool};

pub fn localization_error(x: Location, xhat: Location) -> f64 {
    x.distance(xhat)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
    pub count: usize,
}

/// Nearest-rank percentile of an ascending slice: element `ceil(q·n)`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn error_summary(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::pre("error summary of an empty list"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ErrorSummary {
        mean: errors.iter().sum::<f64>() / errors.len() as f64,
        p10: nearest_rank(&sorted, 0.1),
        p90: nearest_rank(&sorted, 0.9),
        count: errors.len(),
    })
}

/// How reference pairs are chosen for each test sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EvalMode {
    /// Isolated samples, for data-to-label models.
    Direct,
    /// The pairs nearest to a coarse location `x + U[−l, l]²`.
    Neighborhood { l: f64 },
    /// `k` pairs drawn uniformly from the whole reference set.
    Random { k: usize },
    /// A random-mode pass whose prediction centers `passes` neighborhood
    /// passes, each re-centered on the previous prediction.
    Iterative { k: usize, passes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Pairs embedded per neighborhood pass.
    pub neighbors: usize,
    /// Standard deviation of the multiplicative noise applied to query CSI.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Test samples evaluated per forward pass.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { neighbors: 32, noise_sigma: 0.0, seed: 0, chunk: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub truth: Location,
    /// Search center of every neighborhood pass, in order.
    pub centers: Vec<Location>,
    pub prediction: Location,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub summary: ErrorSummary,
    pub records: Vec<SampleRecord>,
}

/// Evaluates `model` on `test`, embedding pairs from `reference`.
pub fn evaluate(model: &Model, reference: &ReferencePool, test: &[Sample], mode: EvalMode, opts: &EvalOptions) -> Result<EvalResult> {
    evaluate_with(model, model, reference, test, mode, opts)
}

/// Like [`evaluate`], but the random first pass of iterative mode uses
/// `coarse_model`.
pub fn evaluate_with(
    coarse_model: &Model,
    model: &Model,
    reference: &ReferencePool,
    test: &[Sample],
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::pre("empty test set"));
    }
    for m in [coarse_model, model] {
        if m.config.dims() != reference.dataset().dims() {
            return Err(Error::pre(format!(
                "model radio dims {:?} differ from the data's {:?}",
                m.config.dims(),
                reference.dataset().dims()
            )));
        }
    }
    let analogical = model.config.is_analogical();
    match (mode, analogical) {
        (EvalMode::Direct, true) => {
            return Err(Error::ModeMismatch(format!("{} needs a reference-sampling mode", model.name())));
        }
        (EvalMode::Direct, false) => {}
        (_, false) => {
            return Err(Error::ModeMismatch(format!("{} cannot embed reference pairs", model.name())));
        }
        _ => {}
    }
    if let EvalMode::Iterative { .. } = mode {
        if !coarse_model.config.is_analogical() {
            return Err(Error::ModeMismatch(format!("{} cannot run a random pass", coarse_model.name())));
        }
    }

    let mut records = Vec::with_capacity(test.len());
    for (c, chunk) in test.chunks(opts.chunk.max(1)).enumerate() {
        let base = c * opts.chunk.max(1);
        records.extend(eval_chunk(coarse_model, model, reference, chunk, base, mode, opts)?);
    }
    let errors: Vec<f64> = records.iter().map(|r| r.error).collect();
    Ok(EvalResult { summary: error_summary(&errors)?, records })
}

fn eval_chunk(
    coarse_model: &Model,
    model: &Model,
    reference: &ReferencePool,
    chunk: &[Sample],
    base: usize,
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<Vec<SampleRecord>> {
    // Per-sample streams: noise first, then the coarse offset or random draw.
    let mut rngs: Vec<_> = (0..chunk.len()).map(|i| sample_rng(opts.seed, (base + i) as u64)).collect();
    let mut noisy = Vec::with_capacity(chunk.len());
    for (s, rng) in chunk.iter().zip(&mut rngs) {
        noisy.push(apply_csi_noise(&s.csi, opts.noise_sigma, rng)?);
    }
    let truth: Vec<Location> = chunk.iter().map(|s| s.location).collect();
    let mut centers: Vec<Vec<Location>> = vec![Vec::new(); chunk.len()];

    let predictions = match mode {
        EvalMode::Direct => {
            let refs: Vec<_> = noisy.iter().collect();
            let feats = model.direct_features(&refs)?;
            // Multi-task heads are selected per sample.
            let mut out = Vec::with_capacity(chunk.len());
            for (f, s) in feats.into_iter().zip(chunk) {
                out.extend(model.predict_direct(&[f], s.scenario)?);
            }
            out
        }
        EvalMode::Neighborhood { l } => {
            let feats: Vec<Vec<f32>> = noisy.iter().map(|h| reference.features_of(h)).collect();
            let mut cs = Vec::with_capacity(chunk.len());
            for (t, rng) in truth.iter().zip(&mut rngs) {
                cs.push(coarse_location(*t, l, rng)?);
            }
            neighborhood_pass(model, reference, &feats, &cs, opts.neighbors, &mut centers)?
        }
        EvalMode::Random { k } => {
            let feats: Vec<Vec<f32>> = noisy.iter().map(|h| reference.features_of(h)).collect();
            random_pass(model, reference, &feats, k, &mut rngs)?
        }
        EvalMode::Iterative { k, passes } => {
            let feats: Vec<Vec<f32>> = noisy.iter().map(|h| reference.features_of(h)).collect();
            let mut pred = random_pass(coarse_model, reference, &feats, k, &mut rngs)?;
            for _ in 0..passes {
                pred = neighborhood_pass(model, reference, &feats, &pred, opts.neighbors, &mut centers)?;
            }
            pred
        }
    };

    Ok(chunk
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRecord {
            index: base + i,
            truth: s.location,
            centers: std::mem::take(&mut centers[i]),
            prediction: predictions[i],
            error: localization_error(s.location, predictions[i]),
        })
        .collect())
}

fn single_predictions(model: &Model, batches: &[AnalogyBatch]) -> Result<Vec<Location>> {
    Ok(model.predict_analogy(batches)?.into_iter().map(|v| v[0]).collect())
}

fn neighborhood_pass(
    model: &Model,
    reference: &ReferencePool,
    feats: &[Vec<f32>],
    search_centers: &[Location],
    n: usize,
    centers: &mut [Vec<Location>],
) -> Result<Vec<Location>> {
    let mut batches = Vec::with_capacity(feats.len());
    for (i, (f, c)) in feats.iter().zip(search_centers).enumerate() {
        let near = reference.nearest(*c, n)?;
        batches.push(reference.batch(&near, vec![f.clone()])?);
        centers[i].push(*c);
    }
    single_predictions(model, &batches)
}

fn random_pass(
    model: &Model,
    reference: &ReferencePool,
    feats: &[Vec<f32>],
    k: usize,
    rngs: &mut [impl Rng],
) -> Result<Vec<Location>> {
    if k == 0 || k > reference.len() {
        return Err(Error::pre(format!("random mode needs 1 ≤ k ≤ {}, got {k}", reference.len())));
    }
    let mut batches = Vec::with_capacity(feats.len());
    for (f, rng) in feats.iter().zip(rngs) {
        let picks = sample_indices(rng, reference.len(), k).into_vec();
        batches.push(reference.batch(&picks, vec![f.clone()])?);
    }
    single_predictions(model, &batches)
}
