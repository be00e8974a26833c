//! Model kinds behind one enum, plus the per-scenario reference pool that
//! analogical models draw their embedded pairs from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, D2lConfig, IclConfig, LocationNorm, MultitaskConfig};
use crate::channel::{CsiMatrix, Location};
use crate::dataset::{build_neighbor_lists, knn_search, Dataset, NeighborIndex, Sample};
use crate::error::{Error, Result};
use crate::mateformer::{self, AnalogyBatch, MateformerConfig};
use crate::params::ParamSet;
use crate::tensor::Real;

/// Where embedded pairs come from during training and inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// From the spatial neighborhood of an anchor or coarse location.
    #[default]
    Neighborhood,
    /// Uniformly from the whole reference set.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Mateformer(MateformerConfig),
    Icl(IclConfig),
    D2l(D2lConfig),
    Multitask(MultitaskConfig),
}

impl ModelConfig {
    /// Label used in result tables.
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Mateformer(_) => "mateformer",
            ModelConfig::Icl(_) => "icl",
            ModelConfig::D2l(c) => c.name(),
            ModelConfig::Multitask(_) => "multitask",
        }
    }

    /// `(N_t, N_c)` the model was built for.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            ModelConfig::Mateformer(c) => (c.num_antennas, c.num_subcarriers),
            ModelConfig::Icl(c) => (c.num_antennas, c.num_subcarriers),
            ModelConfig::D2l(c) => (c.num_antennas, c.num_subcarriers),
            ModelConfig::Multitask(c) => (c.backbone.num_antennas, c.backbone.num_subcarriers),
        }
    }

    /// Whether the model embeds reference pairs at inference.
    pub fn is_analogical(&self) -> bool {
        matches!(self, ModelConfig::Mateformer(_) | ModelConfig::Icl(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Mateformer(c) => c.validate(),
            ModelConfig::Icl(c) => c.validate(),
            ModelConfig::D2l(c) => c.validate(),
            ModelConfig::Multitask(c) => c.backbone.validate(),
        }
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet<f32>> {
        match self {
            ModelConfig::Mateformer(c) => mateformer::init_params(c, rng),
            ModelConfig::Icl(c) => baselines::init_icl(c, rng),
            ModelConfig::D2l(c) => baselines::init_d2l(c, rng),
            ModelConfig::Multitask(c) => baselines::init_multitask(c, rng),
        }
    }
}

/// Input and output scaling frozen at training time for data-to-label
/// models, which see no reference set at inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedNorm {
    pub csi_scale: f64,
    pub location: LocationNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    /// Present for data-to-label models only.
    pub norm: Option<FixedNorm>,
    pub sampling: Sampling,
}

impl Model {
    pub fn name(&self) -> &'static str {
        self.config.name()
    }

    fn fixed_norm(&self) -> Result<&FixedNorm> {
        self.norm
            .as_ref()
            .ok_or_else(|| Error::Format(format!("{} model lacks its input normalization", self.name())))
    }

    /// Input vectors for isolated CSIs (data-to-label models).
    pub fn direct_features(&self, csi: &[&CsiMatrix]) -> Result<Vec<Vec<f32>>> {
        let input = match &self.config {
            ModelConfig::D2l(c) => c.input,
            ModelConfig::Multitask(c) => c.backbone.input,
            _ => return Err(Error::ModeMismatch(format!("{} does not map isolated CSIs", self.name()))),
        };
        let scale = self.fixed_norm()?.csi_scale;
        Ok(csi.iter().map(|h| baselines::d2l_features(input, h, scale)).collect())
    }

    /// Locations for isolated samples; `scenario` selects a multi-task head.
    pub fn predict_direct(&self, features: &[Vec<f32>], scenario: u32) -> Result<Vec<Location>> {
        let norm = self.fixed_norm()?;
        match &self.config {
            ModelConfig::D2l(c) => baselines::d2l_predict(&self.params, c, &norm.location, features),
            ModelConfig::Multitask(c) => baselines::multitask_predict(&self.params, c, &norm.location, scenario, features),
            _ => Err(Error::ModeMismatch(format!("{} needs embedded reference pairs", self.name()))),
        }
    }

    /// Locations for every query of every analogy batch.
    pub fn predict_analogy(&self, batches: &[AnalogyBatch]) -> Result<Vec<Vec<Location>>> {
        predict_analogy_with(&self.config, &self.params, batches)
    }
}

pub fn predict_analogy_with<T: Real>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    batches: &[AnalogyBatch],
) -> Result<Vec<Vec<Location>>> {
    match config {
        ModelConfig::Mateformer(c) => mateformer::predict(params, c, batches),
        ModelConfig::Icl(c) => baselines::icl_predict(params, c, batches),
        _ => Err(Error::ModeMismatch(format!("{} does not embed reference pairs", config.name()))),
    }
}

/// A scenario's training set prepared as analogy references: CSI features
/// scaled by the set's own RMS magnitude, plus a spatial index.
#[derive(Clone, Debug)]
pub struct ReferencePool {
    dataset: Dataset,
    csi_scale: f64,
    features: Vec<Vec<f32>>,
    index: NeighborIndex,
}

impl ReferencePool {
    pub fn new(dataset: Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::pre("reference pool needs at least one sample"));
        }
        let csi_scale = dataset.csi_rms();
        if !(csi_scale > 0.0 && csi_scale.is_finite()) {
            return Err(Error::pre(format!("reference CSI RMS {csi_scale} is unusable")));
        }
        let features = dataset.samples().iter().map(|s| scaled(&s.csi, csi_scale)).collect();
        let index = NeighborIndex::new(&dataset);
        Ok(ReferencePool { dataset, csi_scale, features, index })
    }

    pub fn id(&self) -> u32 {
        self.dataset.id()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn samples(&self) -> &[Sample] {
        self.dataset.samples()
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn csi_scale(&self) -> f64 {
        self.csi_scale
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i]
    }

    pub fn location(&self, i: usize) -> Location {
        self.dataset.samples()[i].location
    }

    /// Features of an outside CSI on this pool's scale.
    pub fn features_of(&self, csi: &CsiMatrix) -> Vec<f32> {
        scaled(csi, self.csi_scale)
    }

    pub fn nearest(&self, center: Location, k: usize) -> Result<Vec<usize>> {
        knn_search(&self.index, center, k)
    }

    pub fn neighbor_lists(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        build_neighbor_lists(&self.dataset, n)
    }

    /// Analogy batch embedding the given reference indices.
    pub fn batch(&self, embedded: &[usize], queries: Vec<Vec<f32>>) -> Result<AnalogyBatch> {
        AnalogyBatch::new(
            embedded.iter().map(|&i| self.features[i].clone()).collect(),
            embedded.iter().map(|&i| self.location(i)).collect(),
            queries,
        )
    }
}

fn scaled(csi: &CsiMatrix, scale: f64) -> Vec<f32> {
    let inv = (1.0 / scale) as f32;
    csi.interleaved().into_iter().map(|v| v * inv).collect()
}
