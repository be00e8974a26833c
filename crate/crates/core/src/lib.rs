//! Analogical-learning localization.
//!
//! Twin-transformer ("Mateformer") localization from CSI with embedded
//! reference pairs, plus the numeric substrate, a geometric channel
//! simulator, datasets, baselines, training loops and experiment protocols.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod channel;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod mateformer;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
