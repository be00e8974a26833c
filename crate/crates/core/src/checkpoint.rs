//! Checkpoints: a JSON manifest (`<stem>.json`) describing the model and
//! every parameter's name, shape and offset, plus a blob (`<stem>.bin`) of
//! little-endian `f32` values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{FixedNorm, Model, ModelConfig, Sampling};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const FORMAT: &str = "mateloc-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub norm: Option<FixedNorm>,
    pub sampling: Sampling,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_sha256: String,
    pub params: Vec<ParamEntry>,
    /// Free-form training metadata (seed, steps, scenarios, …).
    pub metadata: serde_json::Value,
}

/// Manifest and blob paths for a checkpoint stem or manifest path.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

pub fn encode_params(params: &ParamSet<f32>) -> (Vec<ParamEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(params.scalar_count() * 4);
    let mut offset = 0;
    for (name, t) in params.iter() {
        entries.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset, len: t.len() });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    (entries, blob)
}

pub fn decode_params(entries: &[ParamEntry], blob: &[u8]) -> Result<ParamSet<f32>> {
    let total: usize = entries.iter().map(|e| e.len).sum();
    if blob.len() != total * 4 {
        return Err(Error::Format(format!(
            "checkpoint blob holds {} bytes, manifest needs {}",
            blob.len(),
            total * 4
        )));
    }
    let mut ps = ParamSet::new();
    let mut expected = 0;
    for e in entries {
        if e.offset != expected || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Format(format!("parameter {} has an inconsistent offset or shape", e.name)));
        }
        let bytes = &blob[e.offset * 4..(e.offset + e.len) * 4];
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        ps.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        expected += e.len;
    }
    Ok(ps)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(model: &Model, metadata: serde_json::Value, path: &Path) -> Result<()> {
    let (manifest_path, blob_path) = checkpoint_paths(path);
    let (params, blob) = encode_params(&model.params);
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        version: VERSION,
        model: model.config.clone(),
        norm: model.norm,
        sampling: model.sampling,
        blob: blob_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        blob_sha256: sha256_hex(&blob),
        params,
        metadata,
    };
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob_path, &blob)?;
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint and checks it against the parameter inventory its
/// model config implies.
pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    let (manifest_path, _) = checkpoint_paths(path);
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
            manifest.format, manifest.version
        )));
    }
    let blob_path = manifest_path.with_file_name(&manifest.blob);
    if !blob_path.exists() {
        return Err(Error::MissingArtifact(blob_path));
    }
    let blob = fs::read(&blob_path)?;
    let params = decode_params(&manifest.params, &blob)?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::Format(format!("{} does not match its recorded hash", blob_path.display())));
    }
    let reference = manifest.model.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
    let shapes = |p: &ParamSet<f32>| p.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
    if shapes(&reference) != shapes(&params) {
        return Err(Error::Format("checkpoint parameters do not match the model configuration".into()));
    }
    if manifest.model.is_analogical() == manifest.norm.is_some() {
        return Err(Error::Format("normalization presence does not match the model kind".into()));
    }
    let model = Model { config: manifest.model, params, norm: manifest.norm, sampling: manifest.sampling };
    Ok((model, manifest.metadata))
}
