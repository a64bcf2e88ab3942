//! Checkpoint format: a JSON manifest (config, parameter names and shapes,
//! format version, seed) next to a little-endian `f64` blob holding the
//! parameters in manifest order. Round trips are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use flowlab_core::model::{CondMode, ModelConfig, VelocityModel};
use flowlab_core::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestConfig {
    pub layers: usize,
    pub hidden: usize,
    pub d_data: usize,
    pub conditions: usize,
    pub mode: String,
    pub tokens_per_step: usize,
    pub supported_steps: Vec<u32>,
    pub time_embed_dim: usize,
}

impl From<&ModelConfig> for ManifestConfig {
    fn from(c: &ModelConfig) -> Self {
        ManifestConfig {
            layers: c.layers,
            hidden: c.hidden,
            d_data: c.d_data,
            conditions: c.conditions,
            mode: c.mode.name().to_string(),
            tokens_per_step: c.tokens_per_step,
            supported_steps: c.supported_steps.clone(),
            time_embed_dim: c.time_embed_dim,
        }
    }
}

impl ManifestConfig {
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            d_data: self.d_data,
            conditions: self.conditions,
            mode: CondMode::parse(&self.mode)?,
            tokens_per_step: self.tokens_per_step,
            supported_steps: self.supported_steps.clone(),
            time_embed_dim: self.time_embed_dim,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: ManifestConfig,
    pub params: Vec<ParamEntry>,
}

/// `foo`, `foo.json` and `foo.bin` all address the same checkpoint pair.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn save_model(model: &VelocityModel, seed: u64, path: &Path) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        config: ManifestConfig::from(model.config()),
        params: model
            .store()
            .iter()
            .map(|(name, node)| {
                let [rows, cols] = node.shape();
                ParamEntry { name: name.to_string(), rows, cols }
            })
            .collect(),
    };
    if let Some(parent) = manifest_path(path).parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path(path), json.as_bytes())
        .with_context(|| format!("writing {}", manifest_path(path).display()))?;
    fs::write(blob_path(path), model.param_bytes())
        .with_context(|| format!("writing {}", blob_path(path).display()))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath)
        .with_context(|| format!("missing checkpoint manifest {}", mpath.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .with_context(|| format!("malformed checkpoint manifest {}", mpath.display()))?;
    if manifest.format_version != FORMAT_VERSION {
        bail!(
            "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        );
    }
    Ok(manifest)
}

/// Rebuilds the model from a checkpoint pair. The blob length must agree
/// with the manifest exactly.
pub fn load_model(path: &Path) -> Result<(VelocityModel, u64)> {
    let manifest = read_manifest(path)?;
    let bpath = blob_path(path);
    let blob =
        fs::read(&bpath).with_context(|| format!("missing checkpoint blob {}", bpath.display()))?;

    let expected: usize = manifest.params.iter().map(|p| p.rows * p.cols * 8).sum();
    if blob.len() != expected {
        bail!(
            "checkpoint blob {} holds {} bytes, manifest expects {expected}",
            bpath.display(),
            blob.len()
        );
    }

    let config = manifest.config.to_model_config()?;
    let mut model = VelocityModel::new(config, manifest.seed)?;
    if model.store().len() != manifest.params.len() {
        bail!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            model.store().len()
        );
    }
    let mut offset = 0usize;
    for entry in &manifest.params {
        let numel = entry.rows * entry.cols;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&blob[offset + i * 8..offset + i * 8 + 8]);
            data.push(f64::from_le_bytes(bytes));
        }
        offset += numel * 8;
        let tensor = Tensor::new(entry.rows, entry.cols, data)?;
        let node = model
            .store()
            .get(&entry.name)
            .with_context(|| format!("manifest parameter '{}' not in model", entry.name))?;
        node.set_value(tensor)?;
    }
    let _ = model.store_mut(); // settle mutable borrow scope
    Ok((model, manifest.seed))
}

/// Loads a checkpoint that must match an expected architecture, e.g. a
/// teacher checkpoint named in a distillation config.
pub fn load_model_expecting(path: &Path, expected: &ModelConfig) -> Result<(VelocityModel, u64)> {
    let manifest = read_manifest(path)?;
    let found = manifest.config.to_model_config()?;
    if &found != expected {
        bail!(
            "checkpoint {} holds a {} model ({}x{} layers x hidden), expected {} ({}x{})",
            manifest_path(path).display(),
            found.mode.name(),
            found.layers,
            found.hidden,
            expected.mode.name(),
            expected.layers,
            expected.hidden,
        );
    }
    load_model(path)
}
