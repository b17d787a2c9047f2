//! On-disk artifacts: checkpoint directories and basis-cache manifests.
//!
//! A checkpoint directory holds `model.ckpt` (binary tensors),
//! `manifest.json` (names, shapes, precision) and `config.json` (the model
//! config sidecar).

use std::fs;
use std::path::Path;

use clex_core::checkpoint::{decode_with_info, encode};
use clex_core::ode::BasisCache;
use clex_core::{FrequencyBasis, Model, ModelConfig, Real, XiForm};
use serde::{Deserialize, Serialize};

use crate::config::ModelSpec;
use crate::error::{HarnessError, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SIDECAR_FILE: &str = "config.json";
pub const CACHE_FILE: &str = "cache.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub precision: String,
    pub model_hash: String,
    pub num_params: usize,
    pub entries: Vec<ManifestEntry>,
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    fs::write(path, contents).map_err(HarnessError::io(path))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(HarnessError::json(path))?;
    write(path, text + "\n")
}

pub(crate) fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
    serde_json::from_str(&text).map_err(HarnessError::json(path))
}

pub fn save_checkpoint<T: Real>(dir: &Path, model: &Model<T>) -> Result<()> {
    let named: Vec<(String, clex_core::Tensor<T>)> =
        model.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    write(&dir.join(CHECKPOINT_FILE), encode(&named))?;
    let spec = ModelSpec::from(&model.config);
    let manifest = Manifest {
        format_version: 1,
        precision: T::PRECISION.as_str().into(),
        model_hash: spec.hash(),
        num_params: model.num_params(),
        entries: named
            .iter()
            .map(|(n, t)| ManifestEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&dir.join(SIDECAR_FILE), &spec)
}

/// Loads a checkpoint in precision `T`, converting if it was stored in the other one.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Model<T>> {
    let spec: ModelSpec = read_json(&dir.join(SIDECAR_FILE))?;
    let path = dir.join(CHECKPOINT_FILE);
    let bytes = fs::read(&path).map_err(HarnessError::io(&path))?;
    let named = decode_with_info::<T>(&bytes)?
        .into_iter()
        .map(|(info, t)| (info.name, t))
        .collect();
    let config = ModelConfig::from(&spec);
    Model::from_named(config, named).map_err(|e| HarnessError::Incompatible(e.to_string()))
}

pub fn load_spec(dir: &Path) -> Result<ModelSpec> {
    read_json(&dir.join(SIDECAR_FILE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntryDoc {
    pub t: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheDoc {
    pub native_len: usize,
    pub xi_form: String,
    pub steps_per_unit: usize,
    pub rope_base: f64,
    pub entries: Vec<CacheEntryDoc>,
}

pub fn save_cache(path: &Path, cache: &BasisCache, form: XiForm, steps_per_unit: usize) -> Result<()> {
    let doc = CacheDoc {
        native_len: cache.native_len(),
        xi_form: form.name().into(),
        steps_per_unit,
        rope_base: cache.entries()[0].1.base(),
        entries: cache
            .entries()
            .iter()
            .map(|(t, b)| CacheEntryDoc {
                t: *t,
                theta: b.theta().to_vec(),
            })
            .collect(),
    };
    write_json(path, &doc)
}

pub fn load_cache(path: &Path) -> Result<(BasisCache, CacheDoc)> {
    let doc: CacheDoc = read_json(path)?;
    let entries = doc
        .entries
        .iter()
        .map(|e| {
            FrequencyBasis::from_theta(e.theta.clone(), doc.rope_base)
                .map(|b| (e.t, b))
                .map_err(|err| HarnessError::Config(format!("{}: {err}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((BasisCache::from_entries(entries, doc.native_len)?, doc))
}
