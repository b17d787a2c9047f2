//! Run configuration: a flat JSON document with `--set key=value` overrides.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clex_core::optim::AdamConfig;
use clex_core::rope::DEFAULT_BASE;
use clex_core::{Method, ModelConfig, PositionMode, Precision, XiForm};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// (De)serializes a type through its `Display` / `FromStr` pair.
mod text {
    use super::*;

    pub fn serialize<T: Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: serde::Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod text_list {
    use super::*;

    pub fn serialize<T: Display, S: serde::Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.to_string()))
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<Vec<T>, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: serde::Deserializer<'de>,
    {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub split: f64,

    pub vocab: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub train_len: usize,
    #[serde(with = "text")]
    pub method: Method,
    /// Methods trained side by side by `compare`.
    #[serde(with = "text_list")]
    pub methods: Vec<Method>,
    pub t_train: f64,
    pub t_fixed: f64,
    pub rope_base: f64,
    pub ode_lambda: usize,
    #[serde(with = "text")]
    pub xi_form: XiForm,
    pub steps_per_unit: usize,
    #[serde(with = "text")]
    pub position_mode: PositionMode,
    #[serde(with = "text")]
    pub precision: Precision,
    pub seed: u64,

    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub log_every: usize,

    pub cache_t_ks: Vec<f64>,
    /// Empty means `{L, 2L, 4L, 8L}` with `L = train_len`.
    pub eval_lens: Vec<usize>,
    /// Cap on predicted tokens per evaluation length; 0 evaluates every window.
    pub eval_max_tokens: usize,
    /// Windows evaluated together in one forward pass at most this many tokens.
    pub eval_batch_tokens: usize,
    pub memory_budget_mb: usize,

    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let adam = AdamConfig::default();
        Self {
            corpus: PathBuf::from("corpus.txt"),
            split: 0.9,
            vocab: m.vocab,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            train_len: m.train_len,
            method: m.method,
            methods: vec![Method::Rope, Method::Yarn, Method::Clex],
            t_train: m.t_train,
            t_fixed: m.t_fixed,
            rope_base: DEFAULT_BASE,
            ode_lambda: m.ode_lambda,
            xi_form: m.xi_form,
            steps_per_unit: m.steps_per_unit,
            position_mode: m.position_mode,
            precision: Precision::F32,
            seed: 0,
            steps: 3000,
            batch_size: 8,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            grad_clip: 1.0,
            log_every: 100,
            cache_t_ks: vec![1.0, 2.0, 4.0, 8.0],
            eval_lens: Vec::new(),
            eval_max_tokens: 0,
            eval_batch_tokens: 4096,
            memory_budget_mb: 2048,
            out_dir: None,
        }
    }
}

/// Splits `key=value`; the value is read as JSON when it parses, else as a string.
fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{raw}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(HarnessError::Config(format!("override `{raw}` has an empty key")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides, rejects unknown keys and
    /// resolves relative paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (mut doc, dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(HarnessError::io(p))?;
                let v: Value = serde_json::from_str(&text).map_err(HarnessError::json(p))?;
                let Value::Object(map) = v else {
                    return Err(HarnessError::Config(format!("{} must hold a JSON object", p.display())));
                };
                (map, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Map::new(), PathBuf::new()),
        };
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            doc.insert(k, v);
        }
        let mut cfg: RunConfig =
            serde_json::from_value(Value::Object(doc)).map_err(|e| HarnessError::Config(e.to_string()))?;
        if cfg.corpus.is_relative() {
            cfg.corpus = dir.join(&cfg.corpus);
        }
        if let Some(out) = &cfg.out_dir {
            if out.is_relative() {
                cfg.out_dir = Some(dir.join(out));
            }
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fills derived defaults and validates.
    pub fn resolve(&mut self) -> Result<()> {
        if self.eval_lens.is_empty() {
            self.eval_lens = [1, 2, 4, 8].iter().map(|k| k * self.train_len).collect();
        }
        if let Some(&bad) = self.eval_lens.iter().find(|&&l| l < 2) {
            return Err(HarnessError::Config(format!("eval length {bad} is below 2")));
        }
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 || self.eval_batch_tokens == 0 {
            return Err(HarnessError::Config("steps, batch_size, log_every and eval_batch_tokens must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(HarnessError::Config("lr and grad_clip must be positive".into()));
        }
        if self.cache_t_ks.is_empty() || !self.cache_t_ks.windows(2).all(|w| w[0] < w[1]) || !(self.cache_t_ks[0] >= 1.0) {
            return Err(HarnessError::Config("cache_t_ks must be strictly increasing and start at >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(HarnessError::Config("methods must not be empty".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            train_len: self.train_len,
            method: self.method,
            t_train: self.t_train,
            t_fixed: self.t_fixed,
            rope_base: self.rope_base,
            ode_lambda: self.ode_lambda,
            xi_form: self.xi_form,
            steps_per_unit: self.steps_per_unit,
            position_mode: self.position_mode,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    /// Resolved-config snapshot. The output location is left out so that
    /// reruns into different directories write identical files.
    pub fn to_json(&self) -> String {
        let blank = Self {
            out_dir: None,
            ..self.clone()
        };
        serde_json::to_string_pretty(&blank).expect("config serializes") + "\n"
    }

    /// SHA-256 of the resolved config with the output location blanked.
    pub fn hash(&self) -> String {
        let blank = Self {
            out_dir: None,
            ..self.clone()
        };
        hex(&Sha256::digest(serde_json::to_vec(&blank).expect("config serializes")))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializable mirror of [`ModelConfig`], stored next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub train_len: usize,
    #[serde(with = "text")]
    pub method: Method,
    pub t_train: f64,
    pub t_fixed: f64,
    pub rope_base: f64,
    pub ode_lambda: usize,
    #[serde(with = "text")]
    pub xi_form: XiForm,
    pub steps_per_unit: usize,
    #[serde(with = "text")]
    pub position_mode: PositionMode,
    pub seed: u64,
}

impl From<&ModelConfig> for ModelSpec {
    fn from(c: &ModelConfig) -> Self {
        Self {
            vocab: c.vocab,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            train_len: c.train_len,
            method: c.method,
            t_train: c.t_train,
            t_fixed: c.t_fixed,
            rope_base: c.rope_base,
            ode_lambda: c.ode_lambda,
            xi_form: c.xi_form,
            steps_per_unit: c.steps_per_unit,
            position_mode: c.position_mode,
            seed: c.seed,
        }
    }
}

impl From<&ModelSpec> for ModelConfig {
    fn from(s: &ModelSpec) -> Self {
        Self {
            vocab: s.vocab,
            n_layers: s.n_layers,
            n_heads: s.n_heads,
            d_model: s.d_model,
            train_len: s.train_len,
            method: s.method,
            t_train: s.t_train,
            t_fixed: s.t_fixed,
            rope_base: s.rope_base,
            ode_lambda: s.ode_lambda,
            xi_form: s.xi_form,
            steps_per_unit: s.steps_per_unit,
            position_mode: s.position_mode,
            seed: s.seed,
        }
    }
}

impl ModelSpec {
    /// Fields whose values differ between two specs, ignoring the ones that
    /// only affect training (seed, position mode, CLEX sampling range).
    pub fn eval_mismatches(&self, other: &ModelSpec) -> Vec<String> {
        let a = serde_json::to_value(self).expect("spec serializes");
        let b = serde_json::to_value(other).expect("spec serializes");
        let (Value::Object(a), Value::Object(b)) = (a, b) else {
            unreachable!("specs serialize to objects")
        };
        a.iter()
            .filter(|(k, _)| !matches!(k.as_str(), "seed" | "position_mode" | "t_train"))
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint {} vs config {}", v, b.get(k).unwrap_or(&Value::Null)))
            .collect()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }
}
