//! Run configuration: one strict JSON document, overridable by dotted keys.

use std::path::{Path, PathBuf};

use lpgflow_core::model::{ModelConfig, TuningMode};
use lpgflow_core::numerics::AdamWConfig;
use lpgflow_core::taskdata::TaskSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SEED_ENV: &str = "LPGFLOW_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub train_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            batch_size: 16,
            train_steps: 2000,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepSampling {
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub sample_steps: usize,
    pub t_sampling: TimestepSampling,
    /// Attention dump interval, in sampling steps.
    pub attention_every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sample_steps: 50,
            t_sampling: TimestepSampling::Uniform,
            attention_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset manifest to train on.
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Base checkpoint to start from; a fresh base is drawn from the seed otherwise.
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out_dir: PathBuf::from("runs/default"),
            base_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub flow: FlowConfig,
    pub task: TaskSpec,
    pub tuning_mode: TuningMode,
    pub seed: u64,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            flow: FlowConfig::default(),
            task: TaskSpec::default(),
            tuning_mode: TuningMode::Lora,
            seed: 0,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.optimizer.adamw().validate()?;
        self.task.validate()?;
        let o = &self.optimizer;
        if o.batch_size == 0 || o.batch_size > 4096 {
            return Err(CliError::usage("optimizer.batch_size must lie in 1..=4096"));
        }
        if o.train_steps == 0 {
            return Err(CliError::usage("optimizer.train_steps must be positive"));
        }
        if self.flow.sample_steps == 0 || self.flow.attention_every == 0 {
            return Err(CliError::usage("flow.sample_steps and flow.attention_every must be positive"));
        }
        Ok(())
    }

    /// Parses a JSON document, applies `key.path=value` overrides and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| CliError::usage(format!("config is not valid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| lpgflow_core::Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    /// Seed precedence: explicit flag, then the environment, then the config.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<(), CliError> {
        self.seed = resolve_seed(flag, self.seed)?;
        Ok(())
    }

    /// Compact JSON with sorted keys; `f32` fields keep their shortest form.
    pub fn canonical_json(&self) -> String {
        canonical(self)
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

/// Serialises through text so that `f32` values are not widened before the
/// keys are sorted.
pub fn canonical(value: &impl Serialize) -> String {
    let text = serde_json::to_string(value).expect("value serialises");
    let v: Value = serde_json::from_str(&text).expect("own output parses");
    serde_json::to_string(&v).expect("value serialises")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

/// Sets `a.b.c` to the JSON reading of the value, or to the raw string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override {spec:?} is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::usage(format!("override path {path:?} has an empty segment")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::usage(format!("cannot descend into {:?}", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("the loop returns on the last key")
}
