//! Run configuration: one JSON file, unknown keys rejected, flags applied on
//! top.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use multiid::diffusion::DiffusionConfig;
use multiid::model::ModelConfig;
use multiid::synthdata::CorpusConfig;
use multiid::training::TrainConfig;

pub const SEED_ENV: &str = "MULTIID_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        let d = DiffusionConfig::default();
        Self {
            steps: d.steps,
            guidance: d.guidance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizConfig {
    pub frame_stride: usize,
    pub layer_stride: usize,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self {
            frame_stride: 4,
            layer_stride: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for every stage of the run; falls back to `MULTIID_SEED`, then
    /// to the per-section seeds.
    pub seed: Option<u64>,
    pub corpus_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub report_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub sampling: SamplingConfig,
    pub viz: VizConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            corpus_dir: "runs/corpus".into(),
            ckpt_dir: "runs/ckpt".into(),
            report_dir: "runs/report".into(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            sampling: SamplingConfig::default(),
            viz: VizConfig::default(),
        }
    }
}

/// A problem with the configuration or the paths it names.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// Dotted path of the offending key, when there is one.
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            key: key.map(str::to_string),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "{k}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Name of the field in a serde "unknown field `x`" message.
fn unknown_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("unknown field `")?;
    rest.split('`').next()
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a config file laid over the defaults: a partial section keeps the
/// defaults of that section (so `stage2` starts from stage-2 values).
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let patch: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ConfigError::new(None, format!("invalid JSON: {e}")))?;
    if !patch.is_object() {
        return Err(ConfigError::new(None, "config must be a JSON object"));
    }
    let mut merged = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    merge(&mut merged, patch);
    serde_path_to_error::deserialize(merged).map_err(|e| {
        let inner = e.inner().to_string();
        let path = e.path().to_string();
        let key = match unknown_field(&inner) {
            Some(field) if path == "." || path.is_empty() => field.to_string(),
            Some(field) if path == field || path.ends_with(&format!(".{field}")) => path,
            Some(field) => format!("{path}.{field}"),
            None => path,
        };
        ConfigError::new(Some(&key), inner)
    })
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError::new(None, format!("reading {}: {e}", p.display())))?;
            parse_config(&text)
        }
    }
}

impl RunConfig {
    /// Resolves the run seed: flag, then config, then `MULTIID_SEED`, and
    /// pushes it into every section.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> Result<(), ConfigError> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| ConfigError::new(Some(SEED_ENV), format!("not an unsigned integer: {v:?}")))?,
            ),
            Err(_) => None,
        };
        self.seed = flag.or(self.seed).or(env);
        if let Some(s) = self.seed {
            self.corpus.seed = s;
            self.stage1.seed = s;
            self.stage2.seed = s;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::new(Some("model"), e.to_string()))?;
        for (key, cfg, stage) in [("stage1", &self.stage1, 1), ("stage2", &self.stage2, 2)] {
            if cfg.stage != stage {
                return Err(ConfigError::new(
                    Some(&format!("{key}.stage")),
                    format!("must be {stage}"),
                ));
            }
            cfg.validate().map_err(|e| ConfigError::new(Some(key), e.to_string()))?;
        }
        if self.sampling.steps == 0 || !self.sampling.guidance.is_finite() {
            return Err(ConfigError::new(
                Some("sampling"),
                "steps must be positive and guidance finite",
            ));
        }
        if self.viz.frame_stride == 0 || self.viz.layer_stride == 0 {
            return Err(ConfigError::new(Some("viz"), "strides must be positive"));
        }
        Ok(())
    }
}
