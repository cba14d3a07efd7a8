//! The single JSON document that drives a run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::data::GenConfig;
use crate::blocks::{check_block_bottleneck, BlockKind, BottleneckReport, LogBase};
use crate::error::{config_err, Error, Result};
use crate::matcher::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without dev-loss improvement before stopping.
    pub patience: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 30,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            init: seed,
            data: seed,
            shuffle: seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckPolicy {
    /// Train even when the bottleneck rule fails.
    #[serde(rename = "override")]
    pub override_check: bool,
    pub log_base: LogBase,
}

impl Default for BottleneckPolicy {
    fn default() -> Self {
        BottleneckPolicy {
            override_check: true,
            log_base: LogBase::Natural,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub pairs: usize,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            pairs: 50,
            repeats: 3,
            warmup: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub seeds: Seeds,
    pub precision: Precision,
    pub bottleneck: BottleneckPolicy,
    pub latency: LatencyConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets `dotted.path` to `value`. The value is read as JSON when it parses
    /// as JSON and as a string otherwise. Unknown keys are rejected.
    pub fn apply_override(&mut self, path: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(*self)?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(key)
                    .ok_or_else(|| config_err(format!("unknown config key `{path}`")))?,
                _ => return Err(config_err(format!("`{path}` descends into a non-object"))),
            };
        }
        if slot.is_object() {
            return Err(config_err(format!("`{path}` names a section, not a value")));
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(doc).map_err(|e| config_err(format!("override `{path}={value}`: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` strings in order; later ones win.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
            self.apply_override(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn bottleneck_report(&self) -> BottleneckReport {
        check_block_bottleneck(&self.model.block, self.model.dim, self.model.max_len, self.bottleneck.log_base)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.vocab != self.data.vocab || self.model.max_len != self.data.max_len {
            return Err(config_err(format!(
                "model expects V = {}, L_max = {} but data has V = {}, L_max = {}",
                self.model.vocab, self.model.max_len, self.data.vocab, self.data.max_len
            )));
        }
        if self.model.labels != 2 {
            return Err(config_err("the synthetic task has exactly 2 labels"));
        }
        let o = &self.optim;
        if o.batch_size == 0 || o.lr < 0.0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(config_err(format!("invalid optimizer settings {o:?}")));
        }
        if self.model.block.kind == BlockKind::Sfa && !self.bottleneck.override_check {
            let rep = self.bottleneck_report();
            if !rep.pass {
                return Err(config_err(format!(
                    "bottleneck rule fails and override is off:\n{rep}"
                )));
            }
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
