//! JSON checkpoints: a versioned map from dotted parameter path to shape and
//! row-major values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sfa_tensor::Real;

use super::{ModelConfig, SiameseModel};
use crate::error::{config_err, Error, Result};
use crate::params::Params;

pub const CHECKPOINT_FORMAT: &str = "sfa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// `f32` or `f64`; values are stored as f64 either way.
    pub precision: String,
    pub config: ModelConfig,
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn capture<T: Real>(model: &SiameseModel<T>) -> Self {
        let mut params = BTreeMap::new();
        model.visit("", &mut |name, t| {
            params.insert(
                name,
                StoredTensor {
                    shape: t.shape().to_vec(),
                    data: t.to_f64(),
                },
            );
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            precision: T::NAME.into(),
            config: *model.config(),
            params,
        }
    }

    /// Rebuilds a model; every parameter must be present with its exact shape
    /// and no extra entries are allowed.
    pub fn restore<T: Real>(&self) -> Result<SiameseModel<T>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(config_err(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = SiameseModel::<T>::new(self.config, 0)?;
        let mut seen = 0;
        let mut failure = None;
        model.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match self.params.get(&name) {
                Some(s) if s.shape == t.shape() && s.data.len() == t.numel() => {
                    for (dst, &src) in t.data_mut().iter_mut().zip(&s.data) {
                        *dst = T::of(src);
                    }
                    seen += 1;
                }
                Some(s) => {
                    failure = Some(format!("{name}: stored shape {:?}, expected {:?}", s.shape, t.shape()))
                }
                None => failure = Some(format!("{name}: missing from checkpoint")),
            }
        });
        if let Some(msg) = failure {
            return Err(config_err(msg));
        }
        if seen != self.params.len() {
            return Err(config_err(format!(
                "checkpoint holds {} tensors, model has {seen}",
                self.params.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

