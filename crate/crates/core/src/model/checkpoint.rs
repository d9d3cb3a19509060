//! Versioned checkpoint container.
//!
//! JSON document holding the model configuration, the data settings needed
//! to rebuild inputs, and every tensor as a shape plus base64 little-endian
//! `f64` payload (bit-exact).

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forward::Model;
use super::params::validate_params;
use crate::data::{RewardSpec, SequenceConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Document {
    format_version: u32,
    model: ModelConfig,
    #[serde(default)]
    sequence: Option<SequenceConfig>,
    #[serde(default)]
    reward: Option<RewardSpec>,
    tensors: Vec<StoredTensor>,
}

/// A model plus the data settings it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub sequence: Option<SequenceConfig>,
    pub reward: Option<RewardSpec>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .model
            .params
            .iter()
            .map(|(name, t)| StoredTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64le".into(),
                data: STANDARD.encode(
                    t.values()
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect::<Vec<u8>>(),
                ),
            })
            .collect();
        let doc = Document {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.model.config.clone(),
            sequence: self.sequence.clone(),
            reward: self.reward.clone(),
            tensors,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text)?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        doc.model.validate()?;
        let mut params = ParamSet::new();
        for st in doc.tensors {
            if st.dtype != "f64le" {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has unsupported dtype {}",
                    st.name, st.dtype
                )));
            }
            let bytes = STANDARD
                .decode(&st.data)
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", st.name)))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Checkpoint(format!("tensor {} payload truncated", st.name)));
            }
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(st.shape, values)
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", st.name)))?;
            params.insert(st.name, tensor);
        }
        validate_params(&doc.model, &params)?;
        Ok(Self {
            model: Model {
                config: doc.model,
                params,
            },
            sequence: doc.sequence,
            reward: doc.reward,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads and requires the stored model to match `expected` exactly.
    pub fn load_compatible(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        validate_params(expected, &ckpt.model.params)?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            hidden: 4,
            fused_dim: 3,
            seq_len: 2,
            channels: 2,
            ..ModelConfig::default()
        };
        Checkpoint {
            model: Model::init(cfg, 9).unwrap(),
            sequence: None,
            reward: Some(RewardSpec::default()),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = small();
        let text = c.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn rejects_version_and_shape_mismatch() {
        let text = small().to_json().unwrap();
        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            Checkpoint::from_json(&bumped),
            Err(Error::Checkpoint(_))
        ));

        let mut other = small().model.config;
        other.hidden = 6;
        let dir = std::env::temp_dir().join(format!("mtorl-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        small().save(&path).unwrap();
        let err = Checkpoint::load_compatible(&path, &other)
            .unwrap_err()
            .to_string();
        assert!(err.contains("tensor"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
