//! Flat JSON checkpoints: `{name -> {shape, data}}` plus config and
//! optimizer state.

use std::collections::BTreeMap;
use std::path::Path;

use seqintent_tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use super::{Adam, LossTrace};
use crate::config::{Arch, Config};
use crate::error::{Error, Result};
use crate::model::{Model, Network};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: String,
    pub schema_hash: String,
    pub config_hash: String,
    pub variant: Arch,
    pub epochs_completed: usize,
    pub config: Config,
    pub params: BTreeMap<String, StoredTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Adam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<LossTrace>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epochs_completed: usize) -> Self {
        let config = model.config().clone();
        let params = model
            .params
            .iter()
            .map(|(_, name, t)| {
                (
                    name.to_string(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION.to_string(),
            schema_hash: config.schema_hash(),
            config_hash: config.hash(),
            variant: config.variant.arch,
            epochs_completed,
            config,
            params,
            optimizer: None,
            trace: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Parses and checks the stored hashes against the stored config.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::SchemaMismatch {
                expected: format!("format {FORMAT_VERSION}"),
                found: format!("format {}", ckpt.format_version),
                fields: vec!["format_version".into()],
            });
        }
        let recomputed = ckpt.config.schema_hash();
        if recomputed != ckpt.schema_hash {
            return Err(Error::SchemaMismatch {
                expected: recomputed,
                found: ckpt.schema_hash,
                fields: vec!["schema_hash".into()],
            });
        }
        Ok(ckpt)
    }

    /// Refuses a checkpoint whose schema differs from `expected`.
    pub fn ensure_schema(&self, expected: &Config) -> Result<()> {
        let want = expected.schema_hash();
        if want != self.schema_hash {
            return Err(Error::SchemaMismatch {
                expected: want,
                found: self.schema_hash.clone(),
                fields: self.config.schema_diff(expected),
            });
        }
        Ok(())
    }

    /// Rebuilds the model, validating every tensor against the shapes the
    /// stored config implies.
    pub fn to_model(&self) -> Result<Model> {
        let net = Network::new(&self.config)?;
        let template = net.init_params(0)?;
        let mut params = ParamSet::new();
        for (_, name, t) in template.iter() {
            let stored = self.params.get(name).ok_or_else(|| {
                Error::validation("params", format!("checkpoint lacks parameter `{name}`"))
            })?;
            if stored.shape != t.shape() {
                return Err(Error::validation(
                    "params",
                    format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        stored.shape,
                        t.shape()
                    ),
                ));
            }
            let tensor = Tensor::new(stored.shape.clone(), stored.data.clone())
                .map_err(|e| Error::validation("params", format!("`{name}`: {e}")))?;
            if !tensor.all_finite() {
                return Err(Error::validation(
                    "params",
                    format!("`{name}` is not finite"),
                ));
            }
            params.insert(name, tensor)?;
        }
        if let Some(extra) = self.params.keys().find(|k| template.by_name(k).is_none()) {
            return Err(Error::validation(
                "params",
                format!("unexpected parameter `{extra}`"),
            ));
        }
        Ok(Model { net, params })
    }
}
