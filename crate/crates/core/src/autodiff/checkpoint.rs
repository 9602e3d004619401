//! Versioned parameter container: name -> (shape, flat f32 data) as JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const PARAM_FORMAT: &str = "param-container-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializable bag of named parameters. BTreeMap keeps the JSON stable
/// across runs, which the reproducibility tests compare byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamContainer {
    pub format: String,
    pub params: BTreeMap<String, ParamEntry>,
}

impl ParamContainer {
    pub fn from_named(named: &[(String, Tensor)]) -> Self {
        let mut params = BTreeMap::new();
        for (name, t) in named {
            params.insert(name.clone(), ParamEntry { shape: t.shape(), data: t.to_vec() });
        }
        ParamContainer { format: PARAM_FORMAT.to_string(), params }
    }

    /// Copy stored values into matching tensors, validating names and shapes.
    pub fn load_into(&self, named: &[(String, Tensor)]) -> Result<()> {
        if self.format != PARAM_FORMAT {
            return Err(Error::Data(format!("unsupported parameter format '{}'", self.format)));
        }
        for (name, t) in named {
            let entry = self
                .params
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing parameter '{}'", name)))?;
            if entry.shape != t.shape() {
                return Err(Error::Data(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    name, entry.shape, t.shape()
                )));
            }
            if entry.data.len() != t.numel() {
                return Err(Error::Data(format!("parameter '{}' has wrong element count", name)));
            }
            t.with_data_mut(|d| d.copy_from_slice(&entry.data));
        }
        let unknown: Vec<_> = self
            .params
            .keys()
            .filter(|k| !named.iter().any(|(n, _)| n == *k))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Data(format!("checkpoint has unknown parameters: {:?}", unknown)));
        }
        Ok(())
    }
}
