//! JSON checkpoints: vocabulary, architecture and every tensor as a flat
//! row-major array.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Hyperparams, ModelParams};
use super::ModelError;
use crate::journey::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vocab: Vocabulary,
    pub hyperparams: Hyperparams,
    pub tensors: BTreeMap<String, TensorData>,
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, vocab: &Vocabulary, rng_seed: u64) -> Self {
        let tensors = params
            .tensors()
            .into_iter()
            .map(|t| {
                (
                    t.name,
                    TensorData {
                        shape: t.shape,
                        data: t.data.to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            vocab: vocab.clone(),
            hyperparams: params.hyperparams(),
            tensors,
            rng_seed,
        }
    }

    /// Rebuilds the parameters, checking every tensor against the
    /// architecture in `hyperparams`.
    pub fn params(&self) -> Result<ModelParams, ModelError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        if self.hyperparams.input_dim != self.vocab.dim() {
            return Err(ModelError::Checkpoint(format!(
                "input width {} does not match vocabulary width {}",
                self.hyperparams.input_dim,
                self.vocab.dim()
            )));
        }
        let mut params = ModelParams::zeros_for(&self.hyperparams)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        if expected.len() != self.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), dst) in expected.iter().zip(params.tensors_mut()) {
            let src = self
                .tensors
                .get(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor `{name}`")))?;
            if &src.shape != shape || src.data.len() != dst.data.len() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape, shape
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }
}
