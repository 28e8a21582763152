//! Phased LSTM conversion model: time gate, cell, layer normalization,
//! dropout, the stacked sequence pass and hand-derived gradients.

use std::path::PathBuf;

use thiserror::Error;

pub mod cell;
pub mod checkpoint;
pub mod gate;
pub mod norm;
pub mod params;
pub mod sequence;

pub use cell::{cell_forward, CellCache};
pub use checkpoint::Checkpoint;
pub use gate::{time_gate, GatePhase};
pub use norm::{dropout, layer_norm, LAYER_NORM_EPS};
pub use params::{Hyperparams, InitConfig, ModelParams, PhasedLstmLayerParams, TensorKind, N_CLASSES};
pub use sequence::{backward_sequence, forward_sequence, infer_logits, ForwardTrace};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("trace does not match this model: {0}")]
    StaleTrace(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
