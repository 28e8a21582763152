//! Multi-touch attribution with a phased LSTM conversion model.
//!
//! The pipeline has two stages. A stacked phased LSTM learns to predict, at
//! every click of a customer journey, whether that click converts. The
//! frozen model is then probed with masked journeys: each subset of clicks
//! is scored by prediction accuracy, and a linear regression or Shapley
//! computation over those scores yields per-click credit. Credit is
//! aggregated into per-channel GMV and compared with last-click allocation.

pub mod attribution;
pub mod journey;
pub mod model;
pub mod report;
pub mod trainer;

pub use journey::{ClickEvent, CustomerJourney, EncodedJourney, Vocabulary};
pub use model::{Checkpoint, ModelParams};
