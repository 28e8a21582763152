//! Per-click credit from a frozen conversion model.
//!
//! Every subset of a journey's clicks is scored by how accurately the model
//! predicts the conversion labels when only those clicks are visible
//! (masked clicks keep their position but have their feature rows zeroed).
//! Those scores feed either a linear regression on the mask indicators or a
//! Shapley computation; the raw credit is then clipped at zero and
//! normalized to sum to one.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::journey::{encode_journey, CustomerJourney, EncodedJourney, JourneyError, Vocabulary};
use crate::model::{ModelError, ModelParams};
use crate::trainer::{hard_labels, predict_encoded, TrainError};

pub mod mask;
pub mod ols;
pub mod shapley;

pub use mask::{mask_powerset, sampled_masks, MaskMatrix};
pub use ols::{solve_weights, OlsSolution, Weighting};
pub use shapley::{shapley_exact, shapley_sampled};

/// Longest journey attributed by full enumeration.
pub const DEFAULT_EXACT_LIMIT: usize = 12;
/// Mask rows sampled for regression on longer journeys.
pub const DEFAULT_OLS_SAMPLE_ROWS: usize = 2048;
pub const DEFAULT_SHAPLEY_SAMPLES: usize = 2000;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("journey has no events")]
    NoEvents,
    #[error("{n} events exceed the exact-enumeration limit of {limit}; use a sampling method")]
    TooManyForExact { n: usize, limit: usize },
    #[error("{0} events exceed the supported maximum")]
    TooManyPlayers(usize),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("{rows} mask rows cannot determine {unknowns} coefficients")]
    Underdetermined { rows: usize, unknowns: usize },
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("unknown attribution method `{0}`")]
    UnknownMethod(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Journey(#[from] JourneyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Uniform least squares over the mask rows.
    Ols,
    /// Least squares weighted by the Shapley kernel.
    KernelOls,
    ShapleyExact,
    ShapleySampled,
    /// Regression over the full powerset up to the exact limit, permutation
    /// sampling above it.
    Auto,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::KernelOls => "kernel_ols",
            Method::ShapleyExact => "shapley_exact",
            Method::ShapleySampled => "shapley_sampled",
            Method::Auto => "auto",
        }
    }

    /// The concrete method used for a journey of `n` events.
    pub fn resolve(self, n: usize, exact_limit: usize) -> Method {
        match self {
            Method::Auto if n <= exact_limit => Method::Ols,
            Method::Auto => Method::ShapleySampled,
            m => m,
        }
    }
}

impl FromStr for Method {
    type Err = AttributionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ols" => Ok(Method::Ols),
            "kernel" | "kernel_ols" | "kernel-ols" => Ok(Method::KernelOls),
            "shapley-exact" | "shapley_exact" => Ok(Method::ShapleyExact),
            "shapley-sampled" | "shapley_sampled" => Ok(Method::ShapleySampled),
            "auto" => Ok(Method::Auto),
            other => Err(AttributionError::UnknownMethod(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionOptions {
    pub n_samples: usize,
    pub seed: u64,
    pub exact_limit: usize,
    pub ols_sample_rows: usize,
    /// Fit an intercept in the regression methods.
    pub intercept: bool,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SHAPLEY_SAMPLES,
            seed: 0,
            exact_limit: DEFAULT_EXACT_LIMIT,
            ols_sample_rows: DEFAULT_OLS_SAMPLE_ROWS,
            intercept: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Regression coefficients or Shapley values, one per click.
    pub raw_weights: Vec<f64>,
    pub intercept: f64,
    /// Clipped and normalized credit.
    pub weights: Vec<f64>,
    /// Method actually applied (never `auto`).
    pub method: Method,
    /// No click earned positive credit; weights are all zero.
    pub unattributed: bool,
}

/// Negatives go to zero and the rest is scaled to sum to one. Returns
/// `(weights, unattributed)`; a vector with no positive entry comes back
/// as zeros flagged unattributed.
pub fn clip_normalize(raw: &[f64]) -> (Vec<f64>, bool) {
    let clipped: Vec<f64> = raw
        .iter()
        .map(|&w| if w > 0.0 && w.is_finite() { w } else { 0.0 })
        .collect();
    let mass: f64 = clipped.iter().sum();
    if mass > 0.0 && mass.is_finite() {
        let mut weights: Vec<f64> = clipped.iter().map(|w| w / mass).collect();
        // Push the rounding residue onto the largest entry so the sum is 1.
        let residue = 1.0 - weights.iter().sum::<f64>();
        if residue != 0.0 {
            let top = weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("non-empty");
            weights[top] += residue;
        }
        (weights, false)
    } else {
        (vec![0.0; raw.len()], true)
    }
}

/// Accuracy of the model's hard predictions on the unmasked steps when the
/// masked steps' features are zeroed. The all-zeros mask scores 0.
pub fn masked_accuracy(
    params: &ModelParams,
    enc: &EncodedJourney,
    mask: &[u8],
) -> Result<f64, AttributionError> {
    if mask.len() != enc.len() {
        return Err(AttributionError::Length {
            expected: enc.len(),
            got: mask.len(),
        });
    }
    let kept = mask.iter().filter(|&&m| m != 0).count();
    if kept == 0 {
        return Ok(0.0);
    }
    let predicted = hard_labels(&predict_encoded(params, &enc.masked(mask))?);
    let correct = predicted
        .iter()
        .zip(&enc.labels)
        .zip(mask)
        .filter(|((p, l), &m)| m != 0 && p == l)
        .count();
    Ok(correct as f64 / kept as f64)
}

/// Coalition value cache over masked accuracies.
struct MaskedGame<'a> {
    params: &'a ModelParams,
    enc: &'a EncodedJourney,
    cache: HashMap<u64, f64>,
    error: Option<AttributionError>,
}

impl<'a> MaskedGame<'a> {
    fn new(params: &'a ModelParams, enc: &'a EncodedJourney) -> Self {
        Self {
            params,
            enc,
            cache: HashMap::new(),
            error: None,
        }
    }

    fn value(&mut self, bits: u64) -> f64 {
        if let Some(&v) = self.cache.get(&bits) {
            return v;
        }
        let mask = mask::bits_to_mask(bits, self.enc.len());
        match masked_accuracy(self.params, self.enc, &mask) {
            Ok(v) => {
                self.cache.insert(bits, v);
                v
            }
            Err(e) => {
                self.error.get_or_insert(e);
                0.0
            }
        }
    }

    fn finish<T>(self, out: T) -> Result<T, AttributionError> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

fn regression(
    params: &ModelParams,
    enc: &EncodedJourney,
    weighting: Weighting,
    opts: &AttributionOptions,
) -> Result<OlsSolution, AttributionError> {
    let n = enc.len();
    let masks = if n <= opts.exact_limit {
        mask_powerset(n, opts.exact_limit)?
    } else {
        sampled_masks(n, opts.ols_sample_rows, opts.seed)?
    };
    let acc: Result<Vec<f64>, AttributionError> = masks
        .rows
        .iter()
        .map(|m| masked_accuracy(params, enc, m))
        .collect();
    solve_weights(&masks, &acc?, weighting, opts.intercept)
}

/// Attributes an already encoded journey.
pub fn attribute_encoded(
    params: &ModelParams,
    enc: &EncodedJourney,
    method: Method,
    opts: &AttributionOptions,
) -> Result<AttributionResult, AttributionError> {
    let n = enc.len();
    if n == 0 {
        return Err(AttributionError::NoEvents);
    }
    let method = method.resolve(n, opts.exact_limit);
    let (raw_weights, intercept) = match method {
        Method::Ols | Method::KernelOls => {
            let weighting = if method == Method::Ols {
                Weighting::Uniform
            } else {
                Weighting::ShapleyKernel
            };
            let sol = regression(params, enc, weighting, opts)?;
            (sol.coefficients, sol.intercept)
        }
        Method::ShapleyExact => {
            let mut game = MaskedGame::new(params, enc);
            let phi = shapley_exact(n, opts.exact_limit, |s| game.value(s))?;
            let baseline = game.value(0);
            (game.finish(phi)?, baseline)
        }
        Method::ShapleySampled => {
            let mut game = MaskedGame::new(params, enc);
            let phi = shapley_sampled(n, opts.n_samples, opts.seed, |s| game.value(s))?;
            let baseline = game.value(0);
            (game.finish(phi)?, baseline)
        }
        Method::Auto => unreachable!("resolved above"),
    };
    let (weights, unattributed) = clip_normalize(&raw_weights);
    Ok(AttributionResult {
        raw_weights,
        intercept,
        weights,
        method,
        unattributed,
    })
}

pub fn attribute_journey(
    params: &ModelParams,
    vocab: &Vocabulary,
    journey: &CustomerJourney,
    method: Method,
    opts: &AttributionOptions,
) -> Result<AttributionResult, AttributionError> {
    let enc = encode_journey(journey, vocab, params.max_seq_len)?;
    attribute_encoded(params, &enc, method, opts)
}

/// One line of the attribution JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub user_id: String,
    pub method: Method,
    pub intercept: f64,
    pub raw_weights: Vec<f64>,
    pub weights: Vec<f64>,
    pub unattributed: bool,
    pub channels: Vec<String>,
}

impl AttributionRecord {
    pub fn new(journey: &CustomerJourney, result: &AttributionResult) -> Self {
        Self {
            user_id: journey.user_id.clone(),
            method: result.method,
            intercept: result.intercept,
            raw_weights: result.raw_weights.clone(),
            weights: result.weights.clone(),
            unattributed: result.unattributed,
            channels: journey.channels().map(str::to_string).collect(),
        }
    }

    pub fn result(&self) -> AttributionResult {
        AttributionResult {
            raw_weights: self.raw_weights.clone(),
            intercept: self.intercept,
            weights: self.weights.clone(),
            method: self.method,
            unattributed: self.unattributed,
        }
    }
}

/// Writes one JSON record per line.
pub fn save_records(path: &Path, records: &[AttributionRecord]) -> Result<(), AttributionError> {
    let io = |source| AttributionError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for record in records {
        let line = serde_json::to_string(record).map_err(|source| AttributionError::Parse {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads records written by [`save_records`]; blank lines are skipped.
pub fn load_records(path: &Path) -> Result<Vec<AttributionRecord>, AttributionError> {
    let io = |source| AttributionError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| AttributionError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        let (w, flag) = clip_normalize(&[0.5, -0.2, 0.3]);
        assert!(!flag);
        assert!((w[0] - 0.625).abs() < 1e-15 && w[1] == 0.0 && (w[2] - 0.375).abs() < 1e-15);
        assert_eq!(clip_normalize(&[-0.1, -0.2]), (vec![0.0, 0.0], true));
        assert_eq!(clip_normalize(&[1.0]), (vec![1.0], false));
        assert_eq!(clip_normalize(&[0.0, 0.0]), (vec![0.0, 0.0], true));
    }

    #[test]
    fn method_names() {
        for m in ["ols", "kernel", "shapley-exact", "shapley-sampled", "auto"] {
            assert!(m.parse::<Method>().is_ok());
        }
        assert!("lime".parse::<Method>().is_err());
        assert_eq!(Method::Auto.resolve(12, 12), Method::Ols);
        assert_eq!(Method::Auto.resolve(13, 12), Method::ShapleySampled);
        assert_eq!(Method::KernelOls.resolve(40, 12), Method::KernelOls);
        assert_eq!(serde_json::to_string(&Method::KernelOls).unwrap(), "\"kernel_ols\"");
    }

    #[test]
    fn record_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attr.jsonl");
        let record = AttributionRecord {
            user_id: "u1".into(),
            method: Method::Ols,
            intercept: 0.1,
            raw_weights: vec![0.3, -0.1],
            weights: vec![1.0, 0.0],
            unattributed: false,
            channels: vec!["A".into(), "B".into()],
        };
        save_records(&path, &[record.clone(), record.clone()]).unwrap();
        assert_eq!(load_records(&path).unwrap(), vec![record.clone(), record]);
        std::fs::write(&path, "{\n").unwrap();
        assert!(matches!(load_records(&path), Err(AttributionError::Parse { line: 1, .. })));
    }
}
