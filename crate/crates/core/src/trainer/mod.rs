//! Mini-batch training, prediction and ROC evaluation.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::journey::{encode_journey, CustomerJourney, EncodedJourney, JourneyError, Vocabulary};
use crate::model::{
    backward_sequence, forward_sequence, infer_logits, InitConfig, ModelError, ModelParams,
    TensorKind,
};

pub mod loss;
pub mod roc;

pub use loss::{conversion_probability, loss, loss_and_grad};
pub use roc::{auc, roc_curve, RocPoint};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("journey {index}: {source}")]
    Encode {
        index: usize,
        #[source]
        source: JourneyError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no steps to score")]
    NoSteps,
    #[error("evaluation impossible: {0}")]
    Evaluation(String),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum { momentum: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout_p: f64,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub grad_clip_norm: f64,
    /// Keep gate periods, shifts and open ratios at their initial values.
    pub freeze_timing: bool,
    pub max_seq_len: usize,
    pub validation_fraction: f64,
    /// Initial open ratio of every time gate.
    pub r_on_init: f64,
    /// Leak rate of closed gates during training.
    pub alpha: f64,
}

impl TrainConfig {
    /// Published settings: 1024 units, batch 128, 300 epochs.
    pub fn paper() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 0.01,
            epochs: 300,
            dropout_p: 0.5,
            hidden_size: 1024,
            n_layers: 2,
            seed: 0,
            optimizer: Optimizer::Sgd,
            grad_clip_norm: 5.0,
            freeze_timing: false,
            max_seq_len: crate::journey::DEFAULT_MAX_SEQ_LEN,
            validation_fraction: 0.1,
            r_on_init: 0.05,
            alpha: 1e-3,
        }
    }

    /// Laptop-scale settings.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            hidden_size: 64,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 || self.hidden_size == 0 || self.n_layers == 0 {
            return fail("batch_size, epochs, hidden_size and n_layers must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.grad_clip_norm > 0.0) {
            return fail("grad_clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation_fraction must lie in [0, 1)");
        }
        if !(self.r_on_init > 0.0 && self.r_on_init < 1.0) {
            return fail("r_on_init must lie in (0, 1)");
        }
        if let Optimizer::SgdMomentum { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return fail("momentum must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when the validation split is empty.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Row 0 is the untrained model.
    pub history: Vec<EpochLoss>,
}

fn encode_all(
    journeys: &[CustomerJourney],
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<EncodedJourney>, TrainError> {
    journeys
        .iter()
        .enumerate()
        .map(|(index, j)| {
            encode_journey(j, vocab, max_seq_len).map_err(|source| TrainError::Encode { index, source })
        })
        .collect()
}

fn all_steps(n: usize) -> Vec<u8> {
    vec![1; n]
}

/// Mean per-journey inference loss.
pub fn dataset_loss(params: &ModelParams, data: &[EncodedJourney]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let losses: Result<Vec<f64>, TrainError> = data
        .par_iter()
        .map(|enc| {
            let logits = infer_logits(enc, params)?;
            loss(logits.view(), &enc.labels, &all_steps(enc.len()))
        })
        .collect();
    Ok(losses?.iter().sum::<f64>() / data.len() as f64)
}

/// Seed for the dropout stream of one journey within one update, so batch
/// members can be processed in any order.
fn stream_seed(seed: u64, epoch: usize, batch: usize, member: usize) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (batch as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (member as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and parameter gradient of one journey.
pub fn journey_gradient(
    params: &ModelParams,
    enc: &EncodedJourney,
    training: bool,
    rng_seed: u64,
) -> Result<(f64, ModelParams), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (logits, trace) = forward_sequence(enc, params, training, &mut rng)?;
    let (l, grad_logits) = loss_and_grad(logits.view(), &enc.labels, &all_steps(enc.len()))?;
    let grad = backward_sequence(params, &trace, &grad_logits)?;
    Ok((l, grad))
}

/// Batches of equal-length journeys, shuffled.
fn length_buckets(indices: &[usize], data: &[EncodedJourney], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let max_len = indices.iter().map(|&i| data[i].len()).max().unwrap_or(0);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); max_len + 1];
    for &i in indices {
        buckets[data[i].len()].push(i);
    }
    let mut batches = Vec::new();
    for mut bucket in buckets {
        bucket.shuffle(rng);
        batches.extend(bucket.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Splits journey indices 90/10 (or per `validation_fraction`) with a seeded
/// shuffle. Whole journeys go to one side.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Trains a fresh model on `dataset`.
///
/// Everything random (split, initialization, batch order, dropout) derives
/// from `cfg.seed`, so a fixed seed reproduces the checkpoint bit for bit.
pub fn train(
    dataset: &[CustomerJourney],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress(dataset, vocab, cfg, |_| {})
}

pub fn train_with_progress(
    dataset: &[CustomerJourney],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let encoded = encode_all(dataset, vocab, cfg.max_seq_len)?;
    let (train_idx, val_idx) = split_indices(encoded.len(), cfg.validation_fraction, cfg.seed);
    let train_set: Vec<EncodedJourney> = train_idx.iter().map(|&i| encoded[i].clone()).collect();
    let val_set: Vec<EncodedJourney> = val_idx.iter().map(|&i| encoded[i].clone()).collect();

    let span = encoded
        .iter()
        .filter_map(|e| e.times.last().copied())
        .fold(1.0, f64::max);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut params = ModelParams::init(
        &InitConfig {
            input_dim: vocab.dim(),
            hidden_size: cfg.hidden_size,
            n_layers: cfg.n_layers,
            dropout_p: cfg.dropout_p,
            max_seq_len: cfg.max_seq_len,
            time_span_hours: span,
            r_on: cfg.r_on_init,
            alpha: cfg.alpha,
        },
        &mut init_rng,
    )?;

    let val_loss = |p: &ModelParams| -> Result<Option<f64>, TrainError> {
        if val_set.is_empty() {
            Ok(None)
        } else {
            dataset_loss(p, &val_set).map(Some)
        }
    };

    let mut history = vec![EpochLoss {
        epoch: 0,
        train_loss: dataset_loss(&params, &train_set)?,
        val_loss: val_loss(&params)?,
    }];
    on_epoch(&history[0]);

    let mut velocity = params.zeros_like();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let all_train: Vec<usize> = (0..train_set.len()).collect();
    let mut global_step = 0;
    for epoch in 1..=cfg.epochs {
        let batches = length_buckets(&all_train, &train_set, cfg.batch_size, &mut order_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            global_step += 1;
            let results: Result<Vec<(f64, ModelParams)>, TrainError> = batch
                .par_iter()
                .enumerate()
                .map(|(m, &i)| {
                    journey_gradient(&params, &train_set[i], true, stream_seed(cfg.seed, epoch, b, m))
                })
                .collect();
            let results = results?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = params.zeros_like();
            let mut batch_loss = 0.0;
            for (l, g) in &results {
                batch_loss += l;
                grad.add_scaled(scale, g);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: global_step,
                });
            }
            epoch_loss += batch_loss;

            if cfg.freeze_timing {
                for t in grad.tensors_mut() {
                    if t.kind == TensorKind::Timing {
                        t.data.fill(0.0);
                    }
                }
            }
            let norm = grad.global_norm();
            if !norm.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: global_step,
                });
            }
            if norm > cfg.grad_clip_norm {
                grad.scale(cfg.grad_clip_norm / norm);
            }
            match cfg.optimizer {
                Optimizer::Sgd => params.add_scaled(-cfg.learning_rate, &grad),
                Optimizer::SgdMomentum { momentum } => {
                    velocity.scale(momentum);
                    velocity.add_scaled(1.0, &grad);
                    params.add_scaled(-cfg.learning_rate, &velocity);
                }
            }
            params.clamp_timing();
        }
        let row = EpochLoss {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss: val_loss(&params)?,
        };
        if !row.train_loss.is_finite() || row.val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(TrainError::Diverged {
                epoch,
                step: global_step,
            });
        }
        on_epoch(&row);
        history.push(row);
    }
    Ok(TrainOutcome { params, history })
}

/// Per-step conversion probabilities of an encoded journey.
pub fn predict_encoded(params: &ModelParams, enc: &EncodedJourney) -> Result<Vec<f64>, TrainError> {
    let logits: Array2<f64> = infer_logits(enc, params)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| conversion_probability(r[0], r[1]))
        .collect())
}

/// Per-step conversion probabilities; tokens must be in the checkpoint's
/// vocabulary.
pub fn predict(
    params: &ModelParams,
    vocab: &Vocabulary,
    journey: &CustomerJourney,
) -> Result<Vec<f64>, TrainError> {
    let enc = encode_journey(journey, vocab, params.max_seq_len)
        .map_err(|source| TrainError::Encode { index: 0, source })?;
    predict_encoded(params, &enc)
}

/// Hard labels at the 0.5 threshold.
pub fn hard_labels(probabilities: &[f64]) -> Vec<u8> {
    probabilities.iter().map(|&p| u8::from(p >= 0.5)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub roc_points: Vec<RocPoint>,
    pub per_step_accuracy: f64,
}

/// Step-level ROC over every click of every journey; conversion clicks are
/// the positives.
pub fn evaluate_roc(
    params: &ModelParams,
    vocab: &Vocabulary,
    dataset: &[CustomerJourney],
) -> Result<EvalResult, TrainError> {
    let encoded = encode_all(dataset, vocab, params.max_seq_len)?;
    evaluate_encoded(params, &encoded)
}

pub fn evaluate_encoded(params: &ModelParams, encoded: &[EncodedJourney]) -> Result<EvalResult, TrainError> {
    let per_journey: Result<Vec<Vec<f64>>, TrainError> =
        encoded.par_iter().map(|enc| predict_encoded(params, enc)).collect();
    let scores: Vec<f64> = per_journey?.into_iter().flatten().collect();
    let labels: Vec<bool> = encoded
        .iter()
        .flat_map(|e| e.labels.iter().map(|&l| l == 1))
        .collect();
    let auc = roc::auc(&scores, &labels)?;
    let roc_points = roc::roc_curve(&scores, &labels)?;
    let correct = scores
        .iter()
        .zip(&labels)
        .filter(|(&s, &l)| (s >= 0.5) == l)
        .count();
    Ok(EvalResult {
        auc,
        roc_points,
        per_step_accuracy: correct as f64 / labels.len() as f64,
    })
}

pub fn write_loss_history(path: &Path, history: &[EpochLoss]) -> Result<(), TrainError> {
    let csv_err = |source| TrainError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "train_loss", "val_loss"]).map_err(csv_err)?;
    for row in history {
        w.write_record([
            row.epoch.to_string(),
            row.train_loss.to_string(),
            row.val_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<(), TrainError> {
    let csv_err = |source| TrainError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["threshold", "fpr", "tpr"]).map_err(csv_err)?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::journey::{generate_synthetic, GeneratorConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden_size: 6,
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::desk()
        }
    }

    fn data(n: usize, seed: u64) -> (Vocabulary, Vec<CustomerJourney>) {
        let cfg = GeneratorConfig {
            n_journeys: n,
            max_len: 5,
            include_nonconverted: true,
            ..Default::default()
        };
        generate_synthetic(&cfg, seed).unwrap()
    }

    #[test]
    fn presets() {
        let p = TrainConfig::preset("paper").unwrap();
        assert_eq!(
            (p.batch_size, p.learning_rate, p.epochs, p.dropout_p, p.hidden_size, p.n_layers, p.max_seq_len),
            (128, 0.01, 300, 0.5, 1024, 2, 32)
        );
        let d = TrainConfig::preset("desk").unwrap();
        assert_eq!((d.hidden_size, d.batch_size, d.epochs), (64, 32, 30));
        assert!(TrainConfig::preset("huge").is_none());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad = TrainConfig {
            dropout_p: 1.0,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_keeps_every_journey_once() {
        let (tr, va) = split_indices(100, 0.1, 3);
        assert_eq!((tr.len(), va.len()), (90, 10));
        let mut all: Vec<usize> = tr.into_iter().chain(va).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(1, 0.1, 0).1.len(), 0);
    }

    #[test]
    fn training_is_deterministic() {
        let (vocab, journeys) = data(60, 1);
        let a = train(&journeys, &vocab, &tiny_cfg()).unwrap();
        let b = train(&journeys, &vocab, &tiny_cfg()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (vocab, _) = data(1, 1);
        assert!(matches!(train(&[], &vocab, &tiny_cfg()), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn divergence_is_reported() {
        let (vocab, journeys) = data(40, 2);
        let cfg = TrainConfig {
            learning_rate: f64::MAX,
            grad_clip_norm: f64::MAX,
            ..tiny_cfg()
        };
        match train(&journeys, &vocab, &cfg) {
            Err(TrainError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            Err(TrainError::Model(ModelError::NonFinite(_))) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
        }
    }

    #[test]
    fn predictions_are_probabilities() {
        let (vocab, journeys) = data(20, 4);
        let out = train(&journeys, &vocab, &tiny_cfg()).unwrap();
        for j in &journeys {
            let p = predict(&out.params, &vocab, j).unwrap();
            assert_eq!(p.len(), j.len());
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(p, predict(&out.params, &vocab, j).unwrap());
        }
        let foreign = CustomerJourney::new(
            "x",
            vec![crate::journey::ClickEvent::new("nope", "campaign_0", 0)],
            false,
            0.0,
        )
        .unwrap();
        assert!(predict(&out.params, &vocab, &foreign).is_err());
    }
}
