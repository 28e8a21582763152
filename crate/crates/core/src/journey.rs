//! Customer journeys: the data model, event encoding, JSONL persistence,
//! stream splitting and a seeded synthetic generator.
//!
//! A journey is a time-ordered run of ad clicks for one user that either ends
//! in a conversion (the final click carries label 1) or does not (all labels
//! 0). Timestamps are stored raw, in seconds; the elapsed-time feature is
//! derived in hours at encode time.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest journey the model accepts.
pub const DEFAULT_MAX_SEQ_LEN: usize = 32;

const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Error)]
pub enum JourneyError {
    #[error("events are not sorted by timestamp (position {position})")]
    Unsorted { position: usize },
    #[error("conversions are not sorted by timestamp (position {position})")]
    UnsortedConversions { position: usize },
    #[error("unknown {kind} token `{token}`")]
    UnknownToken { kind: &'static str, token: String },
    #[error("journey has {len} events, longer than the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("journey has no events")]
    Empty,
    #[error("invalid field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<JourneyError>,
    },
    #[error("line {line}: malformed JSON: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = JourneyError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> JourneyError + '_ {
    move |source| JourneyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One ad click.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub channel: String,
    pub campaign: String,
    /// Seconds since the epoch.
    #[serde(rename = "ts")]
    pub timestamp: u64,
}

impl ClickEvent {
    pub fn new(channel: impl Into<String>, campaign: impl Into<String>, timestamp: u64) -> Self {
        Self {
            channel: channel.into(),
            campaign: campaign.into(),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerJourney {
    pub user_id: String,
    pub events: Vec<ClickEvent>,
    pub converted: bool,
    pub gmv: f64,
}

impl CustomerJourney {
    /// Builds a journey and checks its invariants.
    pub fn new(
        user_id: impl Into<String>,
        events: Vec<ClickEvent>,
        converted: bool,
        gmv: f64,
    ) -> Result<Self> {
        let journey = Self {
            user_id: user_id.into(),
            events,
            converted,
            gmv,
        };
        journey.validate()?;
        Ok(journey)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Per-event conversion labels: a single 1 on the final click of a
    /// converted journey, zeros everywhere else.
    pub fn labels(&self) -> Vec<u8> {
        let mut labels = vec![0; self.events.len()];
        if self.converted {
            if let Some(last) = labels.last_mut() {
                *last = 1;
            }
        }
        labels
    }

    pub fn channels(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.channel.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_id.is_empty() {
            return Err(JourneyError::Invalid {
                field: "user_id",
                reason: "empty".into(),
            });
        }
        if self.events.is_empty() {
            return Err(JourneyError::Empty);
        }
        for event in &self.events {
            if event.channel.is_empty() {
                return Err(JourneyError::Invalid {
                    field: "channel",
                    reason: "empty token".into(),
                });
            }
            if event.campaign.is_empty() {
                return Err(JourneyError::Invalid {
                    field: "campaign",
                    reason: "empty token".into(),
                });
            }
        }
        check_sorted(&self.events)?;
        if !self.gmv.is_finite() || self.gmv < 0.0 {
            return Err(JourneyError::Invalid {
                field: "gmv",
                reason: format!("must be a finite non-negative number, got {}", self.gmv),
            });
        }
        if self.gmv > 0.0 && !self.converted {
            return Err(JourneyError::Invalid {
                field: "gmv",
                reason: "positive gmv on a non-converted journey".into(),
            });
        }
        Ok(())
    }
}

fn check_sorted(events: &[ClickEvent]) -> Result<()> {
    match events
        .windows(2)
        .position(|w| w[1].timestamp < w[0].timestamp)
    {
        Some(i) => Err(JourneyError::Unsorted { position: i + 1 }),
        None => Ok(()),
    }
}

/// Channel and campaign token tables.
///
/// Encoded rows are laid out as `[channel one-hot | campaign one-hot | Δt]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    channels: Vec<String>,
    campaigns: Vec<String>,
    channel_index: HashMap<String, usize>,
    campaign_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    channels: Vec<String>,
    campaigns: Vec<String>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = JourneyError;

    fn try_from(file: VocabularyFile) -> Result<Self> {
        Vocabulary::new(file.channels, file.campaigns)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(vocab: Vocabulary) -> Self {
        Self {
            channels: vocab.channels,
            campaigns: vocab.campaigns,
        }
    }
}

fn index_tokens(kind: &str, tokens: &[String]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(tokens.len());
    for (i, token) in tokens.iter().enumerate() {
        if token.is_empty() {
            return Err(JourneyError::Vocabulary(format!("empty {kind} token")));
        }
        if index.insert(token.clone(), i).is_some() {
            return Err(JourneyError::Vocabulary(format!(
                "duplicate {kind} token `{token}`"
            )));
        }
    }
    Ok(index)
}

impl Vocabulary {
    pub fn new(channels: Vec<String>, campaigns: Vec<String>) -> Result<Self> {
        if channels.is_empty() || campaigns.is_empty() {
            return Err(JourneyError::Vocabulary(
                "needs at least one channel and one campaign".into(),
            ));
        }
        let channel_index = index_tokens("channel", &channels)?;
        let campaign_index = index_tokens("campaign", &campaigns)?;
        Ok(Self {
            channels,
            campaigns,
            channel_index,
            campaign_index,
        })
    }

    /// Collects every token seen in `journeys`, sorted lexicographically.
    pub fn from_journeys(journeys: &[CustomerJourney]) -> Result<Self> {
        let mut channels: Vec<String> = journeys
            .iter()
            .flat_map(|j| j.events.iter().map(|e| e.channel.clone()))
            .collect();
        let mut campaigns: Vec<String> = journeys
            .iter()
            .flat_map(|j| j.events.iter().map(|e| e.campaign.clone()))
            .collect();
        channels.sort();
        channels.dedup();
        campaigns.sort();
        campaigns.dedup();
        Self::new(channels, campaigns)
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn campaigns(&self) -> &[String] {
        &self.campaigns
    }

    pub fn channel_id(&self, token: &str) -> Result<usize> {
        self.channel_index
            .get(token)
            .copied()
            .ok_or_else(|| JourneyError::UnknownToken {
                kind: "channel",
                token: token.to_string(),
            })
    }

    pub fn campaign_id(&self, token: &str) -> Result<usize> {
        self.campaign_index
            .get(token)
            .copied()
            .ok_or_else(|| JourneyError::UnknownToken {
                kind: "campaign",
                token: token.to_string(),
            })
    }

    /// Width of an encoded feature row.
    pub fn dim(&self) -> usize {
        self.channels.len() + self.campaigns.len() + 1
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|source| JourneyError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("vocabulary serializes");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }
}

/// Model-ready view of a journey.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedJourney {
    /// `seq_len × dim` rows of `[channel one-hot | campaign one-hot | Δt]`.
    pub features: Array2<f64>,
    /// Hours since the first click; also the time input of the phased gate.
    pub times: Vec<f64>,
    pub labels: Vec<u8>,
}

impl EncodedJourney {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Copy with the feature rows of masked-out events (mask 0) zeroed.
    /// Positions and the gate's time input are kept.
    pub fn masked(&self, mask: &[u8]) -> EncodedJourney {
        let mut out = self.clone();
        for (mut row, &keep) in out.features.rows_mut().into_iter().zip(mask) {
            if keep == 0 {
                row.fill(0.0);
            }
        }
        out
    }
}

pub fn encode_journey(
    journey: &CustomerJourney,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<EncodedJourney> {
    let n = journey.events.len();
    if n == 0 {
        return Err(JourneyError::Empty);
    }
    if n > max_seq_len {
        return Err(JourneyError::TooLong {
            len: n,
            max: max_seq_len,
        });
    }
    check_sorted(&journey.events)?;

    let n_channels = vocab.channels().len();
    let n_campaigns = vocab.campaigns().len();
    let mut features = Array2::zeros((n, vocab.dim()));
    let mut times = Vec::with_capacity(n);
    let origin = journey.events[0].timestamp;
    for (i, event) in journey.events.iter().enumerate() {
        let channel = vocab.channel_id(&event.channel)?;
        let campaign = vocab.campaign_id(&event.campaign)?;
        let dt = (event.timestamp - origin) as f64 / SECONDS_PER_HOUR;
        features[[i, channel]] = 1.0;
        features[[i, n_channels + campaign]] = 1.0;
        features[[i, n_channels + n_campaigns]] = dt;
        times.push(dt);
    }
    Ok(EncodedJourney {
        features,
        times,
        labels: journey.labels(),
    })
}

/// Cuts one user's click stream into journeys at each conversion.
///
/// A conversion closes a journey holding every click since the previous cut
/// up to and including the last click at or before the conversion time.
/// Clicks after the final conversion form one non-converted journey. A
/// conversion with no new clicks since the previous cut has nothing to
/// attribute and is dropped.
pub fn split_stream(
    user_id: &str,
    events: &[ClickEvent],
    conversions: &[(u64, f64)],
) -> Result<Vec<CustomerJourney>> {
    check_sorted(events)?;
    if let Some(i) = conversions.windows(2).position(|w| w[1].0 < w[0].0) {
        return Err(JourneyError::UnsortedConversions { position: i + 1 });
    }
    let mut journeys = Vec::new();
    let mut start = 0;
    for &(ts, gmv) in conversions {
        let end = start + events[start..].partition_point(|e| e.timestamp <= ts);
        if end == start {
            continue;
        }
        journeys.push(CustomerJourney::new(
            user_id,
            events[start..end].to_vec(),
            true,
            gmv,
        )?);
        start = end;
    }
    if start < events.len() {
        journeys.push(CustomerJourney::new(
            user_id,
            events[start..].to_vec(),
            false,
            0.0,
        )?);
    }
    Ok(journeys)
}

pub fn load_journeys(path: &Path) -> Result<Vec<CustomerJourney>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut journeys = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let journey: CustomerJourney =
            serde_json::from_str(&line).map_err(|source| JourneyError::Parse {
                line: line_no,
                source,
            })?;
        journey.validate().map_err(|e| JourneyError::Line {
            line: line_no,
            source: Box::new(e),
        })?;
        journeys.push(journey);
    }
    Ok(journeys)
}

pub fn save_journeys(path: &Path, journeys: &[CustomerJourney]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for journey in journeys {
        serde_json::to_writer(&mut out, journey).map_err(|source| JourneyError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Knobs of the planted-signal generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_journeys: usize,
    pub n_channels: usize,
    pub n_campaigns: usize,
    pub max_len: usize,
    /// Channel whose presence among the final three clicks lifts conversion.
    pub key_channel_index: usize,
    pub key_lift: f64,
    pub base_rate: f64,
    /// Time from a journey's first click to its last click.
    pub time_span_hours: f64,
    pub include_nonconverted: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_journeys: 1000,
            n_channels: 4,
            n_campaigns: 3,
            max_len: 8,
            key_channel_index: 0,
            key_lift: 0.6,
            base_rate: 0.2,
            time_span_hours: 48.0,
            include_nonconverted: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(JourneyError::Config(msg));
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return fail(format!("base_rate must lie in (0, 1), got {}", self.base_rate));
        }
        if !(self.key_lift >= 0.0) {
            return fail(format!("key_lift must be non-negative, got {}", self.key_lift));
        }
        if self.base_rate + self.key_lift > 1.0 {
            return fail(format!(
                "base_rate + key_lift must not exceed 1, got {}",
                self.base_rate + self.key_lift
            ));
        }
        if self.n_channels < 2 {
            return fail(format!("need at least 2 channels, got {}", self.n_channels));
        }
        if self.n_campaigns < 1 {
            return fail("need at least 1 campaign".into());
        }
        if self.key_channel_index >= self.n_channels {
            return fail(format!(
                "key channel index {} out of range for {} channels",
                self.key_channel_index, self.n_channels
            ));
        }
        if self.max_len < 1 {
            return fail("max_len must be at least 1".into());
        }
        if !(self.time_span_hours > 0.0 && self.time_span_hours.is_finite()) {
            return fail(format!(
                "time_span_hours must be positive, got {}",
                self.time_span_hours
            ));
        }
        Ok(())
    }

    pub fn channel_token(i: usize) -> String {
        format!("channel_{i}")
    }

    pub fn campaign_token(i: usize) -> String {
        format!("campaign_{i}")
    }

    pub fn key_channel(&self) -> String {
        Self::channel_token(self.key_channel_index)
    }
}

/// 2018-04-25T00:00:00Z; anchors synthetic timestamps.
const SYNTHETIC_EPOCH: u64 = 1_524_614_400;
const SYNTHETIC_WINDOW_SECS: u64 = 30 * 24 * 3600;
const GMV_MEDIAN: f64 = 50.0;
const GMV_LOG_SIGMA: f64 = 0.75;

/// Does `channel` appear among the last three clicks?
pub fn in_last_three(journey: &CustomerJourney, channel: &str) -> bool {
    journey.events.iter().rev().take(3).any(|e| e.channel == channel)
}

/// Draws journeys with a planted conversion rule.
///
/// Lengths are uniform in `[1, max_len]`, channels and campaigns uniform.
/// A journey converts with probability `base_rate + key_lift` when the key
/// channel is among its last three clicks and `base_rate` otherwise. The
/// first click opens a window of `time_span_hours`; the last click closes
/// it and intermediate clicks fall uniformly inside. Converted journeys get
/// a log-normal GMV with median 50. Without `include_nonconverted`,
/// non-converting draws are rejected so every journey converts.
pub fn generate_synthetic(
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<(Vocabulary, Vec<CustomerJourney>)> {
    cfg.validate()?;
    let channels: Vec<String> = (0..cfg.n_channels).map(GeneratorConfig::channel_token).collect();
    let campaigns: Vec<String> = (0..cfg.n_campaigns)
        .map(GeneratorConfig::campaign_token)
        .collect();
    let vocab = Vocabulary::new(channels.clone(), campaigns.clone())?;
    let key = cfg.key_channel();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gmv_dist = LogNormal::new(GMV_MEDIAN.ln(), GMV_LOG_SIGMA).expect("valid log-normal");
    let span_secs = (cfg.time_span_hours * SECONDS_PER_HOUR).round() as u64;

    let mut journeys = Vec::with_capacity(cfg.n_journeys);
    while journeys.len() < cfg.n_journeys {
        let len = rng.random_range(1..=cfg.max_len);
        let start = SYNTHETIC_EPOCH + rng.random_range(0..SYNTHETIC_WINDOW_SECS);
        let mut times: Vec<u64> = (0..len)
            .map(|i| match i {
                0 => start,
                i if i == len - 1 => start + span_secs,
                _ => start + rng.random_range(0..=span_secs),
            })
            .collect();
        times.sort_unstable();
        let events: Vec<ClickEvent> = times
            .into_iter()
            .map(|ts| {
                let channel = channels.choose(&mut rng).expect("non-empty");
                let campaign = campaigns.choose(&mut rng).expect("non-empty");
                ClickEvent::new(channel.clone(), campaign.clone(), ts)
            })
            .collect();
        let mut journey = CustomerJourney {
            user_id: format!("u{:07}", journeys.len()),
            events,
            converted: false,
            gmv: 0.0,
        };
        let p = cfg.base_rate
            + if in_last_three(&journey, &key) {
                cfg.key_lift
            } else {
                0.0
            };
        journey.converted = rng.random_bool(p);
        if journey.converted {
            let gmv: f64 = gmv_dist.sample(&mut rng);
            journey.gmv = ((gmv * 100.0).round() / 100.0).max(0.01);
        } else if !cfg.include_nonconverted {
            continue;
        }
        journeys.push(journey);
    }
    Ok((vocab, journeys))
}
