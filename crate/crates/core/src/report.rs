//! Channel-level GMV allocation and the comparison against last-click.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::AttributionResult;
use crate::journey::CustomerJourney;

pub const CSV_HEADER: [&str; 5] = [
    "channel",
    "deepmta_gmv",
    "lastclick_gmv",
    "avg_attribution",
    "journey_count",
];
/// Channel label of the totals row.
pub const TOTAL_LABEL: &str = "TOTAL";
pub const LAST_CLICK_TAG: &str = "last_click";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{channels} channels but {weights} weights")]
    Length { channels: usize, weights: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed report {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Channel-to-currency allocation of one or more journeys.
pub type Allocation = BTreeMap<String, f64>;

/// Splits a journey's GMV across its channels by per-event weight.
pub fn allocate_gmv(journey: &CustomerJourney, weights: &[f64]) -> Result<Allocation, ReportError> {
    if weights.len() != journey.events.len() {
        return Err(ReportError::Length {
            channels: journey.events.len(),
            weights: weights.len(),
        });
    }
    let mut out = Allocation::new();
    for (event, w) in journey.events.iter().zip(weights) {
        *out.entry(event.channel.clone()).or_insert(0.0) += w * journey.gmv;
    }
    Ok(out)
}

/// All GMV to the channel of the final click. Non-converted journeys
/// allocate nothing.
pub fn last_click_baseline(journey: &CustomerJourney) -> Allocation {
    let mut out = Allocation::new();
    if let (true, Some(last)) = (journey.converted, journey.events.last()) {
        out.insert(last.channel.clone(), journey.gmv);
    }
    out
}

fn last_click_weights(n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    if let Some(last) = w.last_mut() {
        *last = 1.0;
    }
    w
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    /// Mean over journeys containing the channel of the summed event weights
    /// the channel received.
    pub avg_accumulative_attribution: f64,
    pub total_gmv: f64,
    pub journey_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub method: String,
    pub channels: BTreeMap<String, ChannelStats>,
    /// GMV of the journeys included in the aggregation.
    pub total_gmv: f64,
    pub attributed_journeys: usize,
    pub unattributed_journeys: usize,
}

impl ChannelReport {
    pub fn allocated_gmv(&self) -> f64 {
        self.channels.values().map(|c| c.total_gmv).sum()
    }
}

#[derive(Default)]
struct Accumulator {
    weight_sum: f64,
    gmv: f64,
    count: usize,
}

fn aggregate<'a, I>(method: &str, items: I) -> Result<ChannelReport, ReportError>
where
    I: IntoIterator<Item = (&'a CustomerJourney, Option<&'a [f64]>)>,
{
    let mut acc: BTreeMap<String, Accumulator> = BTreeMap::new();
    let mut report = ChannelReport {
        method: method.to_string(),
        ..ChannelReport::default()
    };
    for (journey, weights) in items {
        let Some(weights) = weights else {
            report.unattributed_journeys += 1;
            continue;
        };
        let allocation = allocate_gmv(journey, weights)?;
        let mut journey_weight: BTreeMap<&str, f64> = BTreeMap::new();
        for (event, w) in journey.events.iter().zip(weights) {
            *journey_weight.entry(event.channel.as_str()).or_insert(0.0) += w;
        }
        for (channel, w) in journey_weight {
            let a = acc.entry(channel.to_string()).or_default();
            a.weight_sum += w;
            a.count += 1;
            a.gmv += allocation[channel];
        }
        report.total_gmv += journey.gmv;
        report.attributed_journeys += 1;
    }
    report.channels = acc
        .into_iter()
        .map(|(channel, a)| {
            let stats = ChannelStats {
                avg_accumulative_attribution: a.weight_sum / a.count as f64,
                total_gmv: a.gmv,
                journey_count: a.count,
            };
            (channel, stats)
        })
        .collect();
    Ok(report)
}

/// Aggregates attributed journeys per channel. Unattributed journeys are
/// left out and counted.
pub fn aggregate_channels(
    results: &[(CustomerJourney, AttributionResult)],
) -> Result<ChannelReport, ReportError> {
    let method = results
        .first()
        .map(|(_, r)| r.method.as_str())
        .unwrap_or("none");
    aggregate(
        method,
        results
            .iter()
            .map(|(j, r)| (j, (!r.unattributed).then_some(r.weights.as_slice()))),
    )
}

/// Last-click report over the same journeys `aggregate_channels` keeps,
/// so both columns allocate from one journey set.
pub fn last_click_report(
    results: &[(CustomerJourney, AttributionResult)],
) -> Result<ChannelReport, ReportError> {
    let weights: Vec<Option<Vec<f64>>> = results
        .iter()
        .map(|(j, r)| (!r.unattributed).then(|| last_click_weights(j.events.len())))
        .collect();
    aggregate(
        LAST_CLICK_TAG,
        results.iter().zip(&weights).map(|((j, _), w)| (j, w.as_deref())),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub channel: String,
    pub deepmta_gmv: f64,
    pub lastclick_gmv: f64,
    pub avg_attribution: f64,
    pub journey_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub method: String,
    pub rows: Vec<ComparisonRow>,
    /// GMV columns are column sums; `avg_attribution` is the sum of the
    /// channel averages; `journey_count` is the number of attributed
    /// journeys.
    pub totals: ComparisonRow,
    pub unattributed_journeys: usize,
}

/// Side-by-side table ordered by descending model GMV, ties by channel name.
pub fn comparison_table(report: &ChannelReport, baseline: &ChannelReport) -> ComparisonTable {
    let mut names: Vec<&String> = report.channels.keys().chain(baseline.channels.keys()).collect();
    names.sort();
    names.dedup();
    let mut rows: Vec<ComparisonRow> = names
        .into_iter()
        .map(|name| {
            let model = report.channels.get(name).cloned().unwrap_or_default();
            let base = baseline.channels.get(name).map(|c| c.total_gmv).unwrap_or(0.0);
            ComparisonRow {
                channel: name.clone(),
                deepmta_gmv: model.total_gmv,
                lastclick_gmv: base,
                avg_attribution: model.avg_accumulative_attribution,
                journey_count: model.journey_count,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.deepmta_gmv
            .total_cmp(&a.deepmta_gmv)
            .then_with(|| a.channel.cmp(&b.channel))
    });
    let totals = ComparisonRow {
        channel: TOTAL_LABEL.to_string(),
        deepmta_gmv: rows.iter().fold(0.0, |s, r| s + r.deepmta_gmv),
        lastclick_gmv: rows.iter().fold(0.0, |s, r| s + r.lastclick_gmv),
        avg_attribution: rows.iter().fold(0.0, |s, r| s + r.avg_attribution),
        journey_count: report.attributed_journeys,
    };
    ComparisonTable {
        method: report.method.clone(),
        rows,
        totals,
        unattributed_journeys: report.unattributed_journeys,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_table_csv(table: &ComparisonTable, path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(CSV_HEADER).map_err(csv_err(path))?;
    for row in table.rows.iter().chain(std::iter::once(&table.totals)) {
        w.write_record([
            row.channel.clone(),
            row.deepmta_gmv.to_string(),
            row.lastclick_gmv.to_string(),
            row.avg_attribution.to_string(),
            row.journey_count.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_table_json(table: &ComparisonTable, path: &Path) -> Result<(), ReportError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, table).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(out).and_then(|_| out.flush()).map_err(io_err(path))
}

pub fn emit_report(
    report: &ChannelReport,
    baseline: &ChannelReport,
    path: &Path,
    format: ReportFormat,
) -> Result<ComparisonTable, ReportError> {
    let table = comparison_table(report, baseline);
    match format {
        ReportFormat::Csv => write_table_csv(&table, path)?,
        ReportFormat::Json => write_table_json(&table, path)?,
    }
    Ok(table)
}

/// Reads a CSV written by [`write_table_csv`]. The method tag and the
/// unattributed count are not part of the CSV and come back empty.
pub fn read_table_csv(path: &Path) -> Result<ComparisonTable, ReportError> {
    let malformed = |reason: String| ReportError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(malformed(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for record in r.deserialize::<ComparisonRow>() {
        rows.push(record.map_err(csv_err(path))?);
    }
    let totals = match rows.pop() {
        Some(t) if t.channel == TOTAL_LABEL => t,
        _ => return Err(malformed("missing totals row".into())),
    };
    Ok(ComparisonTable {
        method: String::new(),
        rows,
        totals,
        unattributed_journeys: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Method;
    use crate::journey::ClickEvent;

    fn journey(channels: &[&str], gmv: f64) -> CustomerJourney {
        let events = channels
            .iter()
            .enumerate()
            .map(|(i, c)| ClickEvent::new(*c, "x", i as u64))
            .collect();
        CustomerJourney::new("u", events, gmv > 0.0, gmv).unwrap()
    }

    fn result(weights: &[f64]) -> AttributionResult {
        let unattributed = weights.iter().all(|&w| w == 0.0);
        AttributionResult {
            raw_weights: weights.to_vec(),
            intercept: 0.0,
            weights: weights.to_vec(),
            method: Method::Ols,
            unattributed,
        }
    }

    #[test]
    fn allocation_examples() {
        let a = allocate_gmv(&journey(&["A", "B", "A"], 100.0), &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(a["A"], 75.0);
        assert_eq!(a["B"], 25.0);
        let single = journey(&["C"], 42.0);
        assert_eq!(allocate_gmv(&single, &[1.0]).unwrap()["C"], 42.0);
        assert_eq!(last_click_baseline(&single), allocate_gmv(&single, &[1.0]).unwrap());
        assert!(allocate_gmv(&single, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn last_click_examples() {
        assert_eq!(last_click_baseline(&journey(&["A", "B", "A"], 100.0)), Allocation::from([("A".into(), 100.0)]));
        assert_eq!(last_click_baseline(&journey(&["A", "B"], 100.0)), Allocation::from([("B".into(), 100.0)]));
        assert!(last_click_baseline(&journey(&["A"], 0.0)).is_empty());
    }

    #[test]
    fn averages_over_containing_journeys() {
        let results = vec![
            (journey(&["A", "B"], 10.0), result(&[0.4, 0.6])),
            (journey(&["A", "C"], 20.0), result(&[0.6, 0.4])),
            (journey(&["D"], 5.0), result(&[0.0])),
        ];
        let report = aggregate_channels(&results).unwrap();
        assert!((report.channels["A"].avg_accumulative_attribution - 0.5).abs() < 1e-15);
        assert_eq!(report.channels["A"].journey_count, 2);
        assert!(!report.channels.contains_key("D"));
        assert_eq!(report.unattributed_journeys, 1);
        assert_eq!(report.total_gmv, 30.0);
        assert!((report.allocated_gmv() - 30.0).abs() < 1e-12);

        let base = last_click_report(&results).unwrap();
        assert_eq!(base.channels["B"].total_gmv, 10.0);
        assert_eq!(base.channels["C"].total_gmv, 20.0);
        assert_eq!(base.unattributed_journeys, 1);
    }

    #[test]
    fn table_order_and_totals() {
        let results = vec![
            (journey(&["B", "A"], 10.0), result(&[0.5, 0.5])),
            (journey(&["C", "A"], 10.0), result(&[1.0, 0.0])),
        ];
        let report = aggregate_channels(&results).unwrap();
        let base = last_click_report(&results).unwrap();
        let table = comparison_table(&report, &base);
        let names: Vec<&str> = table.rows.iter().map(|r| r.channel.as_str()).collect();
        // C has 10, then A and B tie at 5.
        assert_eq!(names, ["C", "A", "B"]);
        assert_eq!(table.totals.deepmta_gmv, 20.0);
        assert_eq!(table.totals.lastclick_gmv, 20.0);
        assert_eq!(table.totals.journey_count, 2);
    }

    #[test]
    fn csv_roundtrip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let results = vec![(journey(&["A", "B", "A"], 33.3), result(&[0.1, 0.2, 0.7]))];
        let report = aggregate_channels(&results).unwrap();
        let base = last_click_report(&results).unwrap();
        let table = emit_report(&report, &base, &path, ReportFormat::Csv).unwrap();
        let back = read_table_csv(&path).unwrap();
        assert_eq!(back.rows, table.rows);
        assert_eq!(back.totals, table.totals);

        let empty = aggregate_channels(&[]).unwrap();
        let table = emit_report(&empty, &empty, &path, ReportFormat::Csv).unwrap();
        assert!(table.rows.is_empty());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "channel,deepmta_gmv,lastclick_gmv,avg_attribution,journey_count\nTOTAL,0,0,0,0\n");
    }

    #[test]
    fn json_mirror() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let results = vec![(journey(&["A"], 1.0), result(&[1.0]))];
        let report = aggregate_channels(&results).unwrap();
        let table = emit_report(&report, &report, &path, ReportFormat::Json).unwrap();
        let back: ComparisonTable = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, table);
    }
}
