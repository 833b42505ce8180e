//! Telemetry ingestion: CSV parsing, grid alignment, gap filling, sparse
//! channel exclusion and standardization.
//!
//! The stages run in this order:
//!
//! ```text
//! parse_csv -> resample -> drop_sparse_channels -> impute -> trim_incomplete_edges -> standardize
//! ```
//!
//! Every stage is a pure function of its input.

use std::io::Read;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SECONDS_PER_DAY: i64 = 86_400;

/// Channels whose population std falls below this are treated as constant.
pub const ZERO_VARIANCE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("input contains no data rows")]
    EmptyInput,
    #[error("timestamp column `{0}` not found in header")]
    MissingTimestampColumn(String),
    #[error("timestamps must be strictly increasing (row {row}: {value})")]
    NonMonotonicTimestamps { row: usize, value: String },
    #[error("cannot parse timestamp `{value}` on row {row}")]
    InvalidTimestamp { row: usize, value: String },
    #[error("channel `{0}` has no observed values")]
    AllMissingChannel(String),
    #[error("every channel exceeds the missing-data threshold")]
    AllChannelsDropped,
    #[error("channel `{0}` still has missing values")]
    MissingValues(String),
    #[error("interval must be positive, got {0}")]
    InvalidInterval(i64),
    #[error("channel `{channel}` has {got} values, expected {expected}")]
    RaggedChannel { channel: String, got: usize, expected: usize },
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for IngestError {
    fn from(err: csv::Error) -> Self {
        IngestError::Csv(err.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawChannel {
    pub id: String,
    pub values: Vec<Option<f64>>,
}

impl RawChannel {
    pub fn new(id: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Self { id: id.into(), values }
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

/// Telemetry as read from disk: strictly increasing but possibly irregular
/// timestamps, with missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    timestamps: Vec<i64>,
    channels: Vec<RawChannel>,
}

impl RawFrame {
    pub fn new(timestamps: Vec<i64>, channels: Vec<RawChannel>) -> Result<Self, IngestError> {
        if let Some(pos) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(IngestError::NonMonotonicTimestamps { row: pos + 2, value: timestamps[pos + 1].to_string() });
        }
        check_lengths(&channels, timestamps.len())?;
        Ok(Self { timestamps, channels })
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn channels(&self) -> &[RawChannel] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// A frame on a regular time grid. Values may still be missing.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularFrame {
    start: i64,
    interval: i64,
    len: usize,
    channels: Vec<RawChannel>,
}

impl RegularFrame {
    pub fn new(start: i64, interval: i64, channels: Vec<RawChannel>) -> Result<Self, IngestError> {
        if interval <= 0 {
            return Err(IngestError::InvalidInterval(interval));
        }
        let len = channels.first().map_or(0, |c| c.values.len());
        check_lengths(&channels, len)?;
        Ok(Self { start, interval, len, channels })
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn interval(&self) -> i64 {
        self.interval
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> &[RawChannel] {
        &self.channels
    }

    pub fn channel(&self, id: &str) -> Option<&RawChannel> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn time_at(&self, index: usize) -> i64 {
        self.start + self.interval * index as i64
    }

    pub fn timestamps(&self) -> Vec<i64> {
        (0..self.len).map(|i| self.time_at(i)).collect()
    }

    pub fn into_channels(self) -> Vec<RawChannel> {
        self.channels
    }
}

fn check_lengths(channels: &[RawChannel], expected: usize) -> Result<(), IngestError> {
    for c in channels {
        if c.values.len() != expected {
            return Err(IngestError::RaggedChannel { channel: c.id.clone(), got: c.values.len(), expected });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Grid spacing in seconds.
    pub interval: i64,
    /// Longest interior gap, in intervals, that is forward-filled.
    pub max_ffill_gap: usize,
    /// Channels missing strictly more than this fraction are excluded.
    pub max_missing_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { interval: 3600, max_ffill_gap: 2, max_missing_fraction: 0.20 }
    }
}

impl PreprocessConfig {
    /// Returns the dotted path of the first invalid field.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.interval <= 0 {
            return Err(("interval", format!("must be > 0, got {}", self.interval)));
        }
        if !(0.0..=1.0).contains(&self.max_missing_fraction) {
            return Err(("max_missing_fraction", format!("must be in [0, 1], got {}", self.max_missing_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub id: String,
    pub mean: f64,
    pub std: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_variance: bool,
    pub values: Vec<f64>,
}

impl Channel {
    pub fn stats(&self) -> ChannelStats {
        ChannelStats { mean: self.mean, std: self.std }
    }

    /// Maps a standardized value back to raw units.
    pub fn to_raw(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// The canonical preprocessed frame: regular grid, no gaps, each channel
/// standardized with its original moments retained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesFrame {
    pub start: i64,
    pub interval: i64,
    pub channels: Vec<Channel>,
}

impl TimeSeriesFrame {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |c| c.values.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, id: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn time_at(&self, index: usize) -> i64 {
        self.start + self.interval * index as i64
    }

    /// Index of the grid point at `time`, if it lies on the grid.
    pub fn index_of(&self, time: i64) -> Option<usize> {
        let offset = time - self.start;
        if offset < 0 || offset % self.interval != 0 {
            return None;
        }
        let index = (offset / self.interval) as usize;
        (index < self.len()).then_some(index)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("frame serializes")
    }
}

/// Parses a timestamp cell: integer epoch seconds or ISO-8601
/// `YYYY-MM-DDTHH:MM:SS` with an optional zone suffix (naive times are UTC).
pub fn parse_timestamp(cell: &str) -> Option<i64> {
    let cell = cell.trim();
    if let Ok(secs) = cell.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(cell) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%z", "%Y-%m-%dT%H:%M:%S%#z", "%Y-%m-%d %H:%M:%S%#z"] {
        if let Ok(dt) = DateTime::parse_from_str(cell, fmt) {
            return Some(dt.timestamp());
        }
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(cell, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

fn parse_value(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a headered CSV. Cells that do not parse as finite numbers become
/// missing entries.
pub fn parse_csv<R: Read>(input: R, timestamp_column: &str) -> Result<RawFrame, IngestError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let ts_col = headers
        .iter()
        .position(|h| h == timestamp_column)
        .ok_or_else(|| IngestError::MissingTimestampColumn(timestamp_column.to_string()))?;

    let mut timestamps = Vec::new();
    let mut channels: Vec<RawChannel> =
        headers.iter().enumerate().filter(|&(i, _)| i != ts_col).map(|(_, h)| RawChannel::new(h, Vec::new())).collect();

    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        // header is line 1
        let row = row_idx + 2;
        let ts_cell = record.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(ts_cell)
            .ok_or_else(|| IngestError::InvalidTimestamp { row, value: ts_cell.to_string() })?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(IngestError::NonMonotonicTimestamps { row, value: ts_cell.to_string() });
            }
        }
        timestamps.push(ts);
        let mut ch = channels.iter_mut();
        for (i, cell) in record.iter().enumerate() {
            if i == ts_col {
                continue;
            }
            if let Some(c) = ch.next() {
                c.values.push(parse_value(cell));
            }
        }
    }
    if timestamps.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    RawFrame::new(timestamps, channels)
}

/// Averages observations into buckets `[start, start + interval)` on a grid
/// anchored at midnight UTC of the first observation's day. Buckets with no
/// observed value are missing.
pub fn resample(frame: &RawFrame, interval: i64) -> Result<RegularFrame, IngestError> {
    if interval <= 0 {
        return Err(IngestError::InvalidInterval(interval));
    }
    let (&first, &last) = match (frame.timestamps.first(), frame.timestamps.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(IngestError::EmptyInput),
    };
    let anchor = first - first.rem_euclid(SECONDS_PER_DAY);
    let bucket_of = |t: i64| (t - anchor).div_euclid(interval);
    let first_bucket = bucket_of(first);
    let n_buckets = (bucket_of(last) - first_bucket + 1) as usize;
    let start = anchor + first_bucket * interval;

    let slots: Vec<usize> = frame.timestamps.iter().map(|&t| (bucket_of(t) - first_bucket) as usize).collect();

    let channels = frame
        .channels
        .iter()
        .map(|c| {
            let mut sum = vec![0.0; n_buckets];
            let mut count = vec![0usize; n_buckets];
            for (&slot, v) in slots.iter().zip(&c.values) {
                if let Some(v) = v {
                    sum[slot] += v;
                    count[slot] += 1;
                }
            }
            let values = sum.into_iter().zip(count).map(|(s, n)| (n > 0).then(|| s / n as f64)).collect();
            RawChannel::new(c.id.clone(), values)
        })
        .collect();
    RegularFrame::new(start, interval, channels)
}

/// Removes channels whose missing fraction strictly exceeds
/// `cfg.max_missing_fraction`, returning the ids of the removed channels.
pub fn drop_sparse_channels(
    frame: &RegularFrame,
    cfg: &PreprocessConfig,
) -> Result<(RegularFrame, Vec<String>), IngestError> {
    let len = frame.len().max(1) as f64;
    let (kept, dropped): (Vec<&RawChannel>, Vec<&RawChannel>) =
        frame.channels.iter().partition(|c| c.missing_count() as f64 / len <= cfg.max_missing_fraction);
    if kept.is_empty() {
        return Err(IngestError::AllChannelsDropped);
    }
    let out = RegularFrame::new(frame.start, frame.interval, kept.into_iter().cloned().collect())?;
    Ok((out, dropped.into_iter().map(|c| c.id.clone()).collect()))
}

/// Fills interior gaps: runs of at most `max_ffill_gap` missing entries take
/// the last observed value, longer runs are linearly interpolated between
/// the bounding observations. Leading and trailing runs stay missing.
pub fn impute(frame: &RegularFrame, cfg: &PreprocessConfig) -> Result<RegularFrame, IngestError> {
    let channels =
        frame.channels.iter().map(|c| impute_channel(c, cfg.max_ffill_gap)).collect::<Result<Vec<_>, _>>()?;
    RegularFrame::new(frame.start, frame.interval, channels)
}

fn impute_channel(channel: &RawChannel, max_ffill_gap: usize) -> Result<RawChannel, IngestError> {
    let observed: Vec<usize> = channel.values.iter().enumerate().filter_map(|(i, v)| v.map(|_| i)).collect();
    if observed.is_empty() {
        return Err(IngestError::AllMissingChannel(channel.id.clone()));
    }
    let mut values = channel.values.clone();
    for pair in observed.windows(2) {
        let (left, right) = (pair[0], pair[1]);
        let gap = right - left - 1;
        if gap == 0 {
            continue;
        }
        let lv = channel.values[left].unwrap();
        let rv = channel.values[right].unwrap();
        let span = (right - left) as f64;
        for (i, slot) in values.iter_mut().enumerate().take(right).skip(left + 1) {
            *slot = Some(if gap <= max_ffill_gap { lv } else { lv + (rv - lv) * (i - left) as f64 / span });
        }
    }
    Ok(RawChannel::new(channel.id.clone(), values))
}

/// Drops leading and trailing rows where any channel is still missing, so the
/// frame stays rectangular without extrapolating.
pub fn trim_incomplete_edges(frame: &RegularFrame) -> Result<RegularFrame, IngestError> {
    let complete = |i: usize| frame.channels.iter().all(|c| c.values[i].is_some());
    let first = (0..frame.len()).find(|&i| complete(i)).ok_or(IngestError::EmptyInput)?;
    let last = (0..frame.len()).rev().find(|&i| complete(i)).unwrap();
    let channels =
        frame.channels.iter().map(|c| RawChannel::new(c.id.clone(), c.values[first..=last].to_vec())).collect();
    RegularFrame::new(frame.time_at(first), frame.interval, channels)
}

/// Transforms each channel to `(x - mean) / std` with the population std.
/// Near-constant channels become all-zero and are flagged.
pub fn standardize(frame: &RegularFrame) -> Result<TimeSeriesFrame, IngestError> {
    let channels = frame
        .channels
        .iter()
        .map(|c| {
            let raw = c
                .values
                .iter()
                .map(|v| v.ok_or_else(|| IngestError::MissingValues(c.id.clone())))
                .collect::<Result<Vec<f64>, _>>()?;
            Ok(standardize_channel(&c.id, &raw))
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    Ok(TimeSeriesFrame { start: frame.start, interval: frame.interval, channels })
}

fn standardize_channel(id: &str, raw: &[f64]) -> Channel {
    let n = raw.len().max(1) as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let zero_variance = std < ZERO_VARIANCE_EPS;
    let values = if zero_variance {
        vec![0.0; raw.len()]
    } else {
        let centred: Vec<f64> = raw.iter().map(|x| (x - mean) / std).collect();
        // second pass removes the rounding residue left in the mean
        let drift = centred.iter().sum::<f64>() / n;
        centred.into_iter().map(|z| z - drift).collect()
    };
    Channel { id: id.to_string(), mean, std, zero_variance, values }
}

/// Output of [`preprocess`].
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub frame: TimeSeriesFrame,
    pub dropped: Vec<String>,
    /// Rows removed from the start and end of the grid.
    pub trimmed: (usize, usize),
}

/// Runs the full ingestion chain on an already parsed frame.
pub fn preprocess(raw: &RawFrame, cfg: &PreprocessConfig) -> Result<Preprocessed, IngestError> {
    let grid = resample(raw, cfg.interval)?;
    let (grid, dropped) = drop_sparse_channels(&grid, cfg)?;
    let filled = impute(&grid, cfg)?;
    let trimmed = trim_incomplete_edges(&filled)?;
    let lead = ((trimmed.start - filled.start) / filled.interval) as usize;
    let tail = filled.len() - lead - trimmed.len();
    Ok(Preprocessed { frame: standardize(&trimmed)?, dropped, trimmed: (lead, tail) })
}
