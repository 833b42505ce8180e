//! Z-score anomaly detection on the target channel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TimeSeriesFrame;

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("target channel `{0}` has zero variance")]
    ZeroVarianceTarget(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyConfig {
    pub z_threshold: f64,
    pub target_channel: String,
    pub merge_adjacent: bool,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self { z_threshold: 3.0, target_channel: "energy".into(), merge_adjacent: true }
    }
}

impl AnomalyConfig {
    pub fn for_target(target: impl Into<String>) -> Self {
        Self { target_channel: target.into(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.z_threshold > 0.0) {
            return Err(("z_threshold", format!("must be > 0, got {}", self.z_threshold)));
        }
        if self.target_channel.is_empty() {
            return Err(("target_channel", "must not be empty".into()));
        }
        Ok(())
    }
}

/// A detected anomaly anchored at grid index `index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub time: i64,
    pub index: usize,
    pub z_score: f64,
    /// Deviation from the channel mean in raw units.
    pub magnitude: f64,
}

impl AnomalyEvent {
    /// True when fewer than `window_length` intervals precede the anchor.
    pub fn is_short_window(&self, window_length: usize) -> bool {
        self.index < window_length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub events: Vec<AnomalyEvent>,
}

/// Flags indices where the target's full-series z-score exceeds the
/// threshold in absolute value. With `merge_adjacent`, each run of
/// consecutive hits becomes one event at its largest |z| (earliest on ties).
pub fn detect_anomalies(frame: &TimeSeriesFrame, cfg: &AnomalyConfig) -> Result<Vec<AnomalyEvent>, AnomalyError> {
    let channel =
        frame.channel(&cfg.target_channel).ok_or_else(|| AnomalyError::UnknownChannel(cfg.target_channel.clone()))?;
    if channel.zero_variance {
        return Err(AnomalyError::ZeroVarianceTarget(cfg.target_channel.clone()));
    }
    let event = |index: usize| {
        let z = channel.values[index];
        AnomalyEvent { time: frame.time_at(index), index, z_score: z, magnitude: z * channel.std }
    };
    let hits = channel.values.iter().enumerate().filter(|(_, z)| z.abs() > cfg.z_threshold).map(|(i, _)| i);

    if !cfg.merge_adjacent {
        return Ok(hits.map(event).collect());
    }
    let mut events: Vec<AnomalyEvent> = Vec::new();
    let mut last_hit: Option<usize> = None;
    for i in hits {
        let z = channel.values[i].abs();
        match (last_hit, events.last_mut()) {
            (Some(prev), Some(current)) if prev + 1 == i => {
                if z > current.z_score.abs() {
                    *current = event(i);
                }
            }
            _ => events.push(event(i)),
        }
        last_hit = Some(i);
    }
    Ok(events)
}
