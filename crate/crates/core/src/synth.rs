//! Synthetic telemetry from a lagged linear structural model with known
//! causal edges.
//!
//! Each channel follows
//!
//! ```text
//! b_t = self * b_{t-1} + sum_{edges src->this} coeff * x^src_{t-lag} + noise_std * N(0, 1)
//! x_t = b_t + exogenous_t
//! ```
//!
//! where `exogenous_t` carries optional schedules. A level offset reaches
//! downstream channels through `x` but does not feed back into the channel's
//! own autoregression. Injected surges instead enter as `shock_t` added to
//! `b_t`, so they persist and decay with the channel's own dynamics.
//!
//! Randomness comes from ChaCha8 seeded with `seed` (platform independent);
//! normals use the Box-Muller transform, drawn channel by channel at each
//! step.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::AnomalyEvent;
use crate::graph::{CausalGraph, EdgeStats};
use crate::ingest::{RawChannel, RegularFrame, ZERO_VARIANCE_EPS};
use crate::metrics::GroundTruthAnnotation;

/// 2019-01-01T00:00:00Z
pub const DEFAULT_START: i64 = 1_546_300_800;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SynthError> {
    Err(SynthError::InvalidSpec(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEdge {
    pub source: String,
    pub dest: String,
    pub lag: usize,
    pub coefficient: f64,
}

impl SynthEdge {
    pub fn new(source: &str, dest: &str, lag: usize, coefficient: f64) -> Self {
        Self { source: source.into(), dest: dest.into(), lag, coefficient }
    }
}

fn default_start() -> i64 {
    DEFAULT_START
}

fn default_interval() -> i64 {
    3600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub channels: Vec<String>,
    #[serde(default)]
    pub edges: Vec<SynthEdge>,
    /// AR(1) coefficient per channel, each in (-1, 1).
    pub self_coefficients: Vec<f64>,
    pub noise_std: Vec<f64>,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: i64,
    #[serde(default = "default_interval")]
    pub interval: i64,
}

impl SynthSpec {
    /// Independent channels with unit noise and no self dynamics.
    pub fn white_noise(channels: &[&str], n: usize, seed: u64) -> Self {
        Self {
            channels: channels.iter().map(|c| c.to_string()).collect(),
            edges: Vec::new(),
            self_coefficients: vec![0.0; channels.len()],
            noise_std: vec![1.0; channels.len()],
            n,
            seed,
            start: DEFAULT_START,
            interval: 3600,
        }
    }

    pub fn max_lag(&self) -> usize {
        self.edges.iter().map(|e| e.lag).max().unwrap_or(1).max(1)
    }

    pub fn burn_in(&self) -> usize {
        10 * self.max_lag()
    }

    pub fn channel_index(&self, id: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == id)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let k = self.channels.len();
        if k == 0 {
            return invalid("no channels");
        }
        let unique: BTreeSet<&String> = self.channels.iter().collect();
        if unique.len() != k {
            return invalid("duplicate channel ids");
        }
        if self.self_coefficients.len() != k || self.noise_std.len() != k {
            return invalid("self_coefficients and noise_std need one entry per channel");
        }
        if let Some(c) = self.self_coefficients.iter().find(|c| !(c.abs() < 1.0)) {
            return invalid(format!("self coefficient {c} outside (-1, 1)"));
        }
        if let Some(s) = self.noise_std.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return invalid(format!("noise std {s} must be finite and non-negative"));
        }
        if self.interval <= 0 {
            return invalid("interval must be positive");
        }
        let mut pairs = BTreeSet::new();
        for e in &self.edges {
            for end in [&e.source, &e.dest] {
                if self.channel_index(end).is_none() {
                    return invalid(format!("edge references unknown channel `{end}`"));
                }
            }
            if e.source == e.dest {
                return invalid(format!("edge `{}` -> itself; use self_coefficients", e.source));
            }
            if e.lag == 0 {
                return invalid("edge lags must be >= 1");
            }
            if !e.coefficient.is_finite() {
                return invalid("edge coefficients must be finite");
            }
            if !pairs.insert((&e.source, &e.dest)) {
                return invalid(format!("duplicate edge `{}` -> `{}`", e.source, e.dest));
            }
        }
        if self.n <= 10 * self.max_lag() {
            return invalid(format!("n = {} must exceed 10 * max lag = {}", self.n, 10 * self.max_lag()));
        }
        Ok(())
    }

    /// The edges as a graph; edge weight is `|coefficient|`.
    pub fn ground_truth(&self) -> CausalGraph {
        let mut g = CausalGraph::new(self.channels.iter().cloned());
        for e in &self.edges {
            let stats = EdgeStats { f_stat: e.coefficient.abs(), p_value: 0.0, lag: e.lag };
            g.add_edge(&e.source, &e.dest, stats).expect("validated edge");
        }
        g
    }
}

/// Standard normals by Box-Muller, one spare cached.
struct Normals {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Normals {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Simulates the spec and returns the frame with its ground-truth graph.
pub fn generate_var(spec: &SynthSpec) -> Result<(RegularFrame, CausalGraph), SynthError> {
    let frame = generate_var_with_input(spec, |_, _| 0.0)?;
    Ok((frame, spec.ground_truth()))
}

/// Simulates the spec with an exogenous additive level `input(channel, t)`
/// for output step `t` in `0..n`.
pub fn generate_var_with_input<F>(spec: &SynthSpec, input: F) -> Result<RegularFrame, SynthError>
where
    F: Fn(usize, usize) -> f64,
{
    generate_var_with_inputs(spec, input, |_, _| 0.0)
}

/// Like [`generate_var_with_input`], plus `shock(channel, t)` added to the
/// channel's autoregressive state.
pub fn generate_var_with_inputs<F, G>(spec: &SynthSpec, level: F, shock: G) -> Result<RegularFrame, SynthError>
where
    F: Fn(usize, usize) -> f64,
    G: Fn(usize, usize) -> f64,
{
    spec.validate()?;
    let k = spec.channels.len();
    let burn = spec.burn_in();
    let total = burn + spec.n;

    let mut incoming: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); k];
    for e in &spec.edges {
        let src = spec.channel_index(&e.source).unwrap();
        let dst = spec.channel_index(&e.dest).unwrap();
        incoming[dst].push((src, e.lag, e.coefficient));
    }

    let mut normals = Normals::new(spec.seed);
    let mut base = vec![vec![0.0; total]; k];
    let mut observed = vec![vec![0.0; total]; k];
    for t in 1..total {
        for j in 0..k {
            let mut v = spec.self_coefficients[j] * base[j][t - 1];
            for &(src, lag, coeff) in &incoming[j] {
                if t >= lag {
                    v += coeff * observed[src][t - lag];
                }
            }
            v += spec.noise_std[j] * normals.next();
            let (offset, kick) = if t >= burn { (level(j, t - burn), shock(j, t - burn)) } else { (0.0, 0.0) };
            v += kick;
            base[j][t] = v;
            observed[j][t] = v + offset;
        }
    }

    let channels = spec
        .channels
        .iter()
        .zip(observed)
        .map(|(id, series)| RawChannel::new(id.clone(), series[burn..].iter().copied().map(Some).collect()))
        .collect();
    RegularFrame::new(spec.start, spec.interval, channels).map_err(|e| SynthError::InvalidSpec(e.to_string()))
}

/// A surge added to one channel's state for `duration` steps, sized in units
/// of that channel's standard deviation without it. It decays afterwards at
/// the channel's own AR rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub channel: String,
    pub start_index: usize,
    pub duration: usize,
    pub magnitude: f64,
}

/// A periodic exogenous level on one channel, e.g. a daily occupancy
/// schedule. Amplitude is in raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub channel: String,
    pub amplitude: f64,
    pub period: usize,
}

impl Schedule {
    fn level(&self, t: usize) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * (t % self.period) as f64 / self.period as f64;
        self.amplitude * phase.sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub base: SynthSpec,
    pub injection: Injection,
    /// Channel whose anomaly is to be explained.
    pub target: String,
    #[serde(default)]
    pub schedule: Option<Schedule>,
    #[serde(default = "default_threshold")]
    pub z_threshold: f64,
}

fn default_threshold() -> f64 {
    3.0
}

pub const OCCUPANCY: &str = "occupancy";
pub const ZONE_TEMP: &str = "zone3_temp";
pub const CHILLED_WATER: &str = "chilled_water_flow";
pub const DAMPER: &str = "damper";
pub const ENERGY: &str = "energy";

impl ScenarioSpec {
    /// Five channels mimicking an occupancy surge in one zone: occupancy
    /// drives zone temperature and energy, zone temperature drives energy,
    /// chilled-water flow feeds energy weakly and the damper is isolated.
    /// Occupancy follows a daily schedule; a step is injected near the end.
    pub fn occupancy_surge(seed: u64) -> Self {
        let channels = [OCCUPANCY, ZONE_TEMP, CHILLED_WATER, DAMPER, ENERGY];
        let base = SynthSpec {
            channels: channels.iter().map(|c| c.to_string()).collect(),
            edges: vec![
                SynthEdge::new(OCCUPANCY, ZONE_TEMP, 1, 0.5),
                SynthEdge::new(ZONE_TEMP, ENERGY, 1, 0.4),
                SynthEdge::new(OCCUPANCY, ENERGY, 1, 0.8),
                SynthEdge::new(CHILLED_WATER, ENERGY, 1, 0.3),
            ],
            self_coefficients: vec![0.5, 0.6, 0.5, 0.5, 0.4],
            noise_std: vec![1.0, 0.5, 1.0, 1.0, 0.5],
            n: 500,
            seed,
            start: DEFAULT_START,
            interval: 3600,
        };
        Self {
            base,
            injection: Injection { channel: OCCUPANCY.into(), start_index: 400, duration: 3, magnitude: 5.0 },
            target: ENERGY.into(),
            schedule: Some(Schedule { channel: OCCUPANCY.into(), amplitude: 3.0, period: 24 }),
            z_threshold: 3.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.base.validate()?;
        let inj = &self.injection;
        if self.base.channel_index(&inj.channel).is_none() {
            return invalid(format!("injection channel `{}` unknown", inj.channel));
        }
        if self.base.channel_index(&self.target).is_none() {
            return invalid(format!("target `{}` unknown", self.target));
        }
        if inj.start_index + inj.duration > self.base.n {
            return invalid("injection window must lie within [0, n)");
        }
        if !inj.magnitude.is_finite() {
            return invalid("injection magnitude must be finite");
        }
        if let Some(s) = &self.schedule {
            if self.base.channel_index(&s.channel).is_none() {
                return invalid(format!("schedule channel `{}` unknown", s.channel));
            }
            if s.period == 0 || !s.amplitude.is_finite() {
                return invalid("schedule needs a positive period and finite amplitude");
            }
        }
        if !(self.z_threshold > 0.0) {
            return invalid("z_threshold must be positive");
        }
        Ok(())
    }
}

/// Generated scenario with its expected explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub frame: RegularFrame,
    pub truth: CausalGraph,
    pub target: String,
    /// Where the target's z-score peaks in response to the injection, when
    /// that peak clears the threshold.
    pub expected_anomaly: Option<AnomalyEvent>,
    /// Injected channel first, then the channels on its directed paths to the
    /// target (sorted). Empty when no path exists.
    pub expected_causes: Vec<String>,
}

impl Scenario {
    pub fn annotation(&self) -> Option<GroundTruthAnnotation> {
        let anomaly = self.expected_anomaly.as_ref()?;
        let primary = self.expected_causes.first()?.clone();
        Some(GroundTruthAnnotation {
            anomaly_time: anomaly.time,
            true_causes: self.expected_causes.clone(),
            primary_cause: primary,
        })
    }
}

/// Channels lying on some directed path from `from` to `to`, excluding both.
fn path_interior(truth: &CausalGraph, from: &str, to: &str) -> Option<Vec<String>> {
    let reach = |start: &str, forward: bool| {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut stack = vec![start.to_string()];
        while let Some(node) = stack.pop() {
            let next: Vec<String> = if forward {
                truth.children(&node).map(|(c, _)| c.to_string()).collect()
            } else {
                truth.parents(&node).map(|(p, _)| p.to_string()).collect()
            };
            for n in next {
                if seen.insert(n.clone()) {
                    stack.push(n);
                }
            }
        }
        seen
    };
    let downstream = reach(from, true);
    if !downstream.contains(to) {
        return None;
    }
    let upstream = reach(to, false);
    Some(downstream.intersection(&upstream).filter(|n| n.as_str() != from && n.as_str() != to).cloned().collect())
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn complete_values(frame: &RegularFrame, channel: &str) -> Vec<f64> {
    frame.channel(channel).map(|c| c.values.iter().map(|v| v.unwrap_or(0.0)).collect()).unwrap_or_default()
}

/// Simulates the scenario's base process, then again with the injected step.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<Scenario, SynthError> {
    spec.validate()?;
    let base = &spec.base;
    let schedule_on: HashMap<usize, &Schedule> =
        spec.schedule.iter().map(|s| (base.channel_index(&s.channel).unwrap(), s)).collect();
    let scheduled = |j: usize, t: usize| schedule_on.get(&j).map_or(0.0, |s| s.level(t));

    let unperturbed = generate_var_with_input(base, scheduled)?;
    let inj = &spec.injection;
    let inj_idx = base.channel_index(&inj.channel).unwrap();
    let step = inj.magnitude * sample_std(&complete_values(&unperturbed, &inj.channel));
    let window = inj.start_index..inj.start_index + inj.duration;
    let frame =
        generate_var_with_inputs(base, scheduled, |j, t| if j == inj_idx && window.contains(&t) { step } else { 0.0 })?;

    let truth = base.ground_truth();
    let interior = path_interior(&truth, &inj.channel, &spec.target);
    let expected_causes = match &interior {
        _ if inj.channel == spec.target => Vec::new(),
        Some(mid) => std::iter::once(inj.channel.clone()).chain(mid.iter().cloned()).collect(),
        None => Vec::new(),
    };

    let expected_anomaly =
        if step == 0.0 || expected_causes.is_empty() { None } else { expected_peak(&frame, spec, base.max_lag()) };
    Ok(Scenario { frame, truth, target: spec.target.clone(), expected_anomaly, expected_causes })
}

/// Largest |z| of the target within the injection window plus the response
/// horizon, if it clears the threshold.
fn expected_peak(frame: &RegularFrame, spec: &ScenarioSpec, max_lag: usize) -> Option<AnomalyEvent> {
    let values = complete_values(frame, &spec.target);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = sample_std(&values);
    if std < ZERO_VARIANCE_EPS {
        return None;
    }
    let inj = &spec.injection;
    // the response keeps building while the step lasts and a few steps after
    let horizon = (inj.start_index + inj.duration + 2 * max_lag).min(values.len());
    let (index, z) = (inj.start_index..horizon).map(|i| (i, (values[i] - mean) / std)).fold(
        None,
        |best: Option<(usize, f64)>, (i, z)| match best {
            Some((_, bz)) if bz.abs() >= z.abs() => best,
            _ => Some((i, z)),
        },
    )?;
    (z.abs() > spec.z_threshold).then(|| AnomalyEvent {
        time: frame.time_at(index),
        index,
        z_score: z,
        magnitude: z * std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthJson {
    pub edges: Vec<SynthEdge>,
    pub expected_causes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_anomaly: Option<AnomalyEvent>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(frame: &RegularFrame, id: &str) -> Vec<f64> {
        complete_values(frame, id)
    }

    #[test]
    fn null_dynamics_are_zero() {
        let mut spec = SynthSpec::white_noise(&["a", "b"], 50, 1);
        spec.noise_std = vec![0.0, 0.0];
        let (frame, truth) = generate_var(&spec).unwrap();
        assert!(frame.channels().iter().all(|c| c.values.iter().all(|v| *v == Some(0.0))));
        assert_eq!(truth.edge_count(), 0);
        assert_eq!(frame.len(), 50);
    }

    #[test]
    fn same_seed_same_frame() {
        let mut spec = SynthSpec::white_noise(&["a", "b", "c"], 200, 42);
        spec.edges.push(SynthEdge::new("a", "b", 2, 0.7));
        let (f1, _) = generate_var(&spec).unwrap();
        let (f2, _) = generate_var(&spec).unwrap();
        assert_eq!(f1, f2);
        spec.seed = 43;
        assert_ne!(generate_var(&spec).unwrap().0, f1);
    }

    #[test]
    fn ground_truth_matches_edges() {
        let mut spec = SynthSpec::white_noise(&["a", "b", "c"], 100, 0);
        spec.edges = vec![SynthEdge::new("a", "b", 1, 0.9), SynthEdge::new("c", "a", 3, -0.4)];
        let truth = spec.ground_truth();
        let edges: Vec<_> = truth.edges().map(|(s, d, e)| (s.to_string(), d.to_string(), e.lag, e.f_stat)).collect();
        assert_eq!(edges, vec![("a".into(), "b".into(), 1, 0.9), ("c".into(), "a".into(), 3, 0.4)]);
    }

    #[test]
    fn lagged_edge_is_applied() {
        // noise only on the source: dest_t = 2 * src_{t-2} exactly
        let mut spec = SynthSpec::white_noise(&["src", "dst"], 100, 9);
        spec.noise_std = vec![1.0, 0.0];
        spec.edges.push(SynthEdge::new("src", "dst", 2, 2.0));
        let (frame, _) = generate_var(&spec).unwrap();
        let (s, d) = (values(&frame, "src"), values(&frame, "dst"));
        for t in 2..100 {
            assert!((d[t] - 2.0 * s[t - 2]).abs() < 1e-12);
        }
    }

    #[test]
    fn normals_have_unit_moments() {
        let mut g = Normals::new(7);
        let draws: Vec<f64> = (0..200_000).map(|_| g.next()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn rejects_invalid_specs() {
        let ok = SynthSpec::white_noise(&["a", "b"], 100, 0);
        let mut s = ok.clone();
        s.self_coefficients[0] = 1.0;
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.edges.push(SynthEdge::new("a", "z", 1, 0.1));
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.edges.push(SynthEdge::new("a", "b", 0, 0.1));
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.edges.push(SynthEdge::new("a", "b", 10, 0.1));
        assert!(s.validate().is_err(), "n must exceed 10 * max lag");
        let mut s = ok;
        s.noise_std.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn stays_finite_at_large_n() {
        let mut spec = SynthSpec::white_noise(&["a", "b"], 1_000_000, 3);
        spec.self_coefficients = vec![0.99, -0.95];
        spec.edges.push(SynthEdge::new("a", "b", 1, 0.9));
        let (frame, _) = generate_var(&spec).unwrap();
        assert!(frame.channels().iter().all(|c| c.values.iter().all(|v| v.unwrap().is_finite())));
    }

    #[test]
    fn default_scenario_expectations() {
        let sc = build_scenario(&ScenarioSpec::occupancy_surge(1)).unwrap();
        assert_eq!(sc.expected_causes, vec![OCCUPANCY.to_string(), ZONE_TEMP.to_string()]);
        let a = sc.expected_anomaly.clone().expect("surge produces an energy anomaly");
        assert!((400..410).contains(&a.index), "{a:?}");
        assert!(a.z_score > 3.0);
        let ann = sc.annotation().unwrap();
        assert_eq!(ann.primary_cause, OCCUPANCY);
    }

    #[test]
    fn zero_injection_expects_nothing() {
        let mut spec = ScenarioSpec::occupancy_surge(1);
        spec.injection.magnitude = 0.0;
        let sc = build_scenario(&spec).unwrap();
        assert!(sc.expected_anomaly.is_none());
    }

    #[test]
    fn isolated_injection_has_no_path() {
        let mut spec = ScenarioSpec::occupancy_surge(1);
        spec.injection.channel = DAMPER.into();
        let sc = build_scenario(&spec).unwrap();
        assert!(sc.expected_causes.is_empty());
        assert!(sc.expected_anomaly.is_none());
    }
}
