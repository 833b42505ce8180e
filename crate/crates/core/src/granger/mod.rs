//! Pairwise Granger causality on an anomaly window.
//!
//! For every ordered channel pair `(source, dest)` two autoregressions of
//! `dest` are fitted over the window:
//!
//! ```text
//! restricted:    dest_t = sum_k a_k dest_{t-k}                       + e_t
//! unrestricted:  dest_t = sum_k a_k dest_{t-k} + sum_k b_k source_{t-k} + e'_t
//! ```
//!
//! and the nested-model F-test decides whether the `b_k` are jointly
//! significant. Significant pairs become edges `source -> dest` weighted by
//! their F-statistic.

pub mod fdist;
pub mod ols;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::AnomalyEvent;
use crate::graph::{CausalGraph, EdgeStats};
use crate::ingest::TimeSeriesFrame;

pub use fdist::f_upper_tail;

/// Residual sums below this are treated as an exact fit.
pub const PERFECT_FIT_RSS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrangerError {
    #[error("series too short: need at least {needed} points, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("regressor matrix is rank deficient")]
    SingularDesign,
    #[error("series is constant")]
    ConstantSeries,
    #[error("lag must be at least 1")]
    InvalidLag,
    #[error("invalid degrees of freedom ({0}, {1})")]
    InvalidDegreesOfFreedom(usize, usize),
    #[error("anomaly at index {index} leaves fewer than {window} prior intervals")]
    WindowTooShort { index: usize, window: usize },
    #[error("fewer than two eligible channels in window")]
    NoEligibleChannels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LagSelection {
    #[default]
    Fixed,
    Bic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Intervals preceding the anomaly; the window holds `window_length + 1` points.
    pub window_length: usize,
    pub lag: usize,
    pub lag_selection: LagSelection,
    pub p_max: usize,
    pub alpha: f64,
    pub include_intercept: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_length: 24,
            lag: 3,
            lag_selection: LagSelection::Fixed,
            p_max: 6,
            alpha: 0.05,
            include_intercept: false,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.lag < 1 || self.lag > self.p_max {
            return Err(("lag", format!("must be in [1, p_max = {}], got {}", self.p_max, self.lag)));
        }
        let widest = match self.lag_selection {
            LagSelection::Fixed => self.lag,
            LagSelection::Bic => self.p_max,
        };
        if self.window_length <= 2 * widest + 5 {
            return Err((
                "window_length",
                format!("must exceed 2*{widest} + 5 = {}, got {}", 2 * widest + 5, self.window_length),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(("alpha", format!("must be in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One least-squares autoregression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ARFit {
    /// Own-lag coefficients `a_1..a_p`, then cross-lag `b_1..b_p`, then the
    /// intercept when present.
    pub coefficients: Vec<f64>,
    pub rss: f64,
    pub n_obs: usize,
    pub n_params: usize,
}

pub fn min_length(lag: usize) -> usize {
    2 * lag + 6
}

/// Fits `y_t` on its own `lag` lags, plus `x`'s lags when given, without
/// intercept.
pub fn fit_ar(y: &[f64], x: Option<&[f64]>, lag: usize) -> Result<ARFit, GrangerError> {
    check_pair(y, x, lag, min_length(lag))?;
    fit_from(y, x, lag, lag, false)
}

pub fn fit_ar_with_intercept(y: &[f64], x: Option<&[f64]>, lag: usize) -> Result<ARFit, GrangerError> {
    check_pair(y, x, lag, min_length(lag))?;
    fit_from(y, x, lag, lag, true)
}

fn check_pair(y: &[f64], x: Option<&[f64]>, lag: usize, needed: usize) -> Result<(), GrangerError> {
    if lag == 0 {
        return Err(GrangerError::InvalidLag);
    }
    if let Some(x) = x {
        if x.len() != y.len() {
            return Err(GrangerError::LengthMismatch(x.len(), y.len()));
        }
    }
    if y.len() < needed {
        return Err(GrangerError::TooShort { needed, got: y.len() });
    }
    Ok(())
}

/// Regresses `y_t` for `t` in `first..len` so that several lag orders can
/// share one sample.
fn fit_from(y: &[f64], x: Option<&[f64]>, lag: usize, first: usize, intercept: bool) -> Result<ARFit, GrangerError> {
    fit_lagged(y, x, lag, first, intercept, false)
}

/// As [`fit_from`], but cross-lag columns already spanned by the own lags
/// are dropped rather than rejected. Used for the unrestricted model, whose
/// residual sum stays well defined under collinearity.
fn fit_augmented(y: &[f64], x: &[f64], lag: usize, first: usize, intercept: bool) -> Result<ARFit, GrangerError> {
    fit_lagged(y, Some(x), lag, first, intercept, true)
}

fn fit_lagged(
    y: &[f64],
    x: Option<&[f64]>,
    lag: usize,
    first: usize,
    intercept: bool,
    drop_dependent: bool,
) -> Result<ARFit, GrangerError> {
    let target = &y[first..];
    let lagged = |s: &[f64], k: usize| s[first - k..s.len() - k].to_vec();
    let mut columns: Vec<Vec<f64>> = (1..=lag).map(|k| lagged(y, k)).collect();
    if let Some(x) = x {
        columns.extend((1..=lag).map(|k| lagged(x, k)));
    }
    if intercept {
        columns.push(vec![1.0; target.len()]);
    }
    let n_params = columns.len();
    if target.len() <= n_params {
        return Err(GrangerError::TooShort { needed: first + n_params + 1, got: y.len() });
    }
    let fit = if drop_dependent {
        // own lags (and intercept) go first so only cross lags get dropped
        if intercept {
            let ones = columns.pop().unwrap();
            columns.insert(lag, ones);
        }
        let mut fit = ols::solve_dropping_dependent(&columns, target).ok_or(GrangerError::SingularDesign)?;
        if intercept {
            let c = fit.coefficients.remove(lag);
            fit.coefficients.push(c);
        }
        fit
    } else {
        ols::solve(&columns, target).ok_or(GrangerError::SingularDesign)?
    };
    Ok(ARFit { coefficients: fit.coefficients, rss: fit.rss, n_obs: target.len(), n_params })
}

/// Outcome of one nested-model F-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrangerStat {
    #[serde(with = "crate::serde_inf")]
    pub f_stat: f64,
    pub p_value: f64,
    pub df1: usize,
    pub df2: usize,
    pub lag_used: usize,
    pub rss_restricted: f64,
    pub rss_unrestricted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrangerResult {
    pub source: String,
    pub dest: String,
    #[serde(flatten)]
    pub stat: GrangerStat,
}

fn is_constant(s: &[f64]) -> bool {
    let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1.0)
}

/// Tests whether `source`'s past improves prediction of `dest` beyond
/// `dest`'s own past.
pub fn granger_test(source: &[f64], dest: &[f64], lag: usize) -> Result<GrangerStat, GrangerError> {
    granger_test_with(source, dest, lag, false)
}

pub fn granger_test_with(
    source: &[f64],
    dest: &[f64],
    lag: usize,
    intercept: bool,
) -> Result<GrangerStat, GrangerError> {
    check_pair(dest, Some(source), lag, min_length(lag))?;
    if is_constant(source) || is_constant(dest) {
        return Err(GrangerError::ConstantSeries);
    }
    let restricted = fit_from(dest, None, lag, lag, intercept)?;
    let unrestricted = fit_augmented(dest, source, lag, lag, intercept)?;
    let df1 = lag;
    let df2 = unrestricted.n_obs - unrestricted.n_params;
    let (rss0, rss1) = (restricted.rss, unrestricted.rss);

    let (f_stat, p_value) = if rss0 <= rss1 || rss0 < PERFECT_FIT_RSS {
        // nested models: any excess of rss1 is rounding; an exact restricted
        // fit leaves nothing for the source to explain
        (0.0, 1.0)
    } else if rss1 < PERFECT_FIT_RSS {
        (f64::INFINITY, 0.0)
    } else {
        let f = ((rss0 - rss1) / df1 as f64) / (rss1 / df2 as f64);
        let p = f_upper_tail(f, df1, df2).ok_or(GrangerError::InvalidDegreesOfFreedom(df1, df2))?;
        (f, p)
    };
    Ok(GrangerStat { f_stat, p_value, df1, df2, lag_used: lag, rss_restricted: rss0, rss_unrestricted: rss1 })
}

/// Picks the lag in `1..=p_max` minimizing the unrestricted model's BIC
/// `n ln(RSS/n) + 2p ln n`, every candidate fitted on the same `len - p_max`
/// observations. Ties go to the smaller lag.
pub fn select_lag_bic(source: &[f64], dest: &[f64], p_max: usize) -> Result<usize, GrangerError> {
    select_lag_bic_with(source, dest, p_max, false)
}

pub fn select_lag_bic_with(source: &[f64], dest: &[f64], p_max: usize, intercept: bool) -> Result<usize, GrangerError> {
    check_pair(dest, Some(source), p_max, min_length(p_max))?;
    let n = (dest.len() - p_max) as f64;
    let mut best: Option<(f64, usize)> = None;
    for p in 1..=p_max {
        let fit = match fit_augmented(dest, source, p, p_max, intercept) {
            Ok(fit) => fit,
            Err(GrangerError::SingularDesign) => continue,
            Err(e) => return Err(e),
        };
        let bic =
            if fit.rss <= 0.0 { f64::NEG_INFINITY } else { n * (fit.rss / n).ln() + fit.n_params as f64 * n.ln() };
        if best.is_none_or(|(b, _)| bic < b) {
            best = Some((bic, p));
        }
    }
    best.map(|(_, p)| p).ok_or(GrangerError::SingularDesign)
}

/// A pair that could not be tested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub source: String,
    pub dest: String,
    pub reason: String,
}

/// The Granger graph for one anomaly window.
#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    /// First and last grid index of the window, inclusive.
    pub window: (usize, usize),
    pub graph: CausalGraph,
    /// Every completed test, in canonical `(source, dest)` order.
    pub tests: Vec<GrangerResult>,
    /// Channels skipped because they are constant over the window.
    pub skipped_channels: Vec<String>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Tests every ordered pair of eligible channels over
/// `[anomaly.index - window_length, anomaly.index]` and records an edge for
/// each `p < alpha`. Pairs run on the current rayon pool; the result does not
/// depend on scheduling.
pub fn discover_graph(
    frame: &TimeSeriesFrame,
    anomaly: &AnomalyEvent,
    cfg: &WindowConfig,
) -> Result<Discovery, GrangerError> {
    if anomaly.index < cfg.window_length || anomaly.index >= frame.len() {
        return Err(GrangerError::WindowTooShort { index: anomaly.index, window: cfg.window_length });
    }
    let window = (anomaly.index - cfg.window_length, anomaly.index);
    let slice = |values: &[f64]| values[window.0..=window.1].to_vec();

    let mut eligible: Vec<(&str, Vec<f64>)> = Vec::new();
    let mut skipped_channels = Vec::new();
    for c in frame.channels.iter().filter(|c| !c.zero_variance) {
        let w = slice(&c.values);
        if is_constant(&w) {
            skipped_channels.push(c.id.clone());
        } else {
            eligible.push((c.id.as_str(), w));
        }
    }
    if eligible.len() < 2 {
        return Err(GrangerError::NoEligibleChannels);
    }
    eligible.sort_by(|a, b| a.0.cmp(b.0));

    let pairs: Vec<(usize, usize)> =
        (0..eligible.len()).flat_map(|i| (0..eligible.len()).filter(move |&j| j != i).map(move |j| (i, j))).collect();

    let outcomes: Vec<Result<GrangerStat, GrangerError>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (source, dest) = (&eligible[i].1, &eligible[j].1);
            let lag = match cfg.lag_selection {
                LagSelection::Fixed => cfg.lag,
                LagSelection::Bic => select_lag_bic_with(source, dest, cfg.p_max, cfg.include_intercept)?,
            };
            granger_test_with(source, dest, lag, cfg.include_intercept)
        })
        .collect();

    let mut graph = CausalGraph::new(frame.channels.iter().map(|c| c.id.clone()));
    let mut tests = Vec::new();
    let mut diagnostics = Vec::new();
    for (&(i, j), outcome) in pairs.iter().zip(outcomes) {
        let (source, dest) = (eligible[i].0, eligible[j].0);
        match outcome {
            Ok(stat) => {
                if stat.p_value < cfg.alpha {
                    let edge = EdgeStats { f_stat: stat.f_stat, p_value: stat.p_value, lag: stat.lag_used };
                    graph.add_edge(source, dest, edge).expect("eligible channels are graph nodes");
                }
                tests.push(GrangerResult { source: source.into(), dest: dest.into(), stat });
            }
            Err(e @ GrangerError::SingularDesign) => {
                diagnostics.push(Diagnostic { source: source.into(), dest: dest.into(), reason: e.to_string() })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Discovery { window, graph, tests, skipped_channels, diagnostics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowJson {
    pub start_index: usize,
    pub end_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeJson {
    pub source: String,
    pub dest: String,
    #[serde(with = "crate::serde_inf")]
    pub f_stat: f64,
    pub p_value: f64,
    pub lag: usize,
}

/// Serialized graph: `{target, window:{start_index,end_index}, edges:[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub target: String,
    pub window: WindowJson,
    pub edges: Vec<EdgeJson>,
}

impl GraphJson {
    pub fn new(target: &str, window: (usize, usize), graph: &CausalGraph) -> Self {
        Self {
            target: target.to_string(),
            window: WindowJson { start_index: window.0, end_index: window.1 },
            edges: edges_json(graph),
        }
    }
}

pub fn edges_json(graph: &CausalGraph) -> Vec<EdgeJson> {
    graph
        .edges()
        .map(|(s, d, e)| EdgeJson {
            source: s.into(),
            dest: d.into(),
            f_stat: e.f_stat,
            p_value: e.p_value,
            lag: e.lag,
        })
        .collect()
}
