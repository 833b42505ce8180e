//! Directed causal graph over channels, structural pruning and cause
//! ranking.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("self-edge on `{0}`")]
    SelfEdge(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    #[serde(with = "crate::serde_inf")]
    pub f_stat: f64,
    pub p_value: f64,
    pub lag: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CausalGraph {
    nodes: BTreeSet<String>,
    edges: BTreeMap<(String, String), EdgeStats>,
}

impl CausalGraph {
    pub fn new<I, S>(nodes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { nodes: nodes.into_iter().map(Into::into).collect(), edges: BTreeMap::new() }
    }

    pub fn add_edge(&mut self, source: &str, dest: &str, stats: EdgeStats) -> Result<(), GraphError> {
        if source == dest {
            return Err(GraphError::SelfEdge(source.into()));
        }
        for node in [source, dest] {
            if !self.nodes.contains(node) {
                return Err(GraphError::UnknownNode(node.into()));
            }
        }
        self.edges.insert((source.into(), dest.into()), stats);
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(String::as_str)
    }

    pub fn contains_node(&self, node: &str) -> bool {
        self.nodes.contains(node)
    }

    /// Edges in canonical `(source, dest)` order.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, &EdgeStats)> {
        self.edges.iter().map(|((s, d), e)| (s.as_str(), d.as_str(), e))
    }

    pub fn edge(&self, source: &str, dest: &str) -> Option<&EdgeStats> {
        self.edges.get(&(source.to_string(), dest.to_string()))
    }

    pub fn has_edge(&self, source: &str, dest: &str) -> bool {
        self.edge(source, dest).is_some()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Immediate parents `Pa(target)` with their incoming edge stats.
    pub fn parents<'a>(&'a self, target: &'a str) -> impl Iterator<Item = (&'a str, &'a EdgeStats)> + 'a {
        self.edges.iter().filter(move |((_, d), _)| d == target).map(|((s, _), e)| (s.as_str(), e))
    }

    pub fn children<'a>(&'a self, source: &'a str) -> impl Iterator<Item = (&'a str, &'a EdgeStats)> + 'a {
        self.edges
            .range((source.to_string(), String::new())..)
            .take_while(move |((s, _), _)| s == source)
            .map(|((_, d), e)| (d.as_str(), e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub factor: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { factor: 1.5 }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.factor > 0.0) || !self.factor.is_finite() {
            return Err(("factor", format!("must be a positive finite number, got {}", self.factor)));
        }
        Ok(())
    }
}

/// Strongest two-hop explanation of `source -> dest`: the maximum over
/// intermediaries `k` of `min(F(source->k), F(k->dest))`.
pub fn indirect_strength(graph: &CausalGraph, source: &str, dest: &str) -> Option<f64> {
    graph
        .children(source)
        .filter(|(k, _)| *k != dest)
        .filter_map(|(k, first)| graph.edge(k, dest).map(|second| first.f_stat.min(second.f_stat)))
        .fold(None, |best, s| Some(best.map_or(s, |b: f64| b.max(s))))
}

/// Removes each edge `i -> j` that has a two-hop path `i -> k -> j` unless
/// `F(i->j) > factor * S`, where `S` is [`indirect_strength`]. Every decision
/// reads the graph as given, so removals never cascade.
pub fn prune(graph: &CausalGraph, cfg: &PruneConfig) -> CausalGraph {
    let mut out = CausalGraph { nodes: graph.nodes.clone(), edges: BTreeMap::new() };
    for ((s, d), stats) in &graph.edges {
        let keep = match indirect_strength(graph, s, d) {
            None => true,
            Some(_) if stats.f_stat == f64::INFINITY => true,
            Some(strength) => stats.f_stat > cfg.factor * strength,
        };
        if keep {
            out.edges.insert((s.clone(), d.clone()), *stats);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCause {
    pub channel: String,
    #[serde(with = "crate::serde_inf")]
    pub f_stat: f64,
}

/// Top-k parents of a target, strongest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseSet {
    pub target: String,
    pub anomaly_time: Option<i64>,
    pub causes: Vec<RankedCause>,
}

impl CauseSet {
    pub fn is_empty(&self) -> bool {
        self.causes.is_empty()
    }

    pub fn channels(&self) -> impl Iterator<Item = &str> {
        self.causes.iter().map(|c| c.channel.as_str())
    }

    pub fn with_time(mut self, time: i64) -> Self {
        self.anomaly_time = Some(time);
        self
    }
}

fn by_strength(a: &RankedCause, b: &RankedCause) -> Ordering {
    b.f_stat.total_cmp(&a.f_stat).then_with(|| a.channel.cmp(&b.channel))
}

/// Ranks `Pa(target)` by F-statistic descending, ties by channel id, and keeps
/// the first `k`.
pub fn rank_causes(graph: &CausalGraph, target: &str, k: usize) -> Result<CauseSet, GraphError> {
    if !graph.contains_node(target) {
        return Err(GraphError::UnknownTarget(target.into()));
    }
    let mut causes: Vec<RankedCause> =
        graph.parents(target).map(|(s, e)| RankedCause { channel: s.to_string(), f_stat: e.f_stat }).collect();
    causes.sort_by(by_strength);
    causes.truncate(k);
    Ok(CauseSet { target: target.to_string(), anomaly_time: None, causes })
}
