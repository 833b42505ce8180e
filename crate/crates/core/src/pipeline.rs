//! End-to-end run: preprocess, detect, then discover, prune, rank and explain
//! each anomaly on a bounded worker pool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::anomaly::{detect_anomalies, AnomalyEvent, AnomalyReport};
use crate::config::RunConfig;
use crate::error::Error;
use crate::explain::{annotate_all, build_prompt, explain, render_unexplained, ExplanationRecord, ExplanationSource};
use crate::granger::{discover_graph, edges_json, Diagnostic, EdgeJson, GrangerError, GraphJson};
use crate::graph::{prune, rank_causes, CauseSet};
use crate::ingest::{parse_csv, preprocess, Preprocessed, TimeSeriesFrame};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Causes only; explanation text is left empty.
    pub ci_only: bool,
    /// Never call the remote endpoint.
    pub template_only: bool,
}

/// Per-anomaly graph file: the pruned graph plus what pruning removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    #[serde(flatten)]
    pub graph: GraphJson,
    pub pruned_edges: Vec<EdgeJson>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyOutcome {
    pub event: AnomalyEvent,
    pub graph: GraphRecord,
    pub causes: CauseSet,
    pub record: ExplanationRecord,
    /// Set when the remote endpoint failed and the template was used.
    pub fallback_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub target: String,
    pub events: Vec<AnomalyEvent>,
    pub outcomes: Vec<AnomalyOutcome>,
    /// Events too close to the series start for a full window.
    pub skipped: Vec<AnomalyEvent>,
}

pub fn load_frame(csv_path: &Path, timestamp_col: &str, cfg: &RunConfig) -> Result<Preprocessed, Error> {
    let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let raw = parse_csv(std::io::BufReader::new(file), timestamp_col)?;
    let pre = preprocess(&raw, &cfg.preprocess)?;
    if !pre.dropped.is_empty() {
        warn!(channels = ?pre.dropped, "dropped sparse channels");
    }
    info!(rows = pre.frame.len(), channels = pre.frame.channels.len(), "preprocessed");
    Ok(pre)
}

/// Runs discovery through explanation for one anomaly.
pub fn analyze_anomaly(
    frame: &TimeSeriesFrame,
    event: &AnomalyEvent,
    cfg: &RunConfig,
    opts: RunOptions,
) -> Result<AnomalyOutcome, Error> {
    let target = cfg.anomaly.target_channel.as_str();
    let discovery = discover_graph(frame, event, &cfg.window)?;
    let pruned = prune(&discovery.graph, &cfg.prune);
    let removed: Vec<EdgeJson> =
        edges_json(&discovery.graph).into_iter().filter(|e| !pruned.has_edge(&e.source, &e.dest)).collect();
    let causes = rank_causes(&pruned, target, cfg.rank_k)?.with_time(event.time);
    let directed = annotate_all(&causes.causes, frame, event, cfg.window.window_length)?;

    let mut fallback_reason = None;
    let (prompt, text, source) = if directed.is_empty() {
        let text = if opts.ci_only { String::new() } else { render_unexplained(target, event, &cfg.explain).text };
        (String::new(), text, if opts.ci_only { ExplanationSource::None } else { ExplanationSource::Template })
    } else {
        let prompt = build_prompt(&directed)?;
        if opts.ci_only {
            (prompt.text, String::new(), ExplanationSource::None)
        } else {
            let remote = (!opts.template_only).then_some(&cfg.remote);
            let outcome = explain(&prompt, &directed, target, event, &cfg.explain, remote)?;
            fallback_reason = outcome.fallback_reason.map(|e| e.to_string());
            (prompt.text, outcome.explanation.text, outcome.explanation.source)
        }
    };

    Ok(AnomalyOutcome {
        event: event.clone(),
        graph: GraphRecord {
            graph: GraphJson::new(target, discovery.window, &pruned),
            pruned_edges: removed,
            skipped_channels: discovery.skipped_channels,
            diagnostics: discovery.diagnostics,
        },
        record: ExplanationRecord {
            anomaly_time: event.time,
            target: target.to_string(),
            causes: directed,
            prompt,
            text,
            source,
        },
        causes,
        fallback_reason,
    })
}

/// Analyzes `events` on a pool of `workers` threads (0 = one per core).
/// Results come back in event order whatever the pool size.
pub fn analyze_all(
    frame: &TimeSeriesFrame,
    events: &[AnomalyEvent],
    cfg: &RunConfig,
    opts: RunOptions,
    workers: usize,
) -> Result<(Vec<AnomalyOutcome>, Vec<AnomalyEvent>), Error> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<Option<AnomalyOutcome>, Error>> = pool.install(|| {
        events
            .par_iter()
            .map(|ev| match analyze_anomaly(frame, ev, cfg, opts) {
                Ok(o) => Ok(Some(o)),
                Err(Error::Granger(GrangerError::WindowTooShort { .. })) => Ok(None),
                Err(e) => Err(e),
            })
            .collect()
    });
    let mut outcomes = Vec::new();
    let mut skipped = Vec::new();
    for (ev, r) in events.iter().zip(results) {
        match r? {
            Some(o) => {
                if let Some(reason) = &o.fallback_reason {
                    warn!(time = ev.time, %reason, "remote explanation fell back to template");
                }
                outcomes.push(o);
            }
            None => {
                warn!(time = ev.time, index = ev.index, "anomaly too close to series start; skipped");
                skipped.push(ev.clone());
            }
        }
    }
    Ok((outcomes, skipped))
}

pub fn run(frame: &TimeSeriesFrame, cfg: &RunConfig, opts: RunOptions) -> Result<RunOutput, Error> {
    let events = detect_anomalies(frame, &cfg.anomaly)?;
    info!(count = events.len(), "anomalies detected");
    let (outcomes, skipped) = analyze_all(frame, &events, cfg, opts, cfg.workers)?;
    Ok(RunOutput { target: cfg.anomaly.target_channel.clone(), events, outcomes, skipped })
}

/// Serializes with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}

/// Writes via a sibling temp file and rename so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), Error> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn graph_path(out: &Path, time: i64) -> PathBuf {
    out.join("graphs").join(format!("{time}.json"))
}

pub fn explanation_path(out: &Path, time: i64) -> PathBuf {
    out.join("explanations").join(format!("{time}.json"))
}

/// Writes `anomalies.json`, `causes.json`, `graphs/<time>.json` and
/// `explanations/<time>.json` under `out`.
pub fn write_outputs(output: &RunOutput, out: &Path) -> Result<(), Error> {
    write_atomic(&out.join("anomalies.json"), &to_json(&AnomalyReport { events: output.events.clone() }))?;
    let causes: Vec<&CauseSet> = output.outcomes.iter().map(|o| &o.causes).collect();
    write_atomic(&out.join("causes.json"), &to_json(&causes))?;
    for o in &output.outcomes {
        write_atomic(&graph_path(out, o.event.time), &to_json(&o.graph))?;
        write_atomic(&explanation_path(out, o.event.time), &to_json(&o.record))?;
    }
    Ok(())
}
