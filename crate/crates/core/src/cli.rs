//! Command-line front end. Each subcommand loads and validates the config
//! before reading any data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::DateTime;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use tracing::info;

use crate::anomaly::{detect_anomalies, AnomalyEvent, AnomalyReport};
use crate::config::RunConfig;
use crate::error::Error;
use crate::graph::CauseSet;
use crate::ingest::{parse_timestamp, RegularFrame};
use crate::metrics::{evaluate, GroundTruthAnnotation};
use crate::pipeline::{self, to_json, write_atomic, RunOptions};
use crate::synth::{build_scenario, generate_var, GroundTruthJson, ScenarioSpec, SynthSpec};

#[derive(Debug, Parser)]
#[command(
    name = "causelens",
    version,
    about = "Explain anomalies in building telemetry with windowed Granger causality"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "timestamp")]
    pub timestamp_col: String,
    /// Overrides `anomaly.target_channel`.
    #[arg(long, global = true)]
    pub target: Option<String>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Log level for stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full pipeline; writes anomalies, graphs and explanations under --out.
    Run(RunArgs),
    /// Synthetic CSV plus ground truth under --out.
    Synth(SynthArgs),
    /// Prints detected anomalies as JSON.
    Detect { csv: PathBuf },
    /// Prints the explanation record for one anomaly time.
    Explain(ExplainArgs),
    /// Scores predicted causes against annotations.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct ModeArgs {
    /// Emit causes without explanation text.
    #[arg(long)]
    pub ci_only: bool,
    /// Never call the remote endpoint.
    #[arg(long)]
    pub template_only: bool,
}

impl ModeArgs {
    fn options(&self) -> RunOptions {
        RunOptions { ci_only: self.ci_only, template_only: self.template_only }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub csv: PathBuf,
    #[command(flatten)]
    pub mode: ModeArgs,
    /// Overrides `workers` from the config.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML scenario or plain VAR spec; the occupancy-surge scenario when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    pub csv: PathBuf,
    /// Anomaly time: epoch seconds or ISO-8601.
    #[arg(long)]
    pub time: String,
    #[command(flatten)]
    pub mode: ModeArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// `causes.json` from a run, or the run's output directory.
    pub predictions: PathBuf,
    /// JSON list of `{anomaly_time, primary_cause, true_causes}`.
    pub annotations: PathBuf,
    /// Matching tolerance in seconds.
    #[arg(long, default_value_t = 0)]
    pub tolerance: i64,
    /// Print the plain-text table instead of JSON.
    #[arg(long)]
    pub table: bool,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(t) = &cli.target {
        cfg.anomaly.target_channel = t.clone();
        cfg.validate()?;
    }
    Ok(cfg)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn print(text: &str) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io(Path::new("<stdout>"), e))
}

pub fn execute(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Run(args) => cmd_run(cli, args),
        Command::Synth(args) => cmd_synth(&cli.out, args),
        Command::Detect { csv } => cmd_detect(cli, csv),
        Command::Explain(args) => cmd_explain(cli, args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

pub fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<(), Error> {
    let mut cfg = load_config(cli)?;
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    let pre = pipeline::load_frame(&args.csv, &cli.timestamp_col, &cfg)?;
    let output = pipeline::run(&pre.frame, &cfg, args.mode.options())?;
    pipeline::write_outputs(&output, &cli.out)?;
    info!(
        explained = output.outcomes.len(),
        skipped = output.skipped.len(),
        out = %cli.out.display(),
        "run complete"
    );
    Ok(())
}

pub fn cmd_detect(cli: &Cli, csv: &Path) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let pre = pipeline::load_frame(csv, &cli.timestamp_col, &cfg)?;
    let events = detect_anomalies(&pre.frame, &cfg.anomaly)?;
    for e in events.iter().filter(|e| e.is_short_window(cfg.window.window_length)) {
        tracing::warn!(time = e.time, index = e.index, "anomaly has a short window");
    }
    print(&to_json(&AnomalyReport { events }))
}

pub fn cmd_explain(cli: &Cli, args: &ExplainArgs) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let time = parse_timestamp(&args.time).ok_or_else(|| Error::Usage(format!("invalid --time `{}`", args.time)))?;
    let pre = pipeline::load_frame(&args.csv, &cli.timestamp_col, &cfg)?;
    let frame = &pre.frame;
    let index =
        frame.index_of(time).ok_or_else(|| Error::Usage(format!("time {time} is not on the preprocessed grid")))?;
    let target = frame
        .channel(&cfg.anomaly.target_channel)
        .ok_or_else(|| crate::anomaly::AnomalyError::UnknownChannel(cfg.anomaly.target_channel.clone()))?;
    let z = target.values[index];
    let event = AnomalyEvent { time, index, z_score: z, magnitude: z * target.std };
    let outcome = pipeline::analyze_anomaly(frame, &event, &cfg, args.mode.options())?;
    print(&to_json(&outcome.record))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), Error> {
    let predictions_path =
        if args.predictions.is_dir() { args.predictions.join("causes.json") } else { args.predictions.clone() };
    let predictions: Vec<CauseSet> = read_json(&predictions_path)?;
    let truth: Vec<GroundTruthAnnotation> = read_json(&args.annotations)?;
    let report = evaluate(&predictions, &truth, args.tolerance)?;
    if args.table {
        print(&report.to_table())
    } else {
        print(&to_json(&report))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SynthFile {
    Scenario(ScenarioSpec),
    Plain(SynthSpec),
}

fn iso(epoch: i64) -> String {
    DateTime::from_timestamp(epoch, 0).map_or_else(|| epoch.to_string(), |t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
}

/// CSV in the layout `parse_csv` reads, full precision.
pub fn frame_to_csv(frame: &RegularFrame) -> Result<String, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["timestamp".to_string()];
    header.extend(frame.channels().iter().map(|c| c.id.clone()));
    let csv_err = |e: csv::Error| Error::Usage(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..frame.len() {
        let mut row = vec![iso(frame.time_at(i))];
        row.extend(frame.channels().iter().map(|c| c.values[i].map_or_else(String::new, |v| v.to_string())));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Usage(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn cmd_synth(out: &Path, args: &SynthArgs) -> Result<(), Error> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<SynthFile>(&text).map_err(|e| {
                crate::config::ConfigError::Parse(format!("{}: not a scenario or VAR spec: {e}", path.display()))
            })?
        }
        None => SynthFile::Scenario(ScenarioSpec::occupancy_surge(args.seed.unwrap_or(0))),
    };
    let (frame, truth) = match spec {
        SynthFile::Scenario(mut s) => {
            if let Some(seed) = args.seed {
                s.base.seed = seed;
            }
            let sc = build_scenario(&s)?;
            let truth = GroundTruthJson {
                edges: s.base.edges.clone(),
                expected_causes: sc.expected_causes.clone(),
                expected_anomaly: sc.expected_anomaly.clone(),
            };
            (sc.frame, truth)
        }
        SynthFile::Plain(mut s) => {
            if let Some(seed) = args.seed {
                s.seed = seed;
            }
            let (frame, _) = generate_var(&s)?;
            (frame, GroundTruthJson { edges: s.edges.clone(), expected_causes: Vec::new(), expected_anomaly: None })
        }
    };
    write_atomic(&out.join("data.csv"), &frame_to_csv(&frame)?)?;
    write_atomic(&out.join("truth.json"), &to_json(&truth))?;
    info!(rows = frame.len(), out = %out.display(), "synthetic data written");
    Ok(())
}
