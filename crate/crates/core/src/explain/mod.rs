//! Turns a ranked cause set into a prompt and a short prose explanation.

pub mod remote;

use std::collections::BTreeMap;
use std::fmt;

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::AnomalyEvent;
use crate::graph::RankedCause;
use crate::ingest::TimeSeriesFrame;

pub use remote::{explain, request_remote_explanation, RemoteConfig, RemoteOutcome};

pub const UP_ARROW: char = '\u{2191}';
pub const DOWN_ARROW: char = '\u{2193}';

const PROMPT_HEAD: &str = "CAUSES: [";
const PROMPT_TAIL: &str = "].\nGENERATE_EXPLANATION:";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExplainError {
    #[error("cause list is empty")]
    EmptyCauseList,
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("anomaly at index {index} leaves fewer than {window} prior intervals")]
    WindowTooShort { index: usize, window: usize },
    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),
    #[error("remote endpoint unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("malformed remote response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn arrow(self) -> char {
        match self {
            Direction::Up => UP_ARROW,
            Direction::Down => DOWN_ARROW,
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Direction::Up => "a rise in",
            Direction::Down => "a drop in",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectedCause {
    pub channel: String,
    pub direction: Direction,
    #[serde(with = "crate::serde_inf")]
    pub f_stat: f64,
}

impl fmt::Display for DirectedCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.channel, self.direction.arrow())
    }
}

/// Up when the channel's value at the anomaly exceeds its mean over the
/// `window_length` points before it; down otherwise (ties included).
pub fn annotate_direction(
    cause: &RankedCause,
    frame: &TimeSeriesFrame,
    anomaly: &AnomalyEvent,
    window_length: usize,
) -> Result<DirectedCause, ExplainError> {
    let channel = frame.channel(&cause.channel).ok_or_else(|| ExplainError::UnknownChannel(cause.channel.clone()))?;
    if window_length == 0 || anomaly.index < window_length || anomaly.index >= channel.values.len() {
        return Err(ExplainError::WindowTooShort { index: anomaly.index, window: window_length });
    }
    let prior = &channel.values[anomaly.index - window_length..anomaly.index];
    let mean = prior.iter().sum::<f64>() / window_length as f64;
    let direction = if channel.values[anomaly.index] > mean { Direction::Up } else { Direction::Down };
    Ok(DirectedCause { channel: cause.channel.clone(), direction, f_stat: cause.f_stat })
}

pub fn annotate_all(
    causes: &[RankedCause],
    frame: &TimeSeriesFrame,
    anomaly: &AnomalyEvent,
    window_length: usize,
) -> Result<Vec<DirectedCause>, ExplainError> {
    causes.iter().map(|c| annotate_direction(c, frame, anomaly, window_length)).collect()
}

/// Generator input: `CAUSES: [c1↑, c2↓].\nGENERATE_EXPLANATION:`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExplanationPrompt {
    pub text: String,
}

impl ExplanationPrompt {
    /// Recovers the `(channel, direction)` list from a prompt.
    pub fn parse(text: &str) -> Result<Vec<(String, Direction)>, ExplainError> {
        let bad = |why: &str| ExplainError::MalformedPrompt(why.to_string());
        let body = text
            .strip_prefix(PROMPT_HEAD)
            .and_then(|rest| rest.strip_suffix(PROMPT_TAIL))
            .ok_or_else(|| bad("missing CAUSES header or GENERATE_EXPLANATION trailer"))?;
        if body.is_empty() {
            return Err(bad("no causes"));
        }
        body.split(", ")
            .map(|item| {
                let arrow = item.chars().last().ok_or_else(|| bad("empty cause"))?;
                let direction = match arrow {
                    UP_ARROW => Direction::Up,
                    DOWN_ARROW => Direction::Down,
                    _ => return Err(bad("cause without direction arrow")),
                };
                let channel = &item[..item.len() - arrow.len_utf8()];
                if channel.is_empty() {
                    return Err(bad("empty channel name"));
                }
                Ok((channel.to_string(), direction))
            })
            .collect()
    }
}

impl fmt::Display for ExplanationPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

pub fn build_prompt(causes: &[DirectedCause]) -> Result<ExplanationPrompt, ExplainError> {
    if causes.is_empty() {
        return Err(ExplainError::EmptyCauseList);
    }
    let items: Vec<String> = causes.iter().map(ToString::to_string).collect();
    Ok(ExplanationPrompt { text: format!("{PROMPT_HEAD}{}{PROMPT_TAIL}", items.join(", ")) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRule {
    /// Case-insensitive glob over channel ids; `*` matches any run.
    pub pattern: String,
    pub action: String,
}

impl ActionRule {
    pub fn new(pattern: &str, action: &str) -> Self {
        Self { pattern: pattern.into(), action: action.into() }
    }
}

/// Display aliases and corrective actions keyed by channel pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionCatalog {
    pub aliases: BTreeMap<String, String>,
    /// First matching rule wins.
    pub actions: Vec<ActionRule>,
    pub fallback_action: String,
}

impl Default for ActionCatalog {
    fn default() -> Self {
        Self {
            aliases: BTreeMap::new(),
            actions: vec![
                ActionRule::new("occupancy*", "adjusting the setpoint or redistributing occupants"),
                ActionRule::new("*damper*", "reopening the damper slightly or reducing the setpoint"),
                ActionRule::new("*temp*", "adjusting the zone temperature setpoint"),
                ActionRule::new("*chilled*", "checking the chilled-water valve and chiller staging"),
                ActionRule::new("*flow*", "checking the flow control valve"),
                ActionRule::new("*fan*", "reviewing the fan speed schedule"),
            ],
            fallback_action: "reviewing the equipment schedule and control setpoints".into(),
        }
    }
}

impl ActionCatalog {
    pub fn display_name<'a>(&'a self, channel: &'a str) -> &'a str {
        self.aliases.get(channel).map_or(channel, String::as_str)
    }

    pub fn action_for(&self, channel: &str) -> &str {
        self.actions
            .iter()
            .find(|r| glob_match(&r.pattern.to_lowercase(), &channel.to_lowercase()))
            .map_or(self.fallback_action.as_str(), |r| r.action.as_str())
    }
}

fn glob_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(pos) => rest = &rest[pos + mid.len()..],
            None => return false,
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationSource {
    Template,
    Remote,
    /// Causes only, no prose.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub text: String,
    pub source: ExplanationSource,
    pub causes: Vec<DirectedCause>,
}

pub fn format_time(epoch: i64) -> String {
    DateTime::from_timestamp(epoch, 0).map_or_else(|| epoch.to_string(), |t| t.format("%Y-%m-%d %H:%M UTC").to_string())
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    chars.next().map_or_else(String::new, |c| c.to_uppercase().chain(chars).collect())
}

/// Deterministic two-sentence explanation: the attribution in ranked order,
/// then one corrective action keyed on the top cause.
pub fn render_template(
    causes: &[DirectedCause],
    target: &str,
    anomaly: &AnomalyEvent,
    catalog: &ActionCatalog,
) -> Result<Explanation, ExplainError> {
    let top = causes.first().ok_or(ExplainError::EmptyCauseList)?;
    let kind = if anomaly.z_score >= 0.0 { "spike" } else { "drop" };
    let phrases: Vec<String> =
        causes.iter().map(|c| format!("{} {}", c.direction.phrase(), catalog.display_name(&c.channel))).collect();
    let attribution = match phrases.as_slice() {
        [only] => only.clone(),
        [first, second] => format!("{first} combined with {second}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
        [] => unreachable!(),
    };
    let text = format!(
        "The {kind} in {} at {} was driven by {attribution}. {} could mitigate this inefficiency.",
        catalog.display_name(target),
        format_time(anomaly.time),
        capitalize(catalog.action_for(&top.channel)),
    );
    Ok(Explanation { text, source: ExplanationSource::Template, causes: causes.to_vec() })
}

/// Text used when the target has no causal parents in the window.
pub fn render_unexplained(target: &str, anomaly: &AnomalyEvent, catalog: &ActionCatalog) -> Explanation {
    let kind = if anomaly.z_score >= 0.0 { "spike" } else { "drop" };
    Explanation {
        text: format!(
            "The {kind} in {} at {} could not be attributed to any monitored variable in the preceding window.",
            catalog.display_name(target),
            format_time(anomaly.time)
        ),
        source: ExplanationSource::Template,
        causes: Vec::new(),
    }
}

/// One explanation record as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub anomaly_time: i64,
    pub target: String,
    pub causes: Vec<DirectedCause>,
    pub prompt: String,
    pub text: String,
    pub source: ExplanationSource,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Channel;
    use proptest::prelude::*;

    fn cause(channel: &str, direction: Direction) -> DirectedCause {
        DirectedCause { channel: channel.into(), direction, f_stat: 1.0 }
    }

    fn frame_with(values: Vec<f64>) -> TimeSeriesFrame {
        TimeSeriesFrame {
            start: 0,
            interval: 3600,
            channels: vec![Channel { id: "x".into(), mean: 0.0, std: 1.0, zero_variance: false, values }],
        }
    }

    fn event(index: usize) -> AnomalyEvent {
        AnomalyEvent { time: 1_555_336_800, index, z_score: 4.0, magnitude: 1.0 }
    }

    fn ranked(channel: &str) -> RankedCause {
        RankedCause { channel: channel.into(), f_stat: 3.0 }
    }

    #[test]
    fn direction_up_and_tie() {
        let up = annotate_direction(&ranked("x"), &frame_with(vec![0.0, 0.0, 0.0, 0.0, 2.0]), &event(4), 4).unwrap();
        assert_eq!(up.direction, Direction::Up);
        let tie = annotate_direction(&ranked("x"), &frame_with(vec![5.0; 5]), &event(4), 4).unwrap();
        assert_eq!(tie.direction, Direction::Down);
        assert_eq!(
            annotate_direction(&ranked("x"), &frame_with(vec![5.0; 5]), &event(3), 4),
            Err(ExplainError::WindowTooShort { index: 3, window: 4 })
        );
        assert!(matches!(
            annotate_direction(&ranked("y"), &frame_with(vec![5.0; 5]), &event(4), 4),
            Err(ExplainError::UnknownChannel(_))
        ));
    }

    #[test]
    fn prompt_bytes() {
        let p = build_prompt(&[cause("occupancy", Direction::Up), cause("zone3_temp", Direction::Up)]).unwrap();
        assert_eq!(p.text, "CAUSES: [occupancy↑, zone3_temp↑].\nGENERATE_EXPLANATION:");
        assert_eq!(
            p.text.as_bytes(),
            b"CAUSES: [occupancy\xe2\x86\x91, zone3_temp\xe2\x86\x91].\nGENERATE_EXPLANATION:"
        );
        let p = build_prompt(&[
            cause("zone_temp", Direction::Up),
            cause("occupancy", Direction::Up),
            cause("damper_closed", Direction::Down),
        ])
        .unwrap();
        assert_eq!(p.text, "CAUSES: [zone_temp↑, occupancy↑, damper_closed↓].\nGENERATE_EXPLANATION:");
        assert_eq!(build_prompt(&[cause("x", Direction::Down)]).unwrap().text, "CAUSES: [x↓].\nGENERATE_EXPLANATION:");
        assert_eq!(build_prompt(&[]), Err(ExplainError::EmptyCauseList));
    }

    #[test]
    fn prompt_parse_rejects_garbage() {
        assert!(ExplanationPrompt::parse("CAUSES: [x].\nGENERATE_EXPLANATION:").is_err());
        assert!(ExplanationPrompt::parse("CAUSES: [].\nGENERATE_EXPLANATION:").is_err());
        assert!(ExplanationPrompt::parse("hello").is_err());
    }

    proptest! {
        #[test]
        fn prompt_round_trips(items in prop::collection::vec(("[a-zA-Z0-9_ .-]{1,12}", any::<bool>()), 1..6)) {
            let causes: Vec<DirectedCause> = items
                .iter()
                .map(|(c, up)| cause(c, if *up { Direction::Up } else { Direction::Down }))
                .collect();
            let prompt = build_prompt(&causes).unwrap();
            let parsed = ExplanationPrompt::parse(&prompt.text).unwrap();
            let expected: Vec<(String, Direction)> = causes.iter().map(|c| (c.channel.clone(), c.direction)).collect();
            prop_assert_eq!(parsed, expected);
        }
    }

    #[test]
    fn template_golden() {
        let causes = [cause("occupancy", Direction::Up), cause("zone3_temp", Direction::Up)];
        let e = render_template(&causes, "energy", &event(30), &ActionCatalog::default()).unwrap();
        assert_eq!(
            e.text,
            "The spike in energy at 2019-04-15 14:00 UTC was driven by a rise in occupancy combined with a rise \
             in zone3_temp. Adjusting the setpoint or redistributing occupants could mitigate this inefficiency."
        );
        assert_eq!(e.source, ExplanationSource::Template);
        assert!(e.text.find("occupancy").unwrap() < e.text.find("zone3_temp").unwrap());
        assert_eq!(e.text.matches("could mitigate").count(), 1);
        let again = render_template(&causes, "energy", &event(30), &ActionCatalog::default()).unwrap();
        assert_eq!(again.text.as_bytes(), e.text.as_bytes());
    }

    #[test]
    fn template_single_and_many() {
        let one =
            render_template(&[cause("damper_closed", Direction::Down)], "energy", &event(1), &ActionCatalog::default())
                .unwrap();
        assert_eq!(one.text.matches(". ").count() + 1, 2);
        assert!(one.text.contains("a drop in damper_closed"));
        assert!(one.text.contains("Reopening the damper"));

        let three = [cause("a", Direction::Up), cause("b", Direction::Down), cause("c", Direction::Up)];
        let t = render_template(&three, "energy", &event(1), &ActionCatalog::default()).unwrap();
        assert!(t.text.contains("a rise in a, a drop in b, and a rise in c."));
        assert!(t.text.contains("Reviewing the equipment schedule"));
    }

    #[test]
    fn aliases_are_used() {
        let mut catalog = ActionCatalog::default();
        catalog.aliases.insert("occ_z3".into(), "occupancy in Zone 3".into());
        let e = render_template(&[cause("occ_z3", Direction::Up)], "energy", &event(1), &catalog).unwrap();
        assert!(e.text.contains("a rise in occupancy in Zone 3"));
    }

    #[test]
    fn glob() {
        assert!(glob_match("occupancy*", "occupancy_count"));
        assert!(glob_match("*temp*", "zone3_temp"));
        assert!(glob_match("a*b*c", "axxbyyc"));
        assert!(!glob_match("a*b*c", "axxc"));
        assert!(!glob_match("ab*ba", "aba"));
        assert!(glob_match("exact", "exact"));
    }

    #[test]
    fn record_json_shape() {
        let r = ExplanationRecord {
            anomaly_time: 5,
            target: "energy".into(),
            causes: vec![cause("a", Direction::Up)],
            prompt: "p".into(),
            text: "t".into(),
            source: ExplanationSource::Template,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"anomaly_time":5,"target":"energy","causes":[{"channel":"a","direction":"up","f_stat":1.0}],"prompt":"p","text":"t","source":"template"}"#
        );
    }
}
