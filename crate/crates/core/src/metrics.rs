//! Scoring of ranked cause sets against annotated causes: top-1 accuracy,
//! precision@3 and recall@3.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::CauseSet;

const TOP: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no annotations to evaluate")]
    EmptyTruth,
    #[error("two annotations share anomaly_time {0}")]
    DuplicateAnnotationTime(i64),
    #[error("annotation at {0} has no true causes")]
    EmptyCauses(i64),
    #[error("annotation at {time}: primary cause `{primary}` is not among its true causes")]
    PrimaryNotInTrueCauses { time: i64, primary: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAnnotation {
    pub anomaly_time: i64,
    pub primary_cause: String,
    pub true_causes: Vec<String>,
}

impl GroundTruthAnnotation {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.true_causes.is_empty() {
            return Err(MetricsError::EmptyCauses(self.anomaly_time));
        }
        if !self.true_causes.contains(&self.primary_cause) {
            return Err(MetricsError::PrimaryNotInTrueCauses {
                time: self.anomaly_time,
                primary: self.primary_cause.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub anomaly_time: i64,
    pub matched: bool,
    pub hit_at_1: bool,
    pub precision_at_3: f64,
    pub recall_at_3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub acc_at_1: f64,
    pub precision_at_3: f64,
    pub recall_at_3: f64,
    pub n_evaluated: usize,
    pub per_anomaly: Vec<AnomalyScore>,
}

impl EvaluationReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>7} {:>7} {:>7} {:>7}", "anomaly_time", "matched", "hit@1", "P@3", "R@3");
        for s in &self.per_anomaly {
            let _ = writeln!(
                out,
                "{:<14} {:>7} {:>7} {:>7.3} {:>7.3}",
                s.anomaly_time, s.matched, s.hit_at_1, s.precision_at_3, s.recall_at_3
            );
        }
        let _ = writeln!(
            out,
            "Acc@1 {:.4}  P@3 {:.4}  R@3 {:.4}  (matched {} of {})",
            self.acc_at_1,
            self.precision_at_3,
            self.recall_at_3,
            self.n_evaluated,
            self.per_anomaly.len()
        );
        out
    }
}

/// Scores one prediction against one annotation.
pub fn score(prediction: &CauseSet, truth: &GroundTruthAnnotation) -> (bool, f64, f64) {
    let top: Vec<&str> = prediction.channels().take(TOP).collect();
    let truth_set: BTreeSet<&str> = truth.true_causes.iter().map(String::as_str).collect();
    let hits = top.iter().collect::<BTreeSet<_>>().into_iter().filter(|c| truth_set.contains(**c)).count();
    let hit_at_1 = top.first() == Some(&truth.primary_cause.as_str());
    let precision = if top.is_empty() { 0.0 } else { hits as f64 / top.len().min(TOP) as f64 };
    let recall = hits as f64 / truth_set.len() as f64;
    (hit_at_1, precision, recall)
}

/// Matches predictions to annotations by anomaly time (within
/// `tolerance_secs`, nearest first, earliest on ties) and averages the
/// per-annotation scores. Unmatched annotations score zero.
pub fn evaluate(
    predictions: &[CauseSet],
    truth: &[GroundTruthAnnotation],
    tolerance_secs: i64,
) -> Result<EvaluationReport, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyTruth);
    }
    let mut seen = BTreeSet::new();
    for t in truth {
        t.validate()?;
        if !seen.insert(t.anomaly_time) {
            return Err(MetricsError::DuplicateAnnotationTime(t.anomaly_time));
        }
    }
    // first prediction wins for a repeated time
    let mut by_time: BTreeMap<i64, &CauseSet> = BTreeMap::new();
    for p in predictions {
        if let Some(t) = p.anomaly_time {
            by_time.entry(t).or_insert(p);
        }
    }
    let tol = tolerance_secs.max(0);

    let per_anomaly: Vec<AnomalyScore> = truth
        .iter()
        .map(|t| {
            let matched = by_time
                .range(t.anomaly_time - tol..=t.anomaly_time + tol)
                .min_by_key(|(time, _)| ((*time - t.anomaly_time).abs(), **time))
                .map(|(_, p)| *p);
            match matched {
                Some(p) => {
                    let (hit_at_1, precision_at_3, recall_at_3) = score(p, t);
                    AnomalyScore { anomaly_time: t.anomaly_time, matched: true, hit_at_1, precision_at_3, recall_at_3 }
                }
                None => AnomalyScore {
                    anomaly_time: t.anomaly_time,
                    matched: false,
                    hit_at_1: false,
                    precision_at_3: 0.0,
                    recall_at_3: 0.0,
                },
            }
        })
        .collect();

    let n = per_anomaly.len() as f64;
    Ok(EvaluationReport {
        acc_at_1: per_anomaly.iter().filter(|s| s.hit_at_1).count() as f64 / n,
        precision_at_3: per_anomaly.iter().map(|s| s.precision_at_3).sum::<f64>() / n,
        recall_at_3: per_anomaly.iter().map(|s| s.recall_at_3).sum::<f64>() / n,
        n_evaluated: per_anomaly.iter().filter(|s| s.matched).count(),
        per_anomaly,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RankedCause;

    fn prediction(time: i64, causes: &[&str]) -> CauseSet {
        CauseSet {
            target: "energy".into(),
            anomaly_time: Some(time),
            causes: causes
                .iter()
                .enumerate()
                .map(|(i, c)| RankedCause { channel: c.to_string(), f_stat: 10.0 - i as f64 })
                .collect(),
        }
    }

    fn annotation(time: i64, primary: &str, causes: &[&str]) -> GroundTruthAnnotation {
        GroundTruthAnnotation {
            anomaly_time: time,
            primary_cause: primary.into(),
            true_causes: causes.iter().map(|c| c.to_string()).collect(),
        }
    }

    #[test]
    fn top1_accuracy_counts() {
        let preds = [prediction(1, &["a"]), prediction(2, &["x"])];
        let truth = [annotation(1, "a", &["a"]), annotation(2, "b", &["b"])];
        let r = evaluate(&preds, &truth, 0).unwrap();
        assert_eq!(r.acc_at_1, 0.5);
        assert_eq!(r.n_evaluated, 2);
    }

    #[test]
    fn precision_recall_set_arithmetic() {
        let (_, p, r) = score(&prediction(1, &["a", "b", "c"]), &annotation(1, "a", &["a", "d"]));
        assert_eq!(p, 1.0 / 3.0);
        assert_eq!(r, 1.0 / 2.0);
    }

    #[test]
    fn short_prediction_uses_own_length() {
        let (hit, p, r) = score(&prediction(1, &["a"]), &annotation(1, "a", &["a"]));
        assert!(hit);
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn only_top_three_count() {
        let (_, p, r) = score(&prediction(1, &["x", "y", "z", "a"]), &annotation(1, "a", &["a"]));
        assert_eq!((p, r), (0.0, 0.0));
    }

    #[test]
    fn unmatched_annotation_scores_zero() {
        let r = evaluate(&[prediction(5, &["a"])], &[annotation(1, "a", &["a"])], 0).unwrap();
        assert_eq!((r.acc_at_1, r.precision_at_3, r.recall_at_3, r.n_evaluated), (0.0, 0.0, 0.0, 0));
        let r = evaluate(&[prediction(5, &["a"])], &[annotation(1, "a", &["a"])], 3600).unwrap();
        assert_eq!(r.acc_at_1, 1.0);
    }

    #[test]
    fn errors() {
        assert_eq!(evaluate(&[], &[], 0), Err(MetricsError::EmptyTruth));
        let dup = [annotation(1, "a", &["a"]), annotation(1, "b", &["b"])];
        assert_eq!(evaluate(&[], &dup, 0), Err(MetricsError::DuplicateAnnotationTime(1)));
        assert!(matches!(
            evaluate(&[], &[annotation(1, "a", &["b"])], 0),
            Err(MetricsError::PrimaryNotInTrueCauses { .. })
        ));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let preds = [prediction(1, &["a", "c", "b"]), prediction(2, &["d"])];
        let truth = [annotation(1, "a", &["b", "a", "c"]), annotation(2, "d", &["d"])];
        let r = evaluate(&preds, &truth, 0).unwrap();
        assert_eq!((r.acc_at_1, r.precision_at_3, r.recall_at_3), (1.0, 1.0, 1.0));
        assert!(r.to_table().contains("Acc@1 1.0000"));
    }
}
