//! Binary classification metrics over prediction records and the burn-in/replay experiment.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::concept_tree::ConceptTree;
use crate::em::{FitConfig, Parallelism};
use crate::error::{Error, Result};
use crate::inference::{posteriors, predict, ObservationSet};
use crate::model::Params;
use crate::online::{ClassroomSession, OnlineConfig};
use crate::records::{check_per_student_order, InteractionRecord, PredictionRecord};
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Rank-based AUC; tied scores share their average rank.
pub fn auc(records: &[PredictionRecord]) -> Result<f64> {
    let pos = records.iter().filter(|r| r.actual == 1).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both outcomes"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].p_correct.total_cmp(&records[b].p_correct));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].p_correct == records[order[i]].p_correct {
            j += 1;
        }
        // ranks i+1 ..= j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if records[k].actual == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion(records: &[PredictionRecord], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for r in records {
        match (r.p_correct >= threshold, r.actual == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn accuracy(records: &[PredictionRecord], threshold: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of no records"));
    }
    let c = confusion(records, threshold);
    Ok((c.tp + c.tn) as f64 / records.len() as f64)
}

/// F1 of the correct-answer class.
pub fn f1(records: &[PredictionRecord], threshold: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("F1 of no records"));
    }
    let c = confusion(records, threshold);
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        return Err(Error::UndefinedMetric("F1 without positive predictions or outcomes"));
    }
    Ok(2.0 * c.tp as f64 / den as f64)
}

/// Micro-averaged over all records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub n_records: usize,
    pub positive_rate: f64,
}

impl MetricsReport {
    pub fn compute(records: &[PredictionRecord], threshold: f64) -> Result<Self> {
        Ok(Self {
            auc: auc(records)?,
            accuracy: accuracy(records, threshold)?,
            f1: f1(records, threshold)?,
            n_records: records.len(),
            positive_rate: records.iter().filter(|r| r.actual == 1).count() as f64 / records.len() as f64,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>10}", "metric", "value")?;
        writeln!(f, "{:<14}{:>10.4}", "AUC", self.auc)?;
        writeln!(f, "{:<14}{:>10.4}", "ACC", self.accuracy)?;
        writeln!(f, "{:<14}{:>10.4}", "F1", self.f1)?;
        writeln!(f, "{:<14}{:>10}", "records", self.n_records)?;
        write!(f, "{:<14}{:>10.4}", "positive rate", self.positive_rate)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub burn_in_count: usize,
    pub fit: FitConfig,
    pub threshold: f64,
    pub online: OnlineConfig,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            burn_in_count: 10,
            fit: FitConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            online: OnlineConfig::default(),
            threads: 1,
        }
    }
}

/// The first `burn_in_count` interactions of every student, and the rest.
pub fn split_burn_in(
    stream: &[InteractionRecord],
    burn_in_count: usize,
) -> (Vec<InteractionRecord>, Vec<InteractionRecord>) {
    let mut seen: IndexMap<&str, usize> = IndexMap::new();
    let mut burn = Vec::new();
    let mut rest = Vec::new();
    for r in stream {
        let n = seen.entry(r.student_id.as_str()).or_insert(0);
        if *n < burn_in_count {
            burn.push(r.clone());
        } else {
            rest.push(r.clone());
        }
        *n += 1;
    }
    (burn, rest)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub metrics: MetricsReport,
    pub predictions: Vec<PredictionRecord>,
    pub session: ClassroomSession<f64>,
}

/// Burn-in fit on each student's first interactions, prequential replay of the rest, scoring.
pub fn run_experiment(
    tree: &ConceptTree,
    stream: &[InteractionRecord],
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome> {
    check_per_student_order(stream)?;
    let par = Parallelism::with_threads(config.threads)?;
    let (burn, rest) = split_burn_in(stream, config.burn_in_count);
    let mut session = ClassroomSession::burn_in_fit(tree, &burn, &config.fit, config.online, &par)?;
    let predictions = session.replay(&rest, &par)?;
    let metrics = MetricsReport::compute(&predictions, config.threshold)?;
    Ok(ExperimentOutcome {
        metrics,
        predictions,
        session,
    })
}

/// Prequential predictions under fixed parameters: each interaction is
/// predicted from the student's burn-in and earlier post-burn-in responses.
pub fn replay_fixed<T: Scalar>(
    tree: &ConceptTree,
    params: &Params<T>,
    stream: &[InteractionRecord],
    burn_in_count: usize,
) -> Result<Vec<PredictionRecord>> {
    check_per_student_order(stream)?;
    let mut seen: IndexMap<&str, (usize, ObservationSet)> = IndexMap::new();
    let mut out = Vec::new();
    for r in stream {
        let (n, obs) = seen
            .entry(r.student_id.as_str())
            .or_insert_with(|| (0, ObservationSet::new(tree)));
        if *n >= burn_in_count {
            let belief = posteriors(tree, params, obs)?;
            let p = predict(tree, params, &belief, &r.question())?;
            out.push(PredictionRecord {
                student_id: r.student_id.clone(),
                question_id: r.question_id.clone(),
                p_correct: p.prob_correct.to_f64_lossy(),
                actual: r.correct,
                seq: r.seq,
            });
        }
        obs.push_observation(r.observation(tree)?)?;
        *n += 1;
    }
    Ok(out)
}

/// Every record scored with the same probability: the overall correct rate.
pub fn constant_baseline(records: &[PredictionRecord]) -> Vec<PredictionRecord> {
    let rate = records.iter().filter(|r| r.actual == 1).count() as f64 / records.len().max(1) as f64;
    records
        .iter()
        .map(|r| PredictionRecord {
            p_correct: rate,
            ..r.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(scores: &[(f64, u8)]) -> Vec<PredictionRecord> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &(p, a))| PredictionRecord {
                student_id: "s".into(),
                question_id: format!("q{i}"),
                p_correct: p,
                actual: a,
                seq: i as u64,
            })
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&recs(&[(0.9, 1), (0.8, 1), (0.2, 0)])).unwrap(), 1.0);
        assert_eq!(auc(&recs(&[(0.5, 1), (0.5, 0), (0.5, 1)])).unwrap(), 0.5);
        assert_eq!(auc(&recs(&[(0.9, 1), (0.8, 0), (0.7, 1), (0.6, 0)])).unwrap(), 0.75);
        assert!(matches!(auc(&recs(&[(0.9, 1)])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn accuracy_and_f1_examples() {
        let all = recs(&[(1.0, 1), (1.0, 1)]);
        assert_eq!(accuracy(&all, 0.5).unwrap(), 1.0);
        assert_eq!(f1(&all, 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&recs(&[(0.6, 1), (0.4, 1)]), 0.5).unwrap(), 0.5);
        // tp 2, fp 1, fn 1
        let r = recs(&[(0.9, 1), (0.8, 1), (0.7, 0), (0.1, 1), (0.2, 0)]);
        assert!((f1(&r, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[], 0.5).is_err());
        assert!(f1(&recs(&[(0.1, 0)]), 0.5).is_err());
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(accuracy(&recs(&[(0.5, 1)]), 0.5).unwrap(), 1.0);
    }

    #[test]
    fn split_keeps_per_student_prefix() {
        let mk = |s: &str, seq| InteractionRecord {
            student_id: s.into(),
            question_id: "q".into(),
            kc_id: "A".into(),
            difficulty: crate::concept_tree::Difficulty::Easy,
            correct: 1,
            seq,
        };
        let stream = vec![mk("a", 0), mk("b", 0), mk("a", 1), mk("a", 2), mk("b", 1)];
        let (burn, rest) = split_burn_in(&stream, 2);
        assert_eq!(burn.len(), 4);
        assert_eq!(rest, vec![mk("a", 2)]);
    }

    #[test]
    fn constant_baseline_has_half_auc() {
        let r = recs(&[(0.9, 1), (0.1, 0), (0.3, 1)]);
        assert_eq!(auc(&constant_baseline(&r)).unwrap(), 0.5);
    }

    #[test]
    fn report_table() {
        let m = MetricsReport::compute(&recs(&[(0.9, 1), (0.1, 0)]), 0.5).unwrap();
        let text = m.to_string();
        assert!(text.contains("AUC") && text.contains("1.0000"));
        assert_eq!(m.positive_rate, 0.5);
    }
}
