//! JSON-lines record formats shared by the simulator, the online session and evaluation.

use std::io::BufRead;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::concept_tree::{ConceptTree, Difficulty, QuestionMeta};
use crate::error::{Error, Result};
use crate::inference::Observation;

/// One line of an interaction stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub student_id: String,
    pub question_id: String,
    pub kc_id: String,
    pub difficulty: Difficulty,
    /// 1 for a correct answer, 0 otherwise.
    pub correct: u8,
    /// Position of this interaction in the student's own sequence.
    pub seq: u64,
}

impl InteractionRecord {
    pub fn is_correct(&self) -> bool {
        self.correct == 1
    }

    pub fn question(&self) -> QuestionMeta {
        QuestionMeta {
            question_id: self.question_id.clone(),
            kc: self.kc_id.clone(),
            difficulty: self.difficulty,
            solve_rate: None,
        }
    }

    pub fn observation(&self, tree: &ConceptTree) -> Result<Observation> {
        let node = tree
            .index_of(&self.kc_id)
            .ok_or_else(|| Error::UnknownNode(self.kc_id.clone()))?;
        Ok(Observation {
            question_id: self.question_id.clone(),
            node,
            difficulty: self.difficulty,
            correct: self.is_correct(),
        })
    }
}

/// One prequential prediction: the probability issued before `actual` was revealed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub student_id: String,
    pub question_id: String,
    pub p_correct: f64,
    pub actual: u8,
    pub seq: u64,
}

fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_interactions<R: BufRead>(reader: R) -> Result<Vec<InteractionRecord>> {
    let recs: Vec<InteractionRecord> = read_jsonl(reader)?;
    if let Some((i, r)) = recs.iter().enumerate().find(|(_, r)| r.correct > 1) {
        return Err(Error::Record {
            line: i + 1,
            message: format!("correct must be 0 or 1, got {}", r.correct),
        });
    }
    Ok(recs)
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<PredictionRecord>> {
    read_jsonl(reader)
}

/// Per-record CSV export for plotting tools.
pub fn predictions_to_csv(records: &[PredictionRecord]) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in records {
        wtr.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8")
}

/// Checks that each student's records appear in strictly increasing `seq` order.
pub fn check_per_student_order(stream: &[InteractionRecord]) -> Result<()> {
    let mut last: std::collections::HashMap<&str, u64> = std::collections::HashMap::new();
    for (i, r) in stream.iter().enumerate() {
        if let Some(&prev) = last.get(r.student_id.as_str()) {
            if r.seq <= prev {
                return Err(Error::Record {
                    line: i + 1,
                    message: format!(
                        "student `{}` has seq {} after seq {}",
                        r.student_id, r.seq, prev
                    ),
                });
            }
        }
        last.insert(&r.student_id, r.seq);
    }
    Ok(())
}
