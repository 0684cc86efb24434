use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tree::{ConceptTree, NodeIdx};
use crate::error::QuestionError;

/// Difficulty class of an exercise, selecting which mastered-emission rate applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Difficulty::Easy => 0,
            Difficulty::Medium => 1,
            Difficulty::Hard => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = QuestionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "medium" | "med" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(QuestionError::BadDifficulty(other.to_string())),
        }
    }
}

/// Cut points mapping a historical solve rate to a difficulty class.
///
/// `rate >= hi` is easy, `lo <= rate < hi` is medium, anything lower is hard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBins {
    hi: f64,
    lo: f64,
}

impl Default for DifficultyBins {
    fn default() -> Self {
        Self { hi: 0.75, lo: 0.50 }
    }
}

impl DifficultyBins {
    pub fn new(hi: f64, lo: f64) -> Result<Self, QuestionError> {
        let inside = |x: f64| x > 0.0 && x < 1.0;
        if !(inside(hi) && inside(lo) && hi > lo) {
            return Err(QuestionError::BadThresholds { hi, lo });
        }
        Ok(Self { hi, lo })
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn assign(&self, solve_rate: f64) -> Result<Difficulty, QuestionError> {
        if !(0.0..=1.0).contains(&solve_rate) {
            return Err(QuestionError::BadSolveRate(solve_rate));
        }
        Ok(if solve_rate >= self.hi {
            Difficulty::Easy
        } else if solve_rate >= self.lo {
            Difficulty::Medium
        } else {
            Difficulty::Hard
        })
    }
}

/// Free-function form of [`DifficultyBins::assign`] that also validates the cut points.
pub fn assign_difficulty(solve_rate: f64, hi: f64, lo: f64) -> Result<Difficulty, QuestionError> {
    DifficultyBins::new(hi, lo)?.assign(solve_rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionMeta {
    pub question_id: String,
    /// Id of the concept node the question is labeled with.
    pub kc: String,
    pub difficulty: Difficulty,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_rate: Option<f64>,
}

/// What to do when a question is tagged with more than one concept.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MultiKcPolicy {
    #[default]
    Reject,
    /// Keep the concept that labels the most questions in the whole file.
    KeepMostFrequent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionFormat {
    Csv,
    JsonLines,
}

impl QuestionFormat {
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => QuestionFormat::JsonLines,
            _ => QuestionFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct QuestionRow {
    question_id: String,
    kc_id: String,
    #[serde(default)]
    solve_rate: Option<f64>,
    #[serde(default)]
    difficulty: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct QuestionOutRow<'a> {
    question_id: &'a str,
    kc_id: &'a str,
    difficulty: Difficulty,
}

/// Problems found when checking a question bank against a tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuestionViolation {
    UnknownKc { question_id: String, kc: String },
    NotLeaf { question_id: String, kc: String },
}

impl fmt::Display for QuestionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuestionViolation::UnknownKc { question_id, kc } => {
                write!(f, "question `{question_id}` references unknown concept `{kc}`")
            }
            QuestionViolation::NotLeaf { question_id, kc } => {
                write!(f, "question `{question_id}` is labeled with non-leaf concept `{kc}`")
            }
        }
    }
}

/// Ordered collection of question metadata keyed by question id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuestionBank {
    questions: Vec<QuestionMeta>,
    index: HashMap<String, usize>,
}

impl QuestionBank {
    pub fn new(questions: Vec<QuestionMeta>) -> Result<Self, QuestionError> {
        let mut index = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            if index.insert(q.question_id.clone(), i).is_some() {
                return Err(QuestionError::DuplicateQuestion(q.question_id.clone()));
            }
        }
        Ok(Self { questions, index })
    }

    /// Reads question rows. CSV needs a header; JSON-lines has one object per line.
    pub fn read<R: Read>(
        reader: R,
        format: QuestionFormat,
        bins: &DifficultyBins,
        policy: MultiKcPolicy,
    ) -> Result<Self, QuestionError> {
        let rows = match format {
            QuestionFormat::Csv => {
                let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
                rdr.deserialize::<QuestionRow>()
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| QuestionError::Malformed(e.to_string()))?
            }
            QuestionFormat::JsonLines => {
                let mut text = String::new();
                let mut reader = reader;
                reader
                    .read_to_string(&mut text)
                    .map_err(|e| QuestionError::Malformed(e.to_string()))?;
                text.lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str::<QuestionRow>)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| QuestionError::Malformed(e.to_string()))?
            }
        };
        Self::from_rows(rows, bins, policy)
    }

    fn from_rows(
        rows: Vec<QuestionRow>,
        bins: &DifficultyBins,
        policy: MultiKcPolicy,
    ) -> Result<Self, QuestionError> {
        // Gather every (question, kc) label; a question may repeat across rows
        // or list several kcs separated by ';'.
        let mut order: Vec<String> = Vec::new();
        // kcs, solve rate, stated difficulty
        type Labels = (Vec<String>, Option<f64>, Option<String>);
        let mut grouped: HashMap<String, Labels> = HashMap::new();
        for row in rows {
            let entry = grouped.entry(row.question_id.clone()).or_insert_with(|| {
                order.push(row.question_id.clone());
                (Vec::new(), None, None)
            });
            for kc in row.kc_id.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                if !entry.0.iter().any(|k| k == kc) {
                    entry.0.push(kc.to_string());
                }
            }
            entry.1 = entry.1.or(row.solve_rate);
            if entry.2.is_none() {
                entry.2 = row.difficulty.filter(|d| !d.trim().is_empty());
            }
        }

        let mut kc_freq: HashMap<&str, usize> = HashMap::new();
        for (kcs, _, _) in grouped.values() {
            for kc in kcs {
                *kc_freq.entry(kc.as_str()).or_default() += 1;
            }
        }

        let mut questions = Vec::with_capacity(order.len());
        for qid in &order {
            let (kcs, solve_rate, difficulty) = &grouped[qid];
            let kc = match kcs.len() {
                0 => return Err(QuestionError::Malformed(format!("question `{qid}` has no kc_id"))),
                1 => kcs[0].clone(),
                _ => match policy {
                    MultiKcPolicy::Reject => {
                        return Err(QuestionError::MultipleKcs {
                            question_id: qid.clone(),
                            kcs: kcs.clone(),
                        })
                    }
                    MultiKcPolicy::KeepMostFrequent => {
                        // ties go to the first listed
                        let mut best = &kcs[0];
                        for k in &kcs[1..] {
                            if kc_freq[k.as_str()] > kc_freq[best.as_str()] {
                                best = k;
                            }
                        }
                        best.clone()
                    }
                },
            };
            let derived = solve_rate.map(|r| bins.assign(r)).transpose()?;
            let explicit = difficulty.as_deref().map(Difficulty::from_str).transpose()?;
            let difficulty = match (explicit, derived) {
                (Some(e), Some(d)) if e != d => {
                    return Err(QuestionError::InconsistentDifficulty {
                        question_id: qid.clone(),
                        stated: e,
                        derived: d,
                    })
                }
                (Some(e), _) => e,
                (None, Some(d)) => d,
                (None, None) => {
                    return Err(QuestionError::Malformed(format!(
                        "question `{qid}` needs a solve_rate or a difficulty"
                    )))
                }
            };
            questions.push(QuestionMeta {
                question_id: qid.clone(),
                kc,
                difficulty,
                solve_rate: *solve_rate,
            });
        }
        Self::new(questions)
    }

    /// Writes the bank as CSV with an explicit difficulty column.
    pub fn to_csv(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        for q in &self.questions {
            wtr.serialize(QuestionOutRow {
                question_id: &q.question_id,
                kc_id: &q.kc,
                difficulty: q.difficulty,
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8")
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn questions(&self) -> &[QuestionMeta] {
        &self.questions
    }

    pub fn get(&self, question_id: &str) -> Option<&QuestionMeta> {
        self.index.get(question_id).map(|&i| &self.questions[i])
    }

    /// Lists questions whose concept is missing from the tree or is not a leaf.
    pub fn check_against(&self, tree: &ConceptTree) -> Vec<QuestionViolation> {
        let mut out = Vec::new();
        for q in &self.questions {
            match tree.index_of(&q.kc) {
                None => out.push(QuestionViolation::UnknownKc {
                    question_id: q.question_id.clone(),
                    kc: q.kc.clone(),
                }),
                Some(i) if !tree.is_leaf(i) => out.push(QuestionViolation::NotLeaf {
                    question_id: q.question_id.clone(),
                    kc: q.kc.clone(),
                }),
                _ => {}
            }
        }
        out
    }

    /// Number of distinct questions attached to each node id.
    pub fn counts_by_kc(&self) -> HashMap<String, usize> {
        let mut out = HashMap::new();
        for q in &self.questions {
            *out.entry(q.kc.clone()).or_default() += 1;
        }
        out
    }

    /// Questions grouped by node index. Questions with unknown concepts are skipped.
    pub fn by_node(&self, tree: &ConceptTree) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); tree.len()];
        for (i, q) in self.questions.iter().enumerate() {
            if let Some(n) = tree.index_of(&q.kc) {
                out[n].push(i);
            }
        }
        out
    }

    /// Relabels questions after concepts were merged away.
    pub fn relabel(&mut self, mapping: &HashMap<String, String>) {
        for q in &mut self.questions {
            if let Some(to) = mapping.get(&q.kc) {
                q.kc = to.clone();
            }
        }
    }

    pub fn node_of(&self, tree: &ConceptTree, question_id: &str) -> Option<NodeIdx> {
        self.get(question_id).and_then(|q| tree.index_of(&q.kc))
    }
}
