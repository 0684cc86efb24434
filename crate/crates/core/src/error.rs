use thiserror::Error;

use crate::concept_tree::{Difficulty, ValidationReport};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("malformed tree document: {0}")]
    Malformed(String),
    #[error("invalid tree:\n{0}")]
    Invalid(ValidationReport),
}

#[derive(Debug, Error)]
pub enum QuestionError {
    #[error("malformed question metadata: {0}")]
    Malformed(String),
    #[error("unknown difficulty `{0}`")]
    BadDifficulty(String),
    #[error("invalid difficulty thresholds: hi={hi}, lo={lo} (need 0 < lo < hi < 1)")]
    BadThresholds { hi: f64, lo: f64 },
    #[error("solve rate {0} outside [0, 1]")]
    BadSolveRate(f64),
    #[error("question `{question_id}` is labeled with several concepts: {kcs:?}")]
    MultipleKcs { question_id: String, kcs: Vec<String> },
    #[error("question `{question_id}` says {stated} but its solve rate bins as {derived}")]
    InconsistentDifficulty {
        question_id: String,
        stated: Difficulty,
        derived: Difficulty,
    },
    #[error("duplicate question id `{0}`")]
    DuplicateQuestion(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Question(#[from] QuestionError),
    #[error("unknown concept `{0}`")]
    UnknownNode(String),
    #[error("parameter {name} = {value} is outside (0, 1)")]
    InvalidParameter { name: String, value: f64 },
    #[error("parameters do not satisfy eps < r_hard < r_med < r_easy")]
    OrderingViolated,
    #[error("parameter vector has {found} transition entries, tree has {expected} nodes")]
    ParameterShape { expected: usize, found: usize },
    #[error("upward message into the parent of `{node}` vanished; parameters are degenerate")]
    DegenerateMessage { node: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("tree has {nodes} nodes; enumeration is limited to {max}")]
    TooLargeForEnumeration { nodes: usize, max: usize },
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
