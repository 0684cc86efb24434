//! Knowledge concept trees, question metadata and tree preprocessing.
//!
//! A tree arrives as a flat node list (`{ "nodes": [ {id, label, parent} ] }`),
//! is validated into an immutable [`ConceptTree`], and questions are attached
//! to its nodes through a [`QuestionBank`].

mod merge;
mod question;
mod tree;

pub use merge::{merge_sparse_leaves, MergeOutcome};
pub use question::{
    assign_difficulty, Difficulty, DifficultyBins, MultiKcPolicy, QuestionBank, QuestionFormat,
    QuestionMeta, QuestionViolation,
};
pub use tree::{
    parse_tree, validate_document, validate_tree, ConceptNode, ConceptTree, NodeIdx, NodeRecord,
    TreeDocument, TreeStats, ValidationReport, Violation,
};
