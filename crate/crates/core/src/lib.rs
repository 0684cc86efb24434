//! Knowledge tracing with a hidden Markov tree over a concept hierarchy.
//!
//! Each student has a binary mastery variable per concept. Mastering a concept
//! implies mastering all of its sub-concepts, and each graded response depends
//! only on the mastery of the concept its question is labeled with. Parameters
//! are fitted by EM with closed-form updates, posteriors come from an exact
//! upward-downward sweep, and the online session keeps one personalized
//! parameter vector per student.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the CLI and file formats use.

pub mod cli;
pub mod concept_tree;
pub mod em;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod online;
pub mod records;
pub mod scalar;
pub mod simulate;

pub use concept_tree::{ConceptTree, Difficulty, DifficultyBins, QuestionBank, QuestionMeta};
pub use error::{Error, Result};
pub use inference::{ObservationSet, Observation};
pub use scalar::Scalar;

pub type Parameters = model::Params<f64>;
pub type ParametersF32 = model::Params<f32>;
pub type BeliefTable = inference::BeliefTable<f64>;
pub type BeliefTableF32 = inference::BeliefTable<f32>;
pub type Prediction = inference::Prediction<f64>;
