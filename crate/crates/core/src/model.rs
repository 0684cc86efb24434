//! Parameter vector and the transition / emission kernels of the tree model.
//!
//! Every concept `c` carries a binary mastery variable. A mastered parent forces
//! mastered children; an unmastered parent lets child `c` be mastered with
//! probability `gamma[c]`. The root uses `gamma[root]` as its prior. A response
//! to a question is correct with probability `phi` (one of `r_easy`, `r_med`,
//! `r_hard`, by difficulty) when its concept is mastered and `epsilon` otherwise.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::concept_tree::{ConceptTree, Difficulty, NodeIdx};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to every probability after an M-step; the upper clamp is `1 - PROB_FLOOR`.
pub const PROB_FLOOR: f64 = 1e-6;
/// Largest guessing rate an M-step may produce.
pub const EPSILON_MAX: f64 = 0.3;

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_R_EASY: f64 = 0.9;
pub const DEFAULT_R_MED: f64 = 0.8;
pub const DEFAULT_R_HARD: f64 = 0.75;
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Model parameters. `gamma` is indexed by [`NodeIdx`] of the tree it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub gamma: Vec<T>,
    pub r_easy: T,
    pub r_med: T,
    pub r_hard: T,
    pub epsilon: T,
}

/// JSON form of [`Params`] with transition entries keyed by node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub gamma: IndexMap<String, f64>,
    pub r_easy: f64,
    pub r_med: f64,
    pub r_hard: f64,
    pub epsilon: f64,
}

impl<T: Scalar> Params<T> {
    /// Initial values used before any EM iteration.
    pub fn defaults(tree: &ConceptTree) -> Self {
        Self {
            gamma: vec![T::lit(DEFAULT_GAMMA); tree.len()],
            r_easy: T::lit(DEFAULT_R_EASY),
            r_med: T::lit(DEFAULT_R_MED),
            r_hard: T::lit(DEFAULT_R_HARD),
            epsilon: T::lit(DEFAULT_EPSILON),
        }
    }

    /// Mastered-emission rate for a difficulty class.
    #[inline]
    pub fn phi(&self, difficulty: Difficulty) -> T {
        match difficulty {
            Difficulty::Easy => self.r_easy,
            Difficulty::Medium => self.r_med,
            Difficulty::Hard => self.r_hard,
        }
    }

    pub fn set_phi(&mut self, difficulty: Difficulty, value: T) {
        match difficulty {
            Difficulty::Easy => self.r_easy = value,
            Difficulty::Medium => self.r_med = value,
            Difficulty::Hard => self.r_hard = value,
        }
    }

    pub fn gamma_of(&self, tree: &ConceptTree, id: &str) -> Result<T> {
        tree.index_of(id)
            .and_then(|i| self.gamma.get(i).copied())
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// `P(K_node = child | K_parent = parent)`; `parent = None` gives the root prior.
    #[inline]
    pub fn transition(&self, node: NodeIdx, child: bool, parent: Option<bool>) -> T {
        let p1 = match parent {
            Some(true) => T::one(),
            Some(false) | None => self.gamma[node],
        };
        if child {
            p1
        } else {
            T::one() - p1
        }
    }

    /// Checked form of [`Params::transition`] addressed by node id. The parent
    /// state must be given exactly when the node has a parent.
    pub fn transition_prob(
        &self,
        tree: &ConceptTree,
        id: &str,
        child: bool,
        parent: Option<bool>,
    ) -> Result<T> {
        let node = tree
            .index_of(id)
            .filter(|&i| i < self.gamma.len())
            .ok_or_else(|| Error::UnknownNode(id.to_string()))?;
        if tree.parent(node).is_some() != parent.is_some() {
            return Err(Error::InvalidConfig(format!(
                "parent state must be supplied iff `{id}` is not the root"
            )));
        }
        Ok(self.transition(node, child, parent))
    }

    /// `P(Q = correct | K = mastery)` for a question of the given difficulty.
    #[inline]
    pub fn emission_prob(&self, difficulty: Difficulty, correct: bool, mastery: bool) -> T {
        let p1 = if mastery { self.phi(difficulty) } else { self.epsilon };
        if correct {
            p1
        } else {
            T::one() - p1
        }
    }

    /// `eps < r_hard < r_med < r_easy`
    pub fn ordering_holds(&self) -> bool {
        self.epsilon < self.r_hard && self.r_hard < self.r_med && self.r_med < self.r_easy
    }

    /// Checks shape, open-interval bounds, and the emission ordering.
    pub fn validate(&self, tree: &ConceptTree) -> Result<()> {
        if self.gamma.len() != tree.len() {
            return Err(Error::ParameterShape {
                expected: tree.len(),
                found: self.gamma.len(),
            });
        }
        let check = |name: String, v: T| {
            if v > T::zero() && v < T::one() {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    value: v.to_f64_lossy(),
                })
            }
        };
        for (i, &g) in self.gamma.iter().enumerate() {
            check(format!("gamma[{}]", tree.id(i)), g)?;
        }
        check("r_easy".into(), self.r_easy)?;
        check("r_med".into(), self.r_med)?;
        check("r_hard".into(), self.r_hard)?;
        check("epsilon".into(), self.epsilon)?;
        if !self.ordering_holds() {
            return Err(Error::OrderingViolated);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        Params {
            gamma: self.gamma.iter().map(|&g| c(g)).collect(),
            r_easy: c(self.r_easy),
            r_med: c(self.r_med),
            r_hard: c(self.r_hard),
            epsilon: c(self.epsilon),
        }
    }

    pub fn to_document(&self, tree: &ConceptTree) -> ParamsDocument {
        ParamsDocument {
            gamma: self
                .gamma
                .iter()
                .enumerate()
                .map(|(i, g)| (tree.id(i).to_string(), g.to_f64_lossy()))
                .collect(),
            r_easy: self.r_easy.to_f64_lossy(),
            r_med: self.r_med.to_f64_lossy(),
            r_hard: self.r_hard.to_f64_lossy(),
            epsilon: self.epsilon.to_f64_lossy(),
        }
    }

    pub fn from_document(tree: &ConceptTree, doc: &ParamsDocument) -> Result<Self> {
        if let Some(extra) = doc.gamma.keys().find(|k| tree.index_of(k).is_none()) {
            return Err(Error::UnknownNode(extra.clone()));
        }
        let gamma = tree
            .nodes()
            .iter()
            .map(|n| {
                doc.gamma
                    .get(&n.id)
                    .map(|&g| T::lit(g))
                    .ok_or_else(|| Error::InvalidConfig(format!("missing gamma for `{}`", n.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gamma,
            r_easy: T::lit(doc.r_easy),
            r_med: T::lit(doc.r_med),
            r_hard: T::lit(doc.r_hard),
            epsilon: T::lit(doc.epsilon),
        })
    }

    pub fn to_json(&self, tree: &ConceptTree) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_document(tree)).expect("serializable");
        s.push('\n');
        s
    }

    pub fn from_json(tree: &ConceptTree, text: &str) -> Result<Self> {
        let doc: ParamsDocument = serde_json::from_str(text)?;
        Self::from_document(tree, &doc)
    }
}

/// The default initialization for `tree`.
pub fn default_parameters<T: Scalar>(tree: &ConceptTree) -> Params<T> {
    Params::defaults(tree)
}
