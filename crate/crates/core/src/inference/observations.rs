use serde::{Deserialize, Serialize};

use crate::concept_tree::{ConceptTree, Difficulty, NodeIdx};
use crate::error::{Error, Result};

/// One graded response, already resolved to a tree node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub question_id: String,
    pub node: NodeIdx,
    pub difficulty: Difficulty,
    pub correct: bool,
}

/// Response counts at one node, `[difficulty][correct as usize]`.
pub type Tally = [[u32; 2]; 3];

/// All responses of one student, grouped by the concept they are labeled with.
///
/// Inference only depends on the per-node tallies, so two sets holding the
/// same responses in a different order produce bit-identical posteriors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSet {
    interactions: Vec<Observation>,
    by_kc: Vec<Vec<usize>>,
    tallies: Vec<Tally>,
}

impl ObservationSet {
    pub fn new(tree: &ConceptTree) -> Self {
        Self::with_nodes(tree.len())
    }

    fn with_nodes(n: usize) -> Self {
        Self {
            interactions: Vec::new(),
            by_kc: vec![Vec::new(); n],
            tallies: vec![[[0; 2]; 3]; n],
        }
    }

    /// Adds a response labeled with concept `kc`.
    pub fn push(
        &mut self,
        tree: &ConceptTree,
        question_id: impl Into<String>,
        kc: &str,
        difficulty: Difficulty,
        correct: bool,
    ) -> Result<()> {
        let node = tree
            .index_of(kc)
            .ok_or_else(|| Error::UnknownNode(kc.to_string()))?;
        self.push_node(node, question_id, difficulty, correct)
    }

    pub fn push_node(
        &mut self,
        node: NodeIdx,
        question_id: impl Into<String>,
        difficulty: Difficulty,
        correct: bool,
    ) -> Result<()> {
        if node >= self.tallies.len() {
            return Err(Error::UnknownNode(format!("#{node}")));
        }
        self.by_kc[node].push(self.interactions.len());
        self.tallies[node][difficulty.index()][correct as usize] += 1;
        self.interactions.push(Observation {
            question_id: question_id.into(),
            node,
            difficulty,
            correct,
        });
        Ok(())
    }

    pub fn push_observation(&mut self, obs: Observation) -> Result<()> {
        self.push_node(obs.node, obs.question_id, obs.difficulty, obs.correct)
    }

    /// Union of two response sets of the same student.
    pub fn union(&self, other: &ObservationSet) -> ObservationSet {
        let mut out = self.clone();
        for o in &other.interactions {
            out.push_observation(o.clone())
                .expect("sets built for the same tree");
        }
        out
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.tallies.len()
    }

    pub fn interactions(&self) -> &[Observation] {
        &self.interactions
    }

    /// Indices into [`ObservationSet::interactions`] of the responses labeled with `node`.
    pub fn by_kc(&self, node: NodeIdx) -> &[usize] {
        &self.by_kc[node]
    }

    #[inline]
    pub fn tally(&self, node: NodeIdx) -> &Tally {
        &self.tallies[node]
    }

    pub fn correct_count(&self) -> usize {
        self.interactions.iter().filter(|o| o.correct).count()
    }
}

impl AsRef<ObservationSet> for ObservationSet {
    fn as_ref(&self) -> &ObservationSet {
        self
    }
}
