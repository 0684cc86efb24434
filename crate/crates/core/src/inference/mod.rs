//! Exact posterior inference for one student by upward-downward message passing.
//!
//! All messages live in the log domain:
//!
//! - `log_beta[c][k]`: log-probability of every response in the subtree of `c`
//!   given `K_c = k`.
//! - `log_beta_tilde[c][k]`: the same evidence seen from the parent of `c`,
//!   i.e. given `K_parent(c) = k`.
//! - `log_alpha[c][k]`: joint log-probability of `K_c = k` and all responses
//!   outside the subtree of `c`.
//! - `log_alpha_tilde[c][k]`: the parent's downward message with the branch
//!   through `c` divided out, indexed by the parent state `k`.
//!
//! One upward and one downward sweep are linear in nodes plus responses.

mod observations;

pub use observations::{Observation, ObservationSet, Tally};

use serde::Serialize;

use crate::concept_tree::{ConceptTree, Difficulty, NodeIdx, QuestionMeta};
use crate::error::{Error, Result};
use crate::model::Params;
use crate::scalar::{log_add, safe_ln, Scalar};

/// Messages produced by [`upward_pass`]. The root's `log_beta_tilde` entry is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct UpwardMessages<T> {
    pub log_beta: Vec<[T; 2]>,
    pub log_beta_tilde: Vec<[T; 2]>,
}

/// Messages produced by [`downward_pass`]. The root's `log_alpha_tilde` entry is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct DownwardMessages<T> {
    pub log_alpha: Vec<[T; 2]>,
    pub log_alpha_tilde: Vec<[T; 2]>,
}

/// Full posterior summary for one student.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefTable<T> {
    pub log_alpha: Vec<[T; 2]>,
    pub log_alpha_tilde: Vec<[T; 2]>,
    pub log_beta: Vec<[T; 2]>,
    pub log_beta_tilde: Vec<[T; 2]>,
    /// `p(K_c = 1 | responses)`
    pub marginal: Vec<T>,
    /// `pairwise[c][k_c][k_parent] = p(K_c = k_c, K_parent = k_parent | responses)`;
    /// `None` at the root.
    pub pairwise: Vec<Option<[[T; 2]; 2]>>,
    pub log_likelihood: T,
}

/// Diagnostic record for a per-node posterior dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorRecord {
    pub node_id: String,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction<T> {
    pub question_id: String,
    pub prob_correct: T,
    pub posterior_mastery: T,
}

impl<T: Scalar> BeliefTable<T> {
    /// `log sum_k alpha_c(k) beta_c(k)`; equals the log-likelihood at every node.
    pub fn node_log_evidence(&self, node: NodeIdx) -> T {
        log_add(
            self.log_alpha[node][0] + self.log_beta[node][0],
            self.log_alpha[node][1] + self.log_beta[node][1],
        )
    }

    pub fn marginal_records(&self, tree: &ConceptTree) -> Vec<PosteriorRecord> {
        tree.downward_order()
            .iter()
            .map(|&n| PosteriorRecord {
                node_id: tree.id(n).to_string(),
                posterior: self.marginal[n].to_f64_lossy(),
            })
            .collect()
    }
}

/// `log P(responses at node | K_node = k)` for both states, from the node's tally.
#[inline]
fn log_emission<T: Scalar>(params: &Params<T>, tally: &Tally) -> [T; 2] {
    let mut out = [T::zero(); 2];
    for d in Difficulty::ALL {
        let counts = tally[d.index()];
        for (mastery, slot) in out.iter_mut().enumerate() {
            for (correct, &n) in counts.iter().enumerate() {
                if n > 0 {
                    let p = params.emission_prob(d, correct == 1, mastery == 1);
                    *slot = *slot + T::lit(n as f64) * safe_ln(p);
                }
            }
        }
    }
    out
}

#[inline]
fn log_transition<T: Scalar>(params: &Params<T>, node: NodeIdx) -> [[T; 2]; 2] {
    // [child][parent]
    let g = params.gamma[node];
    [
        [safe_ln(T::one() - g), T::neg_infinity()],
        [safe_ln(g), T::zero()],
    ]
}

fn check_shape<T: Scalar>(tree: &ConceptTree, params: &Params<T>, obs: &ObservationSet) -> Result<()> {
    if params.gamma.len() != tree.len() {
        return Err(Error::ParameterShape {
            expected: tree.len(),
            found: params.gamma.len(),
        });
    }
    if obs.node_count() != tree.len() {
        return Err(Error::InvalidConfig(format!(
            "observations were built for a tree of {} nodes, not {}",
            obs.node_count(),
            tree.len()
        )));
    }
    Ok(())
}

/// Leaves-to-root sweep computing `beta` and `beta_tilde`.
pub fn upward_pass<T: Scalar>(
    tree: &ConceptTree,
    params: &Params<T>,
    obs: &ObservationSet,
) -> Result<UpwardMessages<T>> {
    check_shape(tree, params, obs)?;
    let n = tree.len();
    let mut log_beta = vec![[T::zero(); 2]; n];
    let mut log_beta_tilde = vec![[T::zero(); 2]; n];
    for c in tree.upward_order() {
        let mut b = log_emission(params, obs.tally(c));
        for &j in tree.children(c) {
            b[0] = b[0] + log_beta_tilde[j][0];
            b[1] = b[1] + log_beta_tilde[j][1];
        }
        log_beta[c] = b;
        if tree.parent(c).is_some() {
            let lt = log_transition(params, c);
            for kp in 0..2 {
                log_beta_tilde[c][kp] = log_add(b[0] + lt[0][kp], b[1] + lt[1][kp]);
            }
        }
    }
    Ok(UpwardMessages {
        log_beta,
        log_beta_tilde,
    })
}

/// Root-to-leaves sweep computing `alpha` and `alpha_tilde` from finished upward messages.
pub fn downward_pass<T: Scalar>(
    tree: &ConceptTree,
    params: &Params<T>,
    up: &UpwardMessages<T>,
) -> Result<DownwardMessages<T>> {
    let n = tree.len();
    let mut log_alpha = vec![[T::zero(); 2]; n];
    let mut log_alpha_tilde = vec![[T::zero(); 2]; n];
    let root = tree.root();
    let g = params.gamma[root];
    log_alpha[root] = [safe_ln(T::one() - g), safe_ln(g)];
    for &c in tree.downward_order() {
        let Some(p) = tree.parent(c) else { continue };
        let mut at = [T::zero(); 2];
        for kp in 0..2 {
            let bt = up.log_beta_tilde[c][kp];
            if bt == T::neg_infinity() || bt.is_nan() {
                return Err(Error::DegenerateMessage {
                    node: tree.id(c).to_string(),
                });
            }
            at[kp] = log_alpha[p][kp] + up.log_beta[p][kp] - bt;
        }
        log_alpha_tilde[c] = at;
        let lt = log_transition(params, c);
        for k in 0..2 {
            log_alpha[c][k] = log_add(lt[k][0] + at[0], lt[k][1] + at[1]);
        }
    }
    Ok(DownwardMessages {
        log_alpha,
        log_alpha_tilde,
    })
}

/// Turns finished messages into marginals, pairwise posteriors and the likelihood.
pub fn assemble<T: Scalar>(
    tree: &ConceptTree,
    params: &Params<T>,
    up: UpwardMessages<T>,
    down: DownwardMessages<T>,
) -> BeliefTable<T> {
    let n = tree.len();
    let mut marginal = vec![T::zero(); n];
    let mut pairwise = vec![None; n];
    for c in 0..n {
        let m0 = down.log_alpha[c][0] + up.log_beta[c][0];
        let m1 = down.log_alpha[c][1] + up.log_beta[c][1];
        let z = log_add(m0, m1);
        marginal[c] = (m1 - z).exp();

        if tree.parent(c).is_some() {
            let lt = log_transition(params, c);
            let mut w = [[T::neg_infinity(); 2]; 2];
            let mut z = T::neg_infinity();
            for kc in 0..2 {
                for kp in 0..2 {
                    w[kc][kp] = down.log_alpha_tilde[c][kp] + up.log_beta[c][kc] + lt[kc][kp];
                    z = log_add(z, w[kc][kp]);
                }
            }
            let mut pw = [[T::zero(); 2]; 2];
            for kc in 0..2 {
                for kp in 0..2 {
                    pw[kc][kp] = if w[kc][kp] == T::neg_infinity() {
                        T::zero()
                    } else {
                        (w[kc][kp] - z).exp()
                    };
                }
            }
            pairwise[c] = Some(pw);
        }
    }
    let root = tree.root();
    let log_likelihood = log_add(
        down.log_alpha[root][0] + up.log_beta[root][0],
        down.log_alpha[root][1] + up.log_beta[root][1],
    );
    BeliefTable {
        log_alpha: down.log_alpha,
        log_alpha_tilde: down.log_alpha_tilde,
        log_beta: up.log_beta,
        log_beta_tilde: up.log_beta_tilde,
        marginal,
        pairwise,
        log_likelihood,
    }
}

/// Runs both sweeps and returns every posterior quantity for one student.
pub fn posteriors<T: Scalar>(
    tree: &ConceptTree,
    params: &Params<T>,
    obs: &ObservationSet,
) -> Result<BeliefTable<T>> {
    let up = upward_pass(tree, params, obs)?;
    let down = downward_pass(tree, params, &up)?;
    Ok(assemble(tree, params, up, down))
}

/// `log p(responses)`; only the upward sweep is needed.
pub fn log_likelihood<T: Scalar>(
    tree: &ConceptTree,
    params: &Params<T>,
    obs: &ObservationSet,
) -> Result<T> {
    if obs.is_empty() {
        check_shape(tree, params, obs)?;
        return Ok(T::zero());
    }
    let up = upward_pass(tree, params, obs)?;
    let root = tree.root();
    let g = params.gamma[root];
    Ok(log_add(
        safe_ln(T::one() - g) + up.log_beta[root][0],
        safe_ln(g) + up.log_beta[root][1],
    ))
}

/// Probability of a correct answer to `question`: the mastery posterior of its
/// concept blends the guessing rate and the mastered rate.
pub fn predict<T: Scalar>(
    tree: &ConceptTree,
    params: &Params<T>,
    belief: &BeliefTable<T>,
    question: &QuestionMeta,
) -> Result<Prediction<T>> {
    let node = tree
        .index_of(&question.kc)
        .filter(|&i| i < belief.marginal.len())
        .ok_or_else(|| Error::UnknownNode(question.kc.clone()))?;
    let m = belief.marginal[node];
    Ok(Prediction {
        question_id: question.question_id.clone(),
        prob_correct: blend(params, question.difficulty, m),
        posterior_mastery: m,
    })
}

/// `(1 - m) * eps + m * phi`, kept inside `[min(eps, phi), max(eps, phi)]`.
#[inline]
pub fn blend<T: Scalar>(params: &Params<T>, difficulty: Difficulty, mastery: T) -> T {
    let phi = params.phi(difficulty);
    let eps = params.epsilon;
    let p = (T::one() - mastery) * eps + mastery * phi;
    p.max(eps.min(phi)).min(eps.max(phi))
}
