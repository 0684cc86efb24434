//! Generative sampling from the tree model and a brute-force enumeration oracle.
//!
//! Students are static: one mastery assignment is drawn per student and every
//! response of that student is sampled from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::concept_tree::{
    ConceptTree, Difficulty, NodeIdx, NodeRecord, QuestionBank, QuestionMeta, TreeDocument,
};
use crate::em::Parallelism;
use crate::error::{Error, Result};
use crate::inference::ObservationSet;
use crate::model::Params;
use crate::records::InteractionRecord;
use crate::scalar::Scalar;

/// Largest tree [`brute_force_posteriors`] accepts.
pub const MAX_ENUMERATION_NODES: usize = 20;

/// Draw attempts per student before settling for the closest ability match.
pub const ABILITY_ATTEMPTS: usize = 200;
/// Accepted gap between a student's expected correctness and the drawn target.
pub const ABILITY_TOLERANCE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_students: usize,
    pub interactions_per_student: usize,
    pub ability_mean: f64,
    pub ability_std: f64,
    /// Rejection-sample each student's mastery to match a drawn overall correctness rate.
    pub ability_targeting: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_students: 100,
            interactions_per_student: 60,
            ability_mean: 0.65,
            ability_std: 0.15,
            ability_targeting: true,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ability_std.is_nan() || self.ability_std <= 0.0 || !self.ability_mean.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ability distribution needs std > 0 (got mean {}, std {})",
                self.ability_mean, self.ability_std
            )));
        }
        Ok(())
    }
}

/// Hidden truth behind a simulated classroom.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<T> {
    pub tree: ConceptTree,
    pub theta_star: Params<T>,
    pub student_ids: Vec<String>,
    /// `states[student][node]`
    pub states: Vec<Vec<bool>>,
    /// Drawn ability targets; empty when targeting is off.
    pub ability_targets: Vec<f64>,
    pub question_bank: QuestionBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTruth {
    pub student_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ability_target: Option<f64>,
    pub mastered: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDocument {
    pub theta_star: crate::model::ParamsDocument,
    pub students: Vec<StudentTruth>,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn to_document(&self) -> GroundTruthDocument {
        GroundTruthDocument {
            theta_star: self.theta_star.to_document(&self.tree),
            students: self
                .student_ids
                .iter()
                .enumerate()
                .map(|(i, id)| StudentTruth {
                    student_id: id.clone(),
                    ability_target: self.ability_targets.get(i).copied(),
                    mastered: self.states[i]
                        .iter()
                        .enumerate()
                        .filter(|(_, &m)| m)
                        .map(|(n, _)| self.tree.id(n).to_string())
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Derives an independent per-student seed so results do not depend on scheduling.
pub fn student_seed(master: u64, student: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = master ^ student.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ancestral sampling from the root down.
pub fn sample_states<T: Scalar, R: Rng + ?Sized>(
    tree: &ConceptTree,
    params: &Params<T>,
    rng: &mut R,
) -> Vec<bool> {
    let mut k = vec![false; tree.len()];
    for &c in tree.downward_order() {
        k[c] = match tree.parent(c) {
            Some(p) if k[p] => true,
            _ => rng.random::<f64>() < params.gamma[c].to_f64_lossy(),
        };
    }
    k
}

/// Bernoulli draw of a single response.
pub fn sample_response<T: Scalar, R: Rng + ?Sized>(
    tree: &ConceptTree,
    params: &Params<T>,
    question: &QuestionMeta,
    states: &[bool],
    rng: &mut R,
) -> Result<bool> {
    let node = tree
        .index_of(&question.kc)
        .filter(|&n| n < states.len())
        .ok_or_else(|| Error::UnknownNode(question.kc.clone()))?;
    let p = if states[node] {
        params.phi(question.difficulty)
    } else {
        params.epsilon
    };
    Ok(rng.random::<f64>() < p.to_f64_lossy())
}

/// Uniform random recursive tree: node `i` attaches to a uniformly chosen earlier node.
pub fn random_tree<R: Rng + ?Sized>(n_nodes: usize, rng: &mut R) -> ConceptTree {
    assert!(n_nodes > 0, "a tree needs at least one node");
    let nodes = (0..n_nodes)
        .map(|i| NodeRecord {
            id: format!("k{i}"),
            label: format!("concept {i}"),
            parent: (i > 0).then(|| format!("k{}", rng.random_range(0..i))),
        })
        .collect();
    ConceptTree::from_document(&TreeDocument { nodes }).expect("recursive construction is a tree")
}

/// Parameters scattered around the default initialization, respecting
/// `eps < r_hard < r_med < r_easy`.
pub fn random_params<T: Scalar, R: Rng + ?Sized>(tree: &ConceptTree, rng: &mut R) -> Params<T> {
    let mut u = |lo: f64, hi: f64| T::lit(rng.random_range(lo..hi));
    let gamma = (0..tree.len()).map(|_| u(0.05, 0.6)).collect();
    Params {
        gamma,
        r_easy: u(0.86, 0.97),
        r_med: u(0.76, 0.85),
        r_hard: u(0.55, 0.75),
        epsilon: u(0.03, 0.3),
    }
}

/// Uniform weights over easy, medium and hard.
pub const UNIFORM_MIX: [f64; 3] = [1.0, 1.0, 1.0];

/// `per_node` questions on every leaf, difficulties drawn with weights `mix`
/// (easy, medium, hard).
pub fn random_question_bank<R: Rng + ?Sized>(
    tree: &ConceptTree,
    per_node: usize,
    mix: [f64; 3],
    rng: &mut R,
) -> Result<QuestionBank> {
    let pick = WeightedIndex::new(mix)
        .map_err(|e| Error::InvalidConfig(format!("difficulty mix {mix:?}: {e}")))?;
    let mut qs = Vec::new();
    for leaf in tree.leaves() {
        for j in 0..per_node {
            qs.push(QuestionMeta {
                question_id: format!("q{}_{j}", tree.id(leaf)),
                kc: tree.id(leaf).to_string(),
                difficulty: Difficulty::ALL[pick.sample(rng)],
                solve_rate: None,
            });
        }
    }
    Ok(QuestionBank::new(qs).expect("generated ids are unique"))
}

/// Expected correctness of a student with mastery `states` on a uniformly drawn bank question.
pub fn expected_correctness<T: Scalar>(
    params: &Params<T>,
    bank_nodes: &[(NodeIdx, Difficulty)],
    states: &[bool],
) -> f64 {
    let total: f64 = bank_nodes
        .iter()
        .map(|&(n, d)| {
            if states[n] {
                params.phi(d).to_f64_lossy()
            } else {
                params.epsilon.to_f64_lossy()
            }
        })
        .sum();
    total / bank_nodes.len() as f64
}

/// Samples a classroom and its interaction stream.
///
/// Each student gets a static mastery assignment (optionally matched to a
/// drawn overall correctness rate) and `interactions_per_student` questions
/// drawn uniformly with replacement from the bank.
pub fn generate_classroom<T: Scalar>(
    tree: &ConceptTree,
    theta_star: &Params<T>,
    bank: &QuestionBank,
    config: &SimConfig,
    parallelism: &Parallelism,
) -> Result<(Vec<InteractionRecord>, GroundTruth<T>)> {
    config.validate()?;
    if bank.is_empty() && config.n_students > 0 && config.interactions_per_student > 0 {
        return Err(Error::InvalidConfig("question bank is empty".into()));
    }
    let bank_nodes: Vec<(NodeIdx, Difficulty)> = bank
        .questions()
        .iter()
        .map(|q| {
            tree.index_of(&q.kc)
                .map(|n| (n, q.difficulty))
                .ok_or_else(|| Error::UnknownNode(q.kc.clone()))
        })
        .collect::<Result<_>>()?;
    let ability = Normal::new(config.ability_mean, config.ability_std)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let width = config.n_students.saturating_sub(1).to_string().len().max(3);

    let students: Vec<usize> = (0..config.n_students).collect();
    let per_student = parallelism.map(&students, |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(student_seed(config.seed, i as u64));
        let student_id = format!("s{i:0width$}");
        let (states, target) = if config.ability_targeting && !bank_nodes.is_empty() {
            let target = ability.sample(&mut rng).clamp(0.0, 1.0);
            let mut best: Option<(f64, Vec<bool>)> = None;
            for _ in 0..ABILITY_ATTEMPTS {
                let s = sample_states(tree, theta_star, &mut rng);
                let gap = (expected_correctness(theta_star, &bank_nodes, &s) - target).abs();
                if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                    best = Some((gap, s));
                }
                if gap <= ABILITY_TOLERANCE {
                    break;
                }
            }
            (best.expect("at least one attempt").1, Some(target))
        } else {
            (sample_states(tree, theta_star, &mut rng), None)
        };
        let mut records = Vec::with_capacity(config.interactions_per_student);
        for seq in 0..config.interactions_per_student {
            let q = &bank.questions()[rng.random_range(0..bank.len())];
            let correct = sample_response(tree, theta_star, q, &states, &mut rng)
                .expect("bank concepts were resolved above");
            records.push(InteractionRecord {
                student_id: student_id.clone(),
                question_id: q.question_id.clone(),
                kc_id: q.kc.clone(),
                difficulty: q.difficulty,
                correct: correct as u8,
                seq: seq as u64,
            });
        }
        (student_id, states, target, records)
    });

    let mut stream = Vec::with_capacity(config.n_students * config.interactions_per_student);
    let mut truth = GroundTruth {
        tree: tree.clone(),
        theta_star: theta_star.clone(),
        student_ids: Vec::with_capacity(config.n_students),
        states: Vec::with_capacity(config.n_students),
        ability_targets: Vec::new(),
        question_bank: bank.clone(),
    };
    for (id, states, target, records) in per_student {
        truth.student_ids.push(id);
        truth.states.push(states);
        if let Some(t) = target {
            truth.ability_targets.push(t);
        }
        stream.extend(records);
    }
    Ok((stream, truth))
}

/// Exact posteriors by summing the joint over all `2^n` mastery assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePosteriors {
    pub marginal: Vec<f64>,
    /// `[k_c][k_parent]`, `None` at the root.
    pub pairwise: Vec<Option<[[f64; 2]; 2]>>,
    pub log_likelihood: f64,
}

/// Joint probability of one full mastery assignment and all responses, in
/// probability space and straight from the model definition.
pub fn joint_probability<T: Scalar>(
    tree: &ConceptTree,
    params: &Params<T>,
    obs: &ObservationSet,
    states: &[bool],
) -> f64 {
    let mut p = 1.0;
    for c in 0..tree.len() {
        let g = params.gamma[c].to_f64_lossy();
        let p1 = match tree.parent(c) {
            Some(parent) if states[parent] => 1.0,
            _ => g,
        };
        p *= if states[c] { p1 } else { 1.0 - p1 };
    }
    for o in obs.interactions() {
        let p1 = if states[o.node] {
            params.phi(o.difficulty).to_f64_lossy()
        } else {
            params.epsilon.to_f64_lossy()
        };
        p *= if o.correct { p1 } else { 1.0 - p1 };
    }
    p
}

pub fn brute_force_posteriors<T: Scalar>(
    tree: &ConceptTree,
    params: &Params<T>,
    obs: &ObservationSet,
) -> Result<OraclePosteriors> {
    let n = tree.len();
    if n > MAX_ENUMERATION_NODES {
        return Err(Error::TooLargeForEnumeration {
            nodes: n,
            max: MAX_ENUMERATION_NODES,
        });
    }
    let mut total = 0.0;
    let mut m1 = vec![0.0; n];
    let mut pw = vec![[[0.0; 2]; 2]; n];
    let mut states = vec![false; n];
    for mask in 0u32..(1u32 << n) {
        for (c, s) in states.iter_mut().enumerate() {
            *s = mask >> c & 1 == 1;
        }
        let j = joint_probability(tree, params, obs, &states);
        if j == 0.0 {
            continue;
        }
        total += j;
        for c in 0..n {
            if states[c] {
                m1[c] += j;
            }
            if let Some(p) = tree.parent(c) {
                pw[c][states[c] as usize][states[p] as usize] += j;
            }
        }
    }
    Ok(OraclePosteriors {
        marginal: m1.iter().map(|v| v / total).collect(),
        pairwise: (0..n)
            .map(|c| {
                tree.parent(c).map(|_| {
                    let mut t = pw[c];
                    for row in &mut t {
                        for v in row.iter_mut() {
                            *v /= total;
                        }
                    }
                    t
                })
            })
            .collect(),
        log_likelihood: total.ln(),
    })
}

/// Settings for comparing an inference engine against [`brute_force_posteriors`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheckConfig {
    pub instances: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub max_observations: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            min_nodes: 8,
            max_nodes: 8,
            max_observations: 30,
            seed: 0,
            tolerance: 1e-10,
        }
    }
}

/// Largest absolute deviations seen across all instances.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct OracleSummary {
    pub instances: usize,
    pub max_marginal_dev: f64,
    pub max_pairwise_dev: f64,
    pub max_log_likelihood_dev: f64,
    /// Deviation of pairwise tables from summing to one and from the node and parent marginals.
    pub max_consistency_dev: f64,
    pub max_nodes_seen: usize,
}

impl OracleSummary {
    pub fn max_deviation(&self) -> f64 {
        self.max_marginal_dev
            .max(self.max_pairwise_dev)
            .max(self.max_log_likelihood_dev)
            .max(self.max_consistency_dev)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_deviation() < tolerance
    }
}

/// A random observation set of `0..=max_obs` responses on arbitrary nodes.
pub fn random_observations<R: Rng + ?Sized>(tree: &ConceptTree, max_obs: usize, rng: &mut R) -> ObservationSet {
    let mut obs = ObservationSet::new(tree);
    let n = rng.random_range(0..=max_obs);
    for j in 0..n {
        let node = rng.random_range(0..tree.len());
        let d = Difficulty::ALL[rng.random_range(0..3)];
        obs.push_node(node, format!("q{j}"), d, rng.random::<bool>())
            .expect("node index in range");
    }
    obs
}

/// Runs `engine` and the enumeration oracle on random instances.
///
/// With `fixed_tree` every instance reuses that tree; otherwise each draws a
/// random tree with a node count in `min_nodes..=max_nodes`.
pub fn oracle_check_with<F>(
    config: &OracleCheckConfig,
    fixed_tree: Option<&ConceptTree>,
    engine: F,
) -> Result<OracleSummary>
where
    F: Fn(&ConceptTree, &Params<f64>, &ObservationSet) -> Result<crate::inference::BeliefTable<f64>>,
{
    if let Some(t) = fixed_tree {
        if t.len() > MAX_ENUMERATION_NODES {
            return Err(Error::TooLargeForEnumeration {
                nodes: t.len(),
                max: MAX_ENUMERATION_NODES,
            });
        }
    } else if config.min_nodes == 0 || config.min_nodes > config.max_nodes {
        return Err(Error::InvalidConfig(format!(
            "node range {}..={} is empty",
            config.min_nodes, config.max_nodes
        )));
    } else if config.max_nodes > MAX_ENUMERATION_NODES {
        return Err(Error::TooLargeForEnumeration {
            nodes: config.max_nodes,
            max: MAX_ENUMERATION_NODES,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut s = OracleSummary::default();
    for _ in 0..config.instances {
        let drawn;
        let tree = match fixed_tree {
            Some(t) => t,
            None => {
                drawn = random_tree(rng.random_range(config.min_nodes..=config.max_nodes), &mut rng);
                &drawn
            }
        };
        let params: Params<f64> = random_params(tree, &mut rng);
        let obs = random_observations(tree, config.max_observations, &mut rng);
        let got = engine(tree, &params, &obs)?;
        let want = brute_force_posteriors(tree, &params, &obs)?;
        s.instances += 1;
        s.max_nodes_seen = s.max_nodes_seen.max(tree.len());
        s.max_log_likelihood_dev = s
            .max_log_likelihood_dev
            .max(dev(got.log_likelihood, want.log_likelihood));
        for c in 0..tree.len() {
            s.max_marginal_dev = s.max_marginal_dev.max(dev(got.marginal[c], want.marginal[c]));
            let m = got.marginal[c];
            s.max_consistency_dev = s.max_consistency_dev.max(if (0.0..=1.0).contains(&m) { 0.0 } else { f64::INFINITY });
            match (got.pairwise[c], want.pairwise[c], tree.parent(c)) {
                (Some(g), Some(w), Some(p)) => {
                    for kc in 0..2 {
                        for kp in 0..2 {
                            s.max_pairwise_dev = s.max_pairwise_dev.max(dev(g[kc][kp], w[kc][kp]));
                        }
                    }
                    let total = g[0][0] + g[0][1] + g[1][0] + g[1][1];
                    let child = g[1][0] + g[1][1];
                    let parent = g[0][1] + g[1][1];
                    s.max_consistency_dev = s
                        .max_consistency_dev
                        .max(dev(total, 1.0))
                        .max(dev(child, got.marginal[c]))
                        .max(dev(parent, got.marginal[p]));
                }
                (None, None, None) => {}
                _ => s.max_pairwise_dev = f64::INFINITY,
            }
        }
    }
    Ok(s)
}

/// [`oracle_check_with`] using the upward-downward implementation.
pub fn oracle_check(config: &OracleCheckConfig, fixed_tree: Option<&ConceptTree>) -> Result<OracleSummary> {
    oracle_check_with(config, fixed_tree, crate::inference::posteriors)
}

fn dev(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d.is_nan() {
        f64::INFINITY
    } else {
        d
    }
}
