//! Expectation-maximization with closed-form updates.
//!
//! The E-step runs exact inference per student and accumulates expected
//! counts; the M-step turns those counts into ratios:
//!
//! - `gamma[c] = E#(K_c=1, K_parent=0) / E#(K_parent=0)` for non-root `c`,
//!   and `E#(K_root=1) / students` at the root;
//! - `epsilon = E#(correct, unmastered) / E#(unmastered)`;
//! - `r_l = E#(correct, mastered, level l) / E#(mastered, level l)`.
//!
//! `epsilon` is then clipped to at most [`EPSILON_MAX`] and every parameter is
//! clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept_tree::{ConceptTree, Difficulty};
use crate::error::{Error, Result};
use crate::inference::{posteriors, BeliefTable, ObservationSet};
use crate::model::{Params, ParamsDocument, EPSILON_MAX, PROB_FLOOR};
use crate::scalar::Scalar;

/// How per-student work is scheduled.
///
/// Per-student results are always reduced in dataset order, so serial and
/// threaded runs produce bit-identical sums.
#[derive(Clone, Default)]
pub enum Parallelism {
    #[default]
    Serial,
    Pool(Arc<rayon::ThreadPool>),
}

impl std::fmt::Debug for Parallelism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Parallelism::Serial => write!(f, "Serial"),
            Parallelism::Pool(p) => write!(f, "Pool({})", p.current_num_threads()),
        }
    }
}

impl Parallelism {
    /// `threads <= 1` gives [`Parallelism::Serial`].
    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Parallelism::Serial);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(Parallelism::Pool(Arc::new(pool)))
    }

    /// Maps `f` over `items`, keeping input order in the output.
    pub fn map<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(&I) -> O + Sync + Send,
    {
        match self {
            Parallelism::Serial => items.iter().map(f).collect(),
            Parallelism::Pool(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}

/// Expected counts gathered by the E-step, summed over students.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats<T> {
    /// Non-root `c`: sum of `p(K_c=1, K_parent=0 | Q_i)`. Zero at the root.
    pub gamma_num: Vec<T>,
    /// Non-root `c`: sum of `p(K_c=0, K_parent=0 | Q_i)`. Zero at the root.
    pub gamma_den_extra: Vec<T>,
    /// Sum of `p(K_root=1 | Q_i)`.
    pub root_num: T,
    pub students: usize,
    /// Correct answers weighted by `p(K=0 | Q_i)` of their concept.
    pub eps_pos: T,
    /// Incorrect answers weighted by `p(K=0 | Q_i)`.
    pub eps_neg: T,
    /// Per difficulty: correct answers weighted by `p(K=1 | Q_i)`.
    pub r_pos: [T; 3],
    /// Per difficulty: incorrect answers weighted by `p(K=1 | Q_i)`.
    pub r_neg: [T; 3],
    /// Observed-data log-likelihood under the parameters used for this E-step.
    pub log_likelihood: T,
    pub correct_answers: usize,
}

impl<T: Scalar> SufficientStats<T> {
    pub fn zeros(nodes: usize) -> Self {
        Self {
            gamma_num: vec![T::zero(); nodes],
            gamma_den_extra: vec![T::zero(); nodes],
            root_num: T::zero(),
            students: 0,
            eps_pos: T::zero(),
            eps_neg: T::zero(),
            r_pos: [T::zero(); 3],
            r_neg: [T::zero(); 3],
            log_likelihood: T::zero(),
            correct_answers: 0,
        }
    }

    /// Contribution of one student's posteriors.
    pub fn from_belief(tree: &ConceptTree, belief: &BeliefTable<T>, obs: &ObservationSet) -> Self {
        let mut s = Self::zeros(tree.len());
        s.students = 1;
        s.log_likelihood = belief.log_likelihood;
        s.root_num = belief.marginal[tree.root()];
        for c in 0..tree.len() {
            if let Some(pw) = belief.pairwise[c] {
                s.gamma_num[c] = pw[1][0];
                s.gamma_den_extra[c] = pw[0][0];
            }
            let tally = obs.tally(c);
            let m1 = belief.marginal[c];
            let m0 = T::one() - m1;
            for d in Difficulty::ALL {
                let [neg, pos] = tally[d.index()];
                if neg == 0 && pos == 0 {
                    continue;
                }
                let (neg, pos) = (T::lit(neg as f64), T::lit(pos as f64));
                s.eps_pos = s.eps_pos + pos * m0;
                s.eps_neg = s.eps_neg + neg * m0;
                s.r_pos[d.index()] = s.r_pos[d.index()] + pos * m1;
                s.r_neg[d.index()] = s.r_neg[d.index()] + neg * m1;
            }
        }
        s.correct_answers = obs.correct_count();
        s
    }

    /// Adds `other` into `self`. Associative up to floating-point rounding.
    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.gamma_num.iter_mut().zip(&other.gamma_num) {
            *a = *a + *b;
        }
        for (a, b) in self.gamma_den_extra.iter_mut().zip(&other.gamma_den_extra) {
            *a = *a + *b;
        }
        self.root_num = self.root_num + other.root_num;
        self.students += other.students;
        self.eps_pos = self.eps_pos + other.eps_pos;
        self.eps_neg = self.eps_neg + other.eps_neg;
        for l in 0..3 {
            self.r_pos[l] = self.r_pos[l] + other.r_pos[l];
            self.r_neg[l] = self.r_neg[l] + other.r_neg[l];
        }
        self.log_likelihood = self.log_likelihood + other.log_likelihood;
        self.correct_answers += other.correct_answers;
    }
}

/// Runs inference for every student and sums the expected counts in dataset order.
pub fn e_step<T, D>(
    tree: &ConceptTree,
    params: &Params<T>,
    dataset: &[D],
    parallelism: &Parallelism,
) -> Result<SufficientStats<T>>
where
    T: Scalar,
    D: AsRef<ObservationSet> + Sync,
{
    let parts = parallelism.map(dataset, |obs| {
        let obs = obs.as_ref();
        posteriors(tree, params, obs).map(|b| SufficientStats::from_belief(tree, &b, obs))
    });
    let mut total = SufficientStats::zeros(tree.len());
    for part in parts {
        total.merge(&part?);
    }
    Ok(total)
}

#[inline]
fn ratio<T: Scalar>(num: T, den: T) -> Option<T> {
    (den > T::zero()).then(|| num / den)
}

fn clamp_prob<T: Scalar>(v: T) -> T {
    let lo = T::lit(PROB_FLOOR);
    let hi = T::one() - lo;
    v.max(lo).min(hi)
}

/// Closed-form maximization. Cells without posterior mass keep their value from `previous`.
pub fn m_step<T: Scalar>(stats: &SufficientStats<T>, previous: &Params<T>, tree: &ConceptTree) -> Params<T> {
    let mut next = previous.clone();
    let root = tree.root();
    for c in 0..tree.len() {
        let estimate = if c == root {
            ratio(stats.root_num, T::lit(stats.students as f64))
        } else {
            ratio(stats.gamma_num[c], stats.gamma_num[c] + stats.gamma_den_extra[c])
        };
        if let Some(g) = estimate {
            next.gamma[c] = clamp_prob(g);
        }
    }
    if let Some(e) = ratio(stats.eps_pos, stats.eps_pos + stats.eps_neg) {
        next.epsilon = clamp_prob(e.min(T::lit(EPSILON_MAX)));
    }
    for d in Difficulty::ALL {
        let l = d.index();
        if let Some(r) = ratio(stats.r_pos[l], stats.r_pos[l] + stats.r_neg[l]) {
            next.set_phi(d, clamp_prob(r));
        }
    }
    if !next.ordering_holds() {
        log::warn!(
            "M-step broke eps < r_hard < r_med < r_easy: eps={}, r_hard={}, r_med={}, r_easy={}",
            next.epsilon,
            next.r_hard,
            next.r_med,
            next.r_easy
        );
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop once the absolute log-likelihood gain of an iteration drops below this.
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport<T> {
    pub params: Params<T>,
    /// Log-likelihood of the initial parameters followed by one entry per iteration.
    pub trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReportDocument {
    pub params: ParamsDocument,
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Scalar> FitReport<T> {
    pub fn final_log_likelihood(&self) -> T {
        *self.trace.last().expect("trace holds at least the initial value")
    }

    /// Whether every step of the trace is non-decreasing up to `slack`.
    pub fn is_monotone(&self, slack: T) -> bool {
        self.trace.windows(2).all(|w| w[1] >= w[0] - slack)
    }

    pub fn to_document(&self, tree: &ConceptTree) -> FitReportDocument {
        FitReportDocument {
            params: self.params.to_document(tree),
            log_likelihood_trace: self.trace.iter().map(|v| v.to_f64_lossy()).collect(),
            iterations: self.iterations,
            converged: self.converged,
        }
    }

    pub fn to_json(&self, tree: &ConceptTree) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_document(tree)).expect("serializable");
        s.push('\n');
        s
    }
}

/// Alternates E- and M-steps from `init` until the log-likelihood gain falls
/// below `config.tol` or `config.max_iters` M-steps have run.
pub fn fit<T, D>(
    tree: &ConceptTree,
    dataset: &[D],
    init: &Params<T>,
    config: &FitConfig,
    parallelism: &Parallelism,
) -> Result<FitReport<T>>
where
    T: Scalar,
    D: AsRef<ObservationSet> + Sync,
{
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = init.clone();
    let mut stats = e_step(tree, &params, dataset, parallelism)?;
    let mut trace = vec![stats.log_likelihood];
    let mut iterations = 0;
    let mut converged = false;
    let tol = T::lit(config.tol);
    while iterations < config.max_iters {
        params = m_step(&stats, &params, tree);
        iterations += 1;
        stats = e_step(tree, &params, dataset, parallelism)?;
        let prev = trace[trace.len() - 1];
        trace.push(stats.log_likelihood);
        if (stats.log_likelihood - prev).abs() < tol {
            converged = true;
            break;
        }
    }
    Ok(FitReport {
        params,
        trace,
        iterations,
        converged,
    })
}

/// Exactly one E-step and one M-step.
pub fn one_step_update<T, D>(
    tree: &ConceptTree,
    params: &Params<T>,
    dataset: &[D],
    parallelism: &Parallelism,
) -> Result<Params<T>>
where
    T: Scalar,
    D: AsRef<ObservationSet> + Sync,
{
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = e_step(tree, params, dataset, parallelism)?;
    Ok(m_step(&stats, params, tree))
}

/// Observed-data log-likelihood of a whole dataset.
pub fn dataset_log_likelihood<T, D>(
    tree: &ConceptTree,
    params: &Params<T>,
    dataset: &[D],
) -> Result<T>
where
    T: Scalar,
    D: AsRef<ObservationSet>,
{
    let mut ll = T::zero();
    for obs in dataset {
        ll = ll + crate::inference::log_likelihood(tree, params, obs.as_ref())?;
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single() -> ConceptTree {
        ConceptTree::from_parents(&[("A", None)]).unwrap()
    }

    #[test]
    fn zero_students() {
        let t = single();
        let p: Params<f64> = Params::defaults(&t);
        let empty: Vec<ObservationSet> = Vec::new();
        let s = e_step(&t, &p, &empty, &Parallelism::Serial).unwrap();
        assert_eq!(s, SufficientStats::zeros(1));
        assert!(matches!(
            fit(&t, &empty, &p, &FitConfig::default(), &Parallelism::Serial),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn single_correct_easy_answer() {
        let t = single();
        let p: Params<f64> = Params::defaults(&t);
        let mut obs = ObservationSet::new(&t);
        obs.push(&t, "q", "A", Difficulty::Easy, true).unwrap();
        let s = e_step(&t, &p, &[obs], &Parallelism::Serial).unwrap();
        assert_abs_diff_eq!(s.eps_pos, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.r_pos[0], 0.5, epsilon = 1e-15);
        assert_eq!(s.eps_neg, 0.0);
        assert_abs_diff_eq!(s.root_num, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn epsilon_ratio_and_clip() {
        let t = single();
        let p: Params<f64> = Params::defaults(&t);
        let mut s = SufficientStats::zeros(1);
        s.eps_pos = 2.0;
        s.eps_neg = 8.0;
        assert_eq!(m_step(&s, &p, &t).epsilon, 0.2);
        s.eps_pos = 4.5;
        s.eps_neg = 5.5;
        assert_eq!(m_step(&s, &p, &t).epsilon, 0.3);
    }

    #[test]
    fn empty_cells_keep_previous_values() {
        let t = ConceptTree::from_parents(&[("R", None), ("A", Some("R"))]).unwrap();
        let mut p: Params<f64> = Params::defaults(&t);
        p.gamma[1] = 0.37;
        p.r_med = 0.81;
        let s = SufficientStats::zeros(2);
        let next = m_step(&s, &p, &t);
        assert_eq!(next, p);
    }

    #[test]
    fn clamps_to_floor() {
        let t = ConceptTree::from_parents(&[("R", None), ("A", Some("R"))]).unwrap();
        let p: Params<f64> = Params::defaults(&t);
        let mut s = SufficientStats::zeros(2);
        s.gamma_num[1] = 0.0;
        s.gamma_den_extra[1] = 3.0;
        s.r_pos[0] = 5.0;
        s.students = 2;
        let next = m_step(&s, &p, &t);
        assert_eq!(next.gamma[1], PROB_FLOOR);
        assert_eq!(next.gamma[0], PROB_FLOOR);
        assert_eq!(next.r_easy, 1.0 - PROB_FLOOR);
    }

    #[test]
    fn one_node_hand_update() {
        // One student, single concept: answers easy-correct, easy-wrong, hard-correct.
        let t = single();
        let p: Params<f64> = Params::defaults(&t);
        let mut obs = ObservationSet::new(&t);
        obs.push(&t, "q1", "A", Difficulty::Easy, true).unwrap();
        obs.push(&t, "q2", "A", Difficulty::Easy, false).unwrap();
        obs.push(&t, "q3", "A", Difficulty::Hard, true).unwrap();
        // joint: mastered 0.1 * 0.9 * 0.1 * 0.75, unmastered 0.9 * 0.1 * 0.9 * 0.1
        let j1 = 0.1 * 0.9 * 0.1 * 0.75;
        let j0 = 0.9 * 0.1 * 0.9 * 0.1;
        let m1 = j1 / (j0 + j1);
        let next = one_step_update(&t, &p, &[obs], &Parallelism::Serial).unwrap();
        assert_abs_diff_eq!(next.gamma[0], m1, epsilon = 1e-12);
        // eps = 2 m0 / 3 m0, above the clip
        assert_abs_diff_eq!(next.epsilon, (2.0f64 / 3.0).min(EPSILON_MAX), epsilon = 1e-12);
        assert_abs_diff_eq!(next.r_easy, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(next.r_hard, 1.0 - PROB_FLOOR, epsilon = 1e-12);
        assert_eq!(next.r_med, 0.8);
    }

    #[test]
    fn max_iters_zero_returns_init() {
        let t = single();
        let p: Params<f64> = Params::defaults(&t);
        let mut obs = ObservationSet::new(&t);
        obs.push(&t, "q", "A", Difficulty::Easy, true).unwrap();
        let r = fit(&t, &[obs], &p, &FitConfig { max_iters: 0, tol: 1e-6 }, &Parallelism::Serial).unwrap();
        assert_eq!(r.params, p);
        assert!(!r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.trace.len(), 1);
    }
}
