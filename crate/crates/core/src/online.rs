//! Communal burn-in fit followed by per-student personalized updates.
//!
//! Every student starts from `theta_init`. Each new response is appended to the
//! student's history and the student's parameters take one EM step on the
//! burn-in data of all students plus that student's own history. Students
//! never see each other's post-burn-in data.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::Serialize;

use crate::concept_tree::{ConceptTree, QuestionMeta};
use crate::em::{fit, one_step_update, FitConfig, FitReport, Parallelism};
use crate::error::{Error, Result};
use crate::inference::{posteriors, predict, ObservationSet, Prediction};
use crate::model::Params;
use crate::records::{check_per_student_order, InteractionRecord, PredictionRecord};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OnlineConfig {
    /// Take the EM step after every `update_every` observations of a student.
    pub update_every: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self { update_every: 1 }
    }
}

/// Immutable state shared by every student model.
#[derive(Debug, Clone)]
struct Shared<T> {
    tree: ConceptTree,
    burn_in: Vec<ObservationSet>,
    burn_in_ids: Vec<String>,
    burn_in_index: HashMap<String, usize>,
    theta_init: Params<T>,
    config: OnlineConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel<T> {
    pub student_id: String,
    pub theta: Params<T>,
    /// Post-burn-in interactions.
    pub history: ObservationSet,
    /// Burn-in interactions of this student followed by `history`.
    pub conditioning: ObservationSet,
    /// Observations since the last parameter update.
    pub pending: usize,
    pub updates: usize,
}

impl<T: Scalar> Shared<T> {
    fn burn_in_of(&self, student_id: &str) -> Option<&ObservationSet> {
        self.burn_in_index.get(student_id).map(|&i| &self.burn_in[i])
    }

    fn new_model(&self, student_id: &str) -> StudentModel<T> {
        StudentModel {
            student_id: student_id.to_string(),
            theta: self.theta_init.clone(),
            history: ObservationSet::new(&self.tree),
            conditioning: self
                .burn_in_of(student_id)
                .cloned()
                .unwrap_or_else(|| ObservationSet::new(&self.tree)),
            pending: 0,
            updates: 0,
        }
    }

    /// `Q_init` with this student's entry replaced by burn-in plus history, or
    /// with the history appended for students absent from the burn-in.
    fn update_dataset<'a>(&'a self, model: &'a StudentModel<T>) -> Vec<&'a ObservationSet> {
        let own = self.burn_in_index.get(&model.student_id).copied();
        let mut data: Vec<&ObservationSet> = self
            .burn_in
            .iter()
            .enumerate()
            .map(|(i, b)| if Some(i) == own { &model.conditioning } else { b })
            .collect();
        if own.is_none() {
            data.push(&model.conditioning);
        }
        data
    }

    fn predict(
        &self,
        student_id: &str,
        model: Option<&StudentModel<T>>,
        question: &QuestionMeta,
    ) -> Result<Prediction<T>> {
        let empty;
        let (theta, obs) = match model {
            Some(m) => (&m.theta, &m.conditioning),
            None => match self.burn_in_of(student_id) {
                Some(b) => (&self.theta_init, b),
                None => {
                    empty = ObservationSet::new(&self.tree);
                    (&self.theta_init, &empty)
                }
            },
        };
        let belief = posteriors(&self.tree, theta, obs)?;
        predict(&self.tree, theta, &belief, question)
    }

    fn observe(&self, model: &mut StudentModel<T>, record: &InteractionRecord) -> Result<()> {
        let obs = record.observation(&self.tree)?;
        model.history.push_observation(obs.clone())?;
        model.conditioning.push_observation(obs)?;
        model.pending += 1;
        if model.pending >= self.config.update_every.max(1) {
            self.flush(model)?;
        }
        Ok(())
    }

    fn flush(&self, model: &mut StudentModel<T>) -> Result<()> {
        if model.pending == 0 {
            return Ok(());
        }
        let data = self.update_dataset(model);
        model.theta = one_step_update(&self.tree, &model.theta, &data, &Parallelism::Serial)?;
        model.pending = 0;
        model.updates += 1;
        Ok(())
    }
}

/// Burn-in data grouped per student, in first-appearance order.
pub fn group_by_student(
    tree: &ConceptTree,
    records: &[InteractionRecord],
) -> Result<(Vec<String>, Vec<ObservationSet>)> {
    let mut groups: IndexMap<&str, ObservationSet> = IndexMap::new();
    for r in records {
        let obs = r.observation(tree)?;
        groups
            .entry(r.student_id.as_str())
            .or_insert_with(|| ObservationSet::new(tree))
            .push_observation(obs)?;
    }
    Ok(groups.into_iter().map(|(k, v)| (k.to_string(), v)).unzip())
}

/// Per-interaction diagnostic: mastery posterior of the interaction's concept
/// just before and just after it was observed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorStep {
    pub student_id: String,
    pub seq: u64,
    pub kc_id: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayOutput {
    pub predictions: Vec<PredictionRecord>,
    /// Filled only when requested.
    pub posterior_steps: Vec<PosteriorStep>,
}

#[derive(Debug, Clone)]
pub struct ClassroomSession<T> {
    shared: Shared<T>,
    fit_report: FitReport<T>,
    students: IndexMap<String, StudentModel<T>>,
}

impl<T: Scalar> ClassroomSession<T> {
    /// Fits `theta_init` on the pooled burn-in data with full EM from the default parameters.
    pub fn burn_in_fit(
        tree: &ConceptTree,
        burn_in: &[InteractionRecord],
        fit_config: &FitConfig,
        online: OnlineConfig,
        parallelism: &Parallelism,
    ) -> Result<Self> {
        if burn_in.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (ids, sets) = group_by_student(tree, burn_in)?;
        let report = fit(tree, &sets, &Params::defaults(tree), fit_config, parallelism)?;
        Ok(Self::from_parts(tree, ids, sets, report, online))
    }

    /// Builds a session around an existing fit of `burn_in`.
    pub fn from_parts(
        tree: &ConceptTree,
        burn_in_ids: Vec<String>,
        burn_in: Vec<ObservationSet>,
        fit_report: FitReport<T>,
        config: OnlineConfig,
    ) -> Self {
        let burn_in_index = burn_in_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self {
            shared: Shared {
                tree: tree.clone(),
                burn_in,
                burn_in_ids,
                burn_in_index,
                theta_init: fit_report.params.clone(),
                config,
            },
            fit_report,
            students: IndexMap::new(),
        }
    }

    pub fn tree(&self) -> &ConceptTree {
        &self.shared.tree
    }

    pub fn theta_init(&self) -> &Params<T> {
        &self.shared.theta_init
    }

    pub fn fit_report(&self) -> &FitReport<T> {
        &self.fit_report
    }

    pub fn burn_in(&self) -> &[ObservationSet] {
        &self.shared.burn_in
    }

    pub fn burn_in_students(&self) -> &[String] {
        &self.shared.burn_in_ids
    }

    pub fn student(&self, student_id: &str) -> Option<&StudentModel<T>> {
        self.students.get(student_id)
    }

    /// Parameters currently used for `student_id`.
    pub fn theta_of(&self, student_id: &str) -> &Params<T> {
        self.students
            .get(student_id)
            .map(|m| &m.theta)
            .unwrap_or(&self.shared.theta_init)
    }

    /// The dataset the next update of `student_id` would run on.
    pub fn update_dataset(&self, student_id: &str) -> Vec<ObservationSet> {
        let fresh;
        let model = match self.students.get(student_id) {
            Some(m) => m,
            None => {
                fresh = self.shared.new_model(student_id);
                &fresh
            }
        };
        self.shared.update_dataset(model).into_iter().cloned().collect()
    }

    pub fn observe(&mut self, record: &InteractionRecord) -> Result<()> {
        // Resolve the concept before creating a model so a bad record leaves no trace.
        record.observation(&self.shared.tree)?;
        let shared = &self.shared;
        let model = self
            .students
            .entry(record.student_id.clone())
            .or_insert_with(|| shared.new_model(&record.student_id));
        shared.observe(model, record)
    }

    /// Applies any batched observations that have not yet triggered an update.
    pub fn flush(&mut self, student_id: &str) -> Result<()> {
        match self.students.get_mut(student_id) {
            Some(m) => self.shared.flush(m),
            None => Ok(()),
        }
    }

    pub fn predict_next(&self, student_id: &str, question: &QuestionMeta) -> Result<Prediction<T>> {
        self.shared.predict(student_id, self.students.get(student_id), question)
    }

    pub fn replay(&mut self, stream: &[InteractionRecord], parallelism: &Parallelism) -> Result<Vec<PredictionRecord>> {
        Ok(self.replay_detailed(stream, false, parallelism)?.predictions)
    }

    /// Predicts each interaction, then observes it. Students are processed
    /// independently and records come back in stream order.
    pub fn replay_detailed(
        &mut self,
        stream: &[InteractionRecord],
        record_posteriors: bool,
        parallelism: &Parallelism,
    ) -> Result<ReplayOutput> {
        check_per_student_order(stream)?;
        let mut positions: IndexMap<&str, Vec<usize>> = IndexMap::new();
        for (i, r) in stream.iter().enumerate() {
            positions.entry(r.student_id.as_str()).or_default().push(i);
        }
        let work: Vec<(&str, Vec<usize>)> = positions.into_iter().collect();
        let shared = &self.shared;
        let students = &self.students;

        type Lane<T> = (StudentModel<T>, Vec<(usize, PredictionRecord, Option<PosteriorStep>)>);
        let lanes: Vec<Result<Lane<T>>> = parallelism.map(&work, |(sid, idx)| {
            let mut model = students
                .get(*sid)
                .cloned()
                .unwrap_or_else(|| shared.new_model(sid));
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                let r = &stream[i];
                let q = r.question();
                let p = shared.predict(sid, Some(&model), &q)?;
                shared.observe(&mut model, r)?;
                let step = if record_posteriors {
                    let after = shared.predict(sid, Some(&model), &q)?;
                    Some(PosteriorStep {
                        student_id: r.student_id.clone(),
                        seq: r.seq,
                        kc_id: r.kc_id.clone(),
                        before: p.posterior_mastery.to_f64_lossy(),
                        after: after.posterior_mastery.to_f64_lossy(),
                    })
                } else {
                    None
                };
                out.push((
                    i,
                    PredictionRecord {
                        student_id: r.student_id.clone(),
                        question_id: r.question_id.clone(),
                        p_correct: p.prob_correct.to_f64_lossy(),
                        actual: r.correct,
                        seq: r.seq,
                    },
                    step,
                ));
            }
            Ok((model, out))
        });

        let mut slots: Vec<Option<(PredictionRecord, Option<PosteriorStep>)>> = vec![None; stream.len()];
        let mut models = Vec::with_capacity(lanes.len());
        for lane in lanes {
            let (model, out) = lane?;
            models.push(model);
            for (i, rec, step) in out {
                slots[i] = Some((rec, step));
            }
        }
        for m in models {
            self.students.insert(m.student_id.clone(), m);
        }
        let mut output = ReplayOutput::default();
        for (rec, step) in slots.into_iter().flatten() {
            output.predictions.push(rec);
            output.posterior_steps.extend(step);
        }
        Ok(output)
    }
}
