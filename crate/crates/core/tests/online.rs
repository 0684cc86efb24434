mod common;

use hmtkt::em::{dataset_log_likelihood, FitConfig, Parallelism};
use hmtkt::eval::split_burn_in;
use hmtkt::online::{ClassroomSession, OnlineConfig};
use hmtkt::records::InteractionRecord;

fn session(w: &common::World, burn: &[InteractionRecord]) -> ClassroomSession<f64> {
    ClassroomSession::burn_in_fit(&w.tree, burn, &FitConfig::default(), OnlineConfig::default(), &Parallelism::Serial)
        .unwrap()
}

#[test]
fn students_are_isolated() {
    let w = common::world(12, 6, 20, true, 8);
    let (burn, rest) = split_burn_in(&w.stream, 5);
    let only_b: Vec<_> = rest.iter().filter(|r| r.student_id == "s001").cloned().collect();
    let mut mixed = session(&w, &burn);
    let mut alone = session(&w, &burn);
    let recs_mixed = mixed.replay(&rest, &Parallelism::Serial).unwrap();
    let recs_alone = alone.replay(&only_b, &Parallelism::Serial).unwrap();
    let b_mixed: Vec<_> = recs_mixed.into_iter().filter(|r| r.student_id == "s001").collect();
    assert_eq!(b_mixed, recs_alone);
    assert_eq!(mixed.theta_of("s001"), alone.theta_of("s001"));
}

#[test]
fn replay_is_deterministic_across_threads() {
    let w = common::world(15, 20, 25, true, 9);
    let (burn, rest) = split_burn_in(&w.stream, 10);
    let mut a = session(&w, &burn);
    let mut b = session(&w, &burn);
    let ra = a.replay(&rest, &Parallelism::Serial).unwrap();
    let rb = b.replay(&rest, &Parallelism::with_threads(4).unwrap()).unwrap();
    assert_eq!(ra, rb);
    for id in a.burn_in_students() {
        assert_eq!(a.theta_of(id), b.theta_of(id));
    }
}

#[test]
fn replay_matches_sequential_observe_and_predict() {
    let w = common::world(10, 5, 12, true, 10);
    let (burn, rest) = split_burn_in(&w.stream, 4);
    let mut a = session(&w, &burn);
    let mut b = session(&w, &burn);
    let ra = a.replay(&rest, &Parallelism::Serial).unwrap();
    for (r, rec) in rest.iter().zip(&ra) {
        let p = b.predict_next(&r.student_id, &r.question()).unwrap();
        assert_eq!(p.prob_correct, rec.p_correct);
        b.observe(r).unwrap();
    }
}

#[test]
fn one_step_after_observe_is_monotone() {
    use hmtkt::em::one_step_update;
    let w = common::world(10, 8, 20, true, 13);
    let (burn, rest) = split_burn_in(&w.stream, 10);
    let mut s = ClassroomSession::<f64>::burn_in_fit(
        &w.tree,
        &burn,
        &FitConfig::default(),
        OnlineConfig { update_every: usize::MAX },
        &Parallelism::Serial,
    )
    .unwrap();
    for r in rest.iter().take(60) {
        s.observe(r).unwrap();
        let data = s.update_dataset(&r.student_id);
        let theta = s.theta_of(&r.student_id).clone();
        let before = dataset_log_likelihood(&w.tree, &theta, &data).unwrap();
        let next = one_step_update(&w.tree, &theta, &data, &Parallelism::Serial).unwrap();
        s.flush(&r.student_id).unwrap();
        assert_eq!(s.theta_of(&r.student_id), &next);
        let after = dataset_log_likelihood(&w.tree, &next, &data).unwrap();
        assert!(after >= before - 1e-9, "{before} -> {after}");
    }
}

#[test]
fn predictions_stay_between_guess_and_mastery_rates() {
    let w = common::world(14, 15, 30, true, 14);
    let (burn, rest) = split_burn_in(&w.stream, 10);
    let mut s = session(&w, &burn);
    for r in &rest {
        let theta = s.theta_of(&r.student_id).clone();
        let p = s.predict_next(&r.student_id, &r.question()).unwrap().prob_correct;
        let phi = theta.phi(r.difficulty);
        assert!(p >= theta.epsilon.min(phi) && p <= theta.epsilon.max(phi));
        s.observe(r).unwrap();
    }
}

fn observe_time(students: usize) -> f64 {
    let w = common::world(10, students, 12, false, 30);
    let (burn, _) = split_burn_in(&w.stream, 10);
    let s = ClassroomSession::<f64>::burn_in_fit(
        &w.tree,
        &burn,
        &FitConfig { max_iters: 2, tol: 0.0 },
        OnlineConfig::default(),
        &Parallelism::Serial,
    )
    .unwrap();
    let probe = w.stream[0].clone();
    (0..5)
        .map(|_| {
            let mut t = s.clone();
            let start = std::time::Instant::now();
            for k in 0..10 {
                t.observe(&InteractionRecord { student_id: "probe".into(), seq: k, ..probe.clone() }).unwrap();
            }
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn observe_cost_tracks_dataset_size() {
    let ratio = observe_time(800) / observe_time(100);
    // 8x the data
    assert!(ratio > 2.0 && ratio < 24.0, "ratio {ratio}");
}
