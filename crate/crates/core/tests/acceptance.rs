//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hmtkt::concept_tree::{ConceptTree, Difficulty};
use hmtkt::em::{dataset_log_likelihood, e_step, fit, m_step, one_step_update, FitConfig, Parallelism};
use hmtkt::eval::{auc, constant_baseline, replay_fixed, run_experiment, split_burn_in, ExperimentConfig};
use hmtkt::inference::{posteriors, Observation};
use hmtkt::model::{Params, EPSILON_MAX};
use hmtkt::online::{ClassroomSession, OnlineConfig};
use hmtkt::records::InteractionRecord;
use hmtkt::simulate::{
    generate_classroom, oracle_check, random_observations, random_params, random_question_bank, random_tree,
    sample_states, OracleCheckConfig, SimConfig, UNIFORM_MIX,
};
use hmtkt::ObservationSet;
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// --- 1 -------------------------------------------------------------------

fn oracle_config() -> OracleCheckConfig {
    OracleCheckConfig {
        instances: 300,
        min_nodes: 2,
        max_nodes: 12,
        max_observations: 30,
        seed: 2024,
        tolerance: 1e-10,
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let s = oracle_check(&oracle_config(), None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let dev = s.max_marginal_dev.max(s.max_pairwise_dev).max(s.max_log_likelihood_dev);
    outcome(
        s.instances >= 200 && dev < 1e-10 && secs < 30.0,
        format!(
            "{} instances (2-12 nodes): max |dev| marginal {:.1e}, pairwise {:.1e}, log-lik {:.1e}; {secs:.1}s",
            s.instances, s.max_marginal_dev, s.max_pairwise_dev, s.max_log_likelihood_dev
        ),
    )
}

// --- 2 -------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = common::rng(77);
    let mut worst_drop = f64::NEG_INFINITY;
    let mut pairs = 0;
    let runs = 60;
    for run in 0..runs {
        let nodes = r.random_range(2..=50);
        let students = r.random_range(1..=100);
        let interactions = r.random_range(1..=40);
        let w = common::world(nodes, students, interactions, r.random(), 1000 + run);
        let data = common::per_student(&w.tree, &w.stream);
        let init: Params<f64> = if run % 2 == 0 { Params::defaults(&w.tree) } else { random_params(&w.tree, &mut r) };
        let rep = fit(&w.tree, &data, &init, &FitConfig::default(), &Parallelism::Serial).unwrap();
        for p in rep.trace.windows(2) {
            worst_drop = worst_drop.max(p[0] - p[1]);
            pairs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_drop <= 1e-9 && secs < 120.0,
        format!("{runs} fits, {pairs} consecutive pairs, largest decrease {worst_drop:.2e}; {secs:.1}s"),
    )
}

// --- 3 -------------------------------------------------------------------

/// Root, 7 concepts, 6 leaves each: 50 nodes, depth 3.
fn course_tree() -> ConceptTree {
    let mut pairs: Vec<(String, Option<String>)> = vec![("root".into(), None)];
    for i in 0..7 {
        pairs.push((format!("c{i}"), Some("root".into())));
        for j in 0..6 {
            pairs.push((format!("c{i}.{j}"), Some(format!("c{i}"))));
        }
    }
    let refs: Vec<(&str, Option<&str>)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_deref())).collect();
    ConceptTree::from_parents(&refs).unwrap()
}

/// Responses that inform `gamma[c]`: each student's responses inside the
/// subtree of `c`, weighted by the posterior probability (under the true
/// parameters) that the parent of `c` is unmastered.
fn effective_observations(tree: &ConceptTree, theta: &Params<f64>, data: &[ObservationSet]) -> Vec<f64> {
    let n = tree.len();
    let subtrees: Vec<Vec<usize>> = (0..n).map(|c| tree.subtree(c)).collect();
    let mut out = vec![0.0; n];
    for obs in data {
        let b = posteriors(tree, theta, obs).unwrap();
        for c in 0..n {
            let at_risk = tree.parent(c).map_or(1.0, |p| 1.0 - b.marginal[p]);
            let k: usize = subtrees[c].iter().map(|&x| obs.by_kc(x).len()).sum();
            out[c] += at_risk * k as f64;
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let tree = course_tree();
    let par = Parallelism::with_threads(4).unwrap();
    let mut emission_worst = 0.0f64;
    let mut gamma_worst = 0.0f64;
    let mut checked = 0;
    let mut misses = 0;
    for seed in 0..3u64 {
        let mut r = common::rng(300 + seed);
        let theta: Params<f64> = random_params(&tree, &mut r);
        let bank = random_question_bank(&tree, 5, UNIFORM_MIX, &mut r).unwrap();
        let cfg = SimConfig {
            n_students: 500,
            interactions_per_student: 100,
            ability_targeting: false,
            seed: 300 + seed,
            ..SimConfig::default()
        };
        let (stream, _) = generate_classroom(&tree, &theta, &bank, &cfg, &par).unwrap();
        let data = common::per_student(&tree, &stream);
        let rep = fit(&tree, &data, &Params::<f64>::defaults(&tree), &FitConfig { max_iters: 10_000, tol: 1e-6 }, &par).unwrap();
        let p = &rep.params;
        for (a, b) in [(p.epsilon, theta.epsilon), (p.r_easy, theta.r_easy), (p.r_med, theta.r_med), (p.r_hard, theta.r_hard)] {
            emission_worst = emission_worst.max((a - b).abs());
        }
        let eff = effective_observations(&tree, &theta, &data);
        for (c, &n_eff) in eff.iter().enumerate() {
            if n_eff >= 50.0 {
                let e = (p.gamma[c] - theta.gamma[c]).abs();
                checked += 1;
                misses += (e > 0.05) as usize;
                gamma_worst = gamma_worst.max(e);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        emission_worst <= 0.03 && gamma_worst <= 0.05 && secs < 300.0,
        format!(
            "3 seeds x 500 students x 100 interactions, 50 nodes: max |eps/r err| {emission_worst:.4} (tol 0.03); \
             gamma max err {gamma_worst:.4} over {checked} node fits, {misses} above 0.05; {secs:.1}s"
        ),
    )
}

// --- 4 -------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let mut r = common::rng(404);
    let mut worst_drop = f64::NEG_INFINITY;
    let mut identical = 0;
    let pairs = 120;
    for k in 0..pairs {
        let nodes = r.random_range(2..=30);
        let students = r.random_range(2..=30);
        let w = common::world(nodes, students, r.random_range(6..=25), true, 4000 + k);
        let (burn, rest) = split_burn_in(&w.stream, 5);
        let burn_fit = FitConfig { max_iters: 3, tol: 0.0 };
        let mut session = ClassroomSession::<f64>::burn_in_fit(&w.tree, &burn, &burn_fit, OnlineConfig::default(), &Parallelism::Serial).unwrap();
        let target = rest.first().map(|x| x.student_id.clone()).unwrap_or_else(|| "new".into());
        for x in rest.iter().filter(|x| x.student_id == target).take(r.random_range(1..=10)) {
            session.observe(x).unwrap();
        }
        let data = session.update_dataset(&target);
        let theta: Params<f64> = random_params(&w.tree, &mut r);
        let before = dataset_log_likelihood(&w.tree, &theta, &data).unwrap();
        let one = one_step_update(&w.tree, &theta, &data, &Parallelism::Serial).unwrap();
        let after = dataset_log_likelihood(&w.tree, &one, &data).unwrap();
        worst_drop = worst_drop.max(before - after);
        let two = one_step_update(&w.tree, &one, &data, &Parallelism::Serial).unwrap();
        let rep = fit(&w.tree, &data, &theta, &FitConfig { max_iters: 2, tol: 0.0 }, &Parallelism::Serial).unwrap();
        identical += (rep.params == two && rep.iterations == 2) as usize;
    }
    outcome(
        worst_drop <= 1e-9 && identical == pairs as usize,
        format!("{pairs} (theta, dataset) pairs: largest decrease {worst_drop:.2e}; two steps == fit(max_iters=2) in {identical}/{pairs}"),
    )
}

// --- 5, 6 ----------------------------------------------------------------

/// Classrooms replayed by criteria 5 and 6, kept for the bound checks of criterion 7.
struct Replays {
    streams: Vec<(ConceptTree, Params<f64>, Vec<InteractionRecord>, usize)>,
}

fn criterion_5(replays: &mut Replays) -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut diffs = Vec::new();
    for seed in 0..3u64 {
        // the classroom `hmtkt simulate --seed <seed>` writes with default settings
        let w = common::world(20, 100, 60, true, seed);
        let cfg = ExperimentConfig { burn_in_count: 10, threads: 4, ..ExperimentConfig::default() };
        let fitted = run_experiment(&w.tree, &w.stream, &cfg).unwrap().metrics.auc;
        let truth = auc(&replay_fixed(&w.tree, &w.theta, &w.stream, 10).unwrap()).unwrap();
        diffs.push(fitted - truth);
        lines.push(format!("{fitted:.4}/{truth:.4}"));
        replays.streams.push((w.tree, w.theta, w.stream, 10));
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mean.abs() <= 0.02 && secs < 300.0,
        format!("AUC replay/true-theta per seed {}; mean difference {mean:+.4}; {secs:.1}s", lines.join(", ")),
    )
}

fn criterion_6(replays: &mut Replays) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let w = common::world(15, 50, 30, false, 600 + seed);
        let cfg = ExperimentConfig { burn_in_count: 5, ..ExperimentConfig::default() };
        let out = run_experiment(&w.tree, &w.stream, &cfg).unwrap();
        let base = auc(&constant_baseline(&out.predictions)).unwrap();
        ok &= out.metrics.auc - base >= 0.10;
        lines.push(format!("{:.4} vs {base:.4}", out.metrics.auc));
        replays.streams.push((w.tree, w.theta, w.stream, 5));
    }
    outcome(ok, format!("50 students, burn-in 5, AUC vs constant baseline: {}", lines.join(", ")))
}

// --- 7 -------------------------------------------------------------------

fn criterion_7(replays: &Replays) -> Outcome {
    let mut r = common::rng(707);
    // entailment
    let mut samples = 0;
    let mut broken = 0;
    while samples < 100_000 {
        let t = random_tree(r.random_range(2..=40), &mut r);
        let p: Params<f64> = random_params(&t, &mut r);
        for _ in 0..1000 {
            let k = sample_states(&t, &p, &mut r);
            broken += (0..t.len()).any(|c| t.parent(c).is_some_and(|q| k[q] && !k[c])) as usize;
            samples += 1;
        }
    }
    // normalization on the oracle instances
    let s = oracle_check(&oracle_config(), None).unwrap();
    // prediction bounds across the replays of criteria 5 and 6
    let mut predictions = 0;
    let mut out_of_bounds = 0;
    for (tree, theta_star, stream, burn) in &replays.streams {
        let (b, rest) = split_burn_in(stream, *burn);
        let mut session = ClassroomSession::<f64>::burn_in_fit(tree, &b, &FitConfig::default(), OnlineConfig::default(), &Parallelism::Serial).unwrap();
        for x in &rest {
            let theta = session.theta_of(&x.student_id).clone();
            let p = session.predict_next(&x.student_id, &x.question()).unwrap().prob_correct;
            let phi = theta.phi(x.difficulty);
            out_of_bounds += !(p >= theta.epsilon.min(phi) && p <= theta.epsilon.max(phi)) as usize;
            predictions += 1;
            session.observe(x).unwrap();
        }
        for (q, x) in replay_fixed(tree, theta_star, stream, *burn).unwrap().iter().zip(&rest) {
            let phi = theta_star.phi(x.difficulty);
            let (lo, hi) = (theta_star.epsilon.min(phi), theta_star.epsilon.max(phi));
            out_of_bounds += !(q.p_correct >= lo && q.p_correct <= hi) as usize;
            predictions += 1;
        }
    }
    // permutation invariance
    let mut same = 0;
    for _ in 0..50 {
        let t = random_tree(r.random_range(1..=25), &mut r);
        let p: Params<f64> = random_params(&t, &mut r);
        let obs = random_observations(&t, 40, &mut r);
        let mut items: Vec<Observation> = obs.interactions().to_vec();
        items.shuffle(&mut r);
        let mut other = ObservationSet::new(&t);
        for o in items {
            other.push_observation(o).unwrap();
        }
        same += (posteriors(&t, &p, &obs).unwrap() == posteriors(&t, &p, &other).unwrap()) as usize;
    }
    let pass = broken == 0 && s.max_consistency_dev < 1e-10 && out_of_bounds == 0 && predictions > 0 && same == 50;
    outcome(
        pass,
        format!(
            "entailment broken in {broken}/{samples} samples; normalization/consistency dev {:.1e} on {} instances; \
             {out_of_bounds}/{predictions} predictions out of bounds; {same}/50 permutations bit-identical",
            s.max_consistency_dev, s.instances
        ),
    )
}

// --- 8 -------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let t = ConceptTree::from_parents(&[("A", None)]).unwrap();
    let mut p: Params<f64> = Params::defaults(&t);
    p.gamma[0] = 1e-6;
    let items: Vec<_> = (0..20).map(|i| (0, Difficulty::Medium, i % 5 != 0)).collect();
    let data = vec![common::obs_from(&t, &items)];
    let stats = e_step(&t, &p, &data, &Parallelism::Serial).unwrap();
    let raw = stats.eps_pos / (stats.eps_pos + stats.eps_neg);
    let next = m_step(&stats, &p, &t);
    outcome(
        raw > EPSILON_MAX && next.epsilon == 0.3,
        format!("unclipped estimate {raw:.4}; after m_step epsilon = {:?}", next.epsilon),
    )
}

// --- 9 -------------------------------------------------------------------

fn run_bin(args: &[&str]) {
    let st = Command::new(env!("CARGO_BIN_EXE_hmtkt")).args(args).env_clear().output().unwrap();
    assert!(st.status.success(), "{args:?}: {}", String::from_utf8_lossy(&st.stderr));
}

fn bundle(dir: &Path, threads: &str) {
    let sim = dir.join("sim");
    let ev = dir.join("eval");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    run_bin(&["simulate", "--out", &s(&sim), "--seed", "11", "--students", "40", "--interactions", "30", "--threads", threads]);
    run_bin(&[
        "eval", "--tree", &s(&sim.join("tree.json")), "--stream", &s(&sim.join("stream.jsonl")),
        "--out", &s(&ev), "--seed", "11", "--threads", threads,
    ]);
}

fn criterion_9() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let runs = [("a", "1"), ("b", "1"), ("c", "4")];
    for (name, threads) in runs {
        bundle(&root.path().join(name), threads);
    }
    let files = [
        "sim/tree.json", "sim/questions.csv", "sim/stream.jsonl", "sim/theta_star.json", "sim/ground_truth.json",
        "eval/metrics.json", "eval/predictions.jsonl", "eval/predictions.csv", "eval/theta_init.json",
    ];
    let mut differing = Vec::new();
    for f in files {
        let a = fs::read(root.path().join("a").join(f)).unwrap();
        for other in ["b", "c"] {
            if fs::read(root.path().join(other).join(f)).unwrap() != a {
                differing.push(format!("{other}/{f}"));
            }
        }
    }
    let metric = |d: &str| -> serde_json::Value {
        serde_json::from_slice(&fs::read(root.path().join(d).join("eval/metrics.json")).unwrap()).unwrap()
    };
    let (ma, mc) = (metric("a"), metric("c"));
    let metric_gap = ["auc", "accuracy", "f1"]
        .iter()
        .map(|k| (ma[k].as_f64().unwrap() - mc[k].as_f64().unwrap()).abs())
        .fold(0.0f64, f64::max);
    let streams_same = !differing.iter().any(|d| d.ends_with("stream.jsonl"));
    outcome(
        differing.is_empty() && streams_same && metric_gap <= 1e-12,
        format!(
            "simulate+eval twice with --threads 1 and once with --threads 4: {} of {} outputs differ; metric gap {metric_gap:.1e}",
            differing.len(),
            files.len() * 2
        ),
    )
}

fn main() {
    let mut replays = Replays { streams: Vec::new() };
    type Check = Box<dyn FnOnce(&mut Replays) -> Outcome>;
    let criteria: Vec<(&str, Check)> = vec![
        ("1 oracle equivalence", Box::new(|_| criterion_1())),
        ("2 EM monotonicity", Box::new(|_| criterion_2())),
        ("3 parameter recovery", Box::new(|_| criterion_3())),
        ("4 one-step update", Box::new(|_| criterion_4())),
        ("5 online protocol fidelity", Box::new(criterion_5)),
        ("6 low-resource analogue", Box::new(criterion_6)),
        ("7 invariant suites", Box::new(|r| criterion_7(r))),
        ("8 epsilon clip", Box::new(|_| criterion_8())),
        ("9 determinism", Box::new(|_| criterion_9())),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check(&mut replays);
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
