//! Command-line workflows: tree validation, fitting, simulation, evaluation and the oracle check.
//!
//! Settings resolve as flag (or `HMTKT_*` environment variable), then the
//! `key = value` file given by `--config`, then built-in defaults.
//! Exit status is 0 on success, 1 on a domain failure (invalid tree, oracle
//! mismatch, numerical failure) and 2 on an environment failure (I/O, parse
//! errors, bad configuration).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::concept_tree::{
    validate_document, ConceptTree, DifficultyBins, MultiKcPolicy, QuestionBank, QuestionFormat,
    TreeDocument,
};
use crate::em::{fit, FitConfig, Parallelism};
use crate::error::{Error, TreeError};
use crate::eval::{run_experiment, ExperimentConfig};
use crate::inference::{BeliefTable, ObservationSet};
use crate::model::Params;
use crate::online::{group_by_student, OnlineConfig};
use crate::records::{predictions_to_csv, read_interactions, write_jsonl, InteractionRecord};
use crate::simulate::{
    generate_classroom, oracle_check_with, random_params, random_question_bank, random_tree,
    OracleCheckConfig, SimConfig, UNIFORM_MIX,
};

#[derive(Debug, Parser)]
#[command(name = "hmtkt", version, about = "Knowledge tracing over concept trees")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check a tree file (and optionally a question file against it).
    ValidateTree,
    /// Fit parameters on the burn-in portion of a stream (`--burn-in 0` uses all of it).
    Fit,
    /// Write a synthetic classroom: tree, questions, stream and ground truth.
    Simulate,
    /// Burn-in fit, prequential replay and metrics.
    Eval,
    /// Compare exact inference with brute-force enumeration on random instances.
    OracleCheck,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// key = value settings file; flags take precedence over it.
    #[arg(long, global = true, env = "HMTKT_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "HMTKT_TREE")]
    pub tree: Option<PathBuf>,
    #[arg(long, global = true, env = "HMTKT_QUESTIONS")]
    pub questions: Option<PathBuf>,
    #[arg(long, global = true, env = "HMTKT_STREAM")]
    pub stream: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "HMTKT_OUT")]
    pub out: Option<PathBuf>,
    /// Interactions per student pooled into the shared burn-in set.
    #[arg(long, global = true, env = "HMTKT_BURN_IN")]
    pub burn_in: Option<usize>,
    #[arg(long, global = true, env = "HMTKT_TOL")]
    pub tol: Option<f64>,
    #[arg(long, global = true, env = "HMTKT_MAX_ITERS")]
    pub max_iters: Option<usize>,
    #[arg(long, global = true, env = "HMTKT_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "HMTKT_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, env = "HMTKT_BIN_HI")]
    pub bin_hi: Option<f64>,
    #[arg(long, global = true, env = "HMTKT_BIN_LO")]
    pub bin_lo: Option<f64>,
    /// Probability at or above which a prediction counts as "correct".
    #[arg(long, global = true, env = "HMTKT_THRESHOLD")]
    pub threshold: Option<f64>,
    /// Observations per student between personalized updates.
    #[arg(long, global = true, env = "HMTKT_UPDATE_EVERY")]
    pub update_every: Option<usize>,
    /// Keep the most frequent concept of multi-concept questions instead of rejecting them.
    #[arg(long, global = true, env = "HMTKT_KEEP_MOST_FREQUENT_KC")]
    pub keep_most_frequent_kc: Option<bool>,
    #[arg(long, global = true, env = "HMTKT_STUDENTS")]
    pub students: Option<usize>,
    #[arg(long, global = true, env = "HMTKT_INTERACTIONS")]
    pub interactions: Option<usize>,
    /// Nodes of generated trees (simulate, oracle-check).
    #[arg(long, global = true, env = "HMTKT_NODES")]
    pub nodes: Option<usize>,
    #[arg(long, global = true, env = "HMTKT_PER_LEAF")]
    pub per_leaf: Option<usize>,
    #[arg(long, global = true, env = "HMTKT_ABILITY_MEAN")]
    pub ability_mean: Option<f64>,
    #[arg(long, global = true, env = "HMTKT_ABILITY_STD")]
    pub ability_std: Option<f64>,
    /// Random instances for oracle-check.
    #[arg(long, global = true, env = "HMTKT_INSTANCES")]
    pub instances: Option<usize>,
    /// Also write per-interaction mastery posteriors during eval.
    #[arg(long, global = true, env = "HMTKT_DUMP_POSTERIORS")]
    pub dump_posteriors: Option<bool>,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tree: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub stream: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub burn_in: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub threads: usize,
    pub bin_hi: f64,
    pub bin_lo: f64,
    pub threshold: f64,
    pub update_every: usize,
    pub keep_most_frequent_kc: bool,
    pub students: usize,
    pub interactions: usize,
    pub nodes: Option<usize>,
    pub per_leaf: usize,
    pub ability_mean: f64,
    pub ability_std: f64,
    pub instances: usize,
    pub dump_posteriors: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bins = DifficultyBins::default();
        let sim = SimConfig::default();
        Self {
            tree: None,
            questions: None,
            stream: None,
            out: None,
            burn_in: 10,
            tol: FitConfig::default().tol,
            max_iters: FitConfig::default().max_iters,
            seed: 0,
            threads: 1,
            bin_hi: bins.hi(),
            bin_lo: bins.lo(),
            threshold: crate::eval::DEFAULT_THRESHOLD,
            update_every: 1,
            keep_most_frequent_kc: false,
            students: sim.n_students,
            interactions: sim.interactions_per_student,
            nodes: None,
            per_leaf: 5,
            ability_mean: sim.ability_mean,
            ability_std: sim.ability_std,
            instances: OracleCheckConfig::default().instances,
            dump_posteriors: false,
        }
    }
}

/// Parses a `key = value` document. `#` starts a comment; `-` and `_` in keys are interchangeable.
pub fn parse_config_file(text: &str) -> anyhow::Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("config line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> anyhow::Result<Self> {
        let mut file = match &o.config {
            Some(p) => parse_config_file(&read_text(p)?)?,
            None => HashMap::new(),
        };
        let d = RunConfig::default();
        fn pick<T>(
            flag: &Option<T>,
            file: &mut HashMap<String, String>,
            key: &str,
            default: T,
        ) -> anyhow::Result<T>
        where
            T: FromStr + Clone,
            T::Err: std::fmt::Display,
        {
            if let Some(v) = flag {
                file.remove(key);
                return Ok(v.clone());
            }
            match file.remove(key) {
                Some(s) => s
                    .parse()
                    .map_err(|e| Error::InvalidConfig(format!("config key `{key}` = `{s}`: {e}")).into()),
                None => Ok(default),
            }
        }
        fn path(flag: &Option<PathBuf>, file: &mut HashMap<String, String>, key: &str) -> Option<PathBuf> {
            let from_file = file.remove(key).map(PathBuf::from);
            flag.clone().or(from_file)
        }
        let cfg = RunConfig {
            tree: path(&o.tree, &mut file, "tree"),
            questions: path(&o.questions, &mut file, "questions"),
            stream: path(&o.stream, &mut file, "stream"),
            out: path(&o.out, &mut file, "out"),
            burn_in: pick(&o.burn_in, &mut file, "burn_in", d.burn_in)?,
            tol: pick(&o.tol, &mut file, "tol", d.tol)?,
            max_iters: pick(&o.max_iters, &mut file, "max_iters", d.max_iters)?,
            seed: pick(&o.seed, &mut file, "seed", d.seed)?,
            threads: pick(&o.threads, &mut file, "threads", d.threads)?,
            bin_hi: pick(&o.bin_hi, &mut file, "bin_hi", d.bin_hi)?,
            bin_lo: pick(&o.bin_lo, &mut file, "bin_lo", d.bin_lo)?,
            threshold: pick(&o.threshold, &mut file, "threshold", d.threshold)?,
            update_every: pick(&o.update_every, &mut file, "update_every", d.update_every)?,
            keep_most_frequent_kc: pick(
                &o.keep_most_frequent_kc,
                &mut file,
                "keep_most_frequent_kc",
                d.keep_most_frequent_kc,
            )?,
            students: pick(&o.students, &mut file, "students", d.students)?,
            interactions: pick(&o.interactions, &mut file, "interactions", d.interactions)?,
            nodes: match o.nodes {
                Some(n) => {
                    file.remove("nodes");
                    Some(n)
                }
                None => pick(&None, &mut file, "nodes", 0usize).map(|n| (n > 0).then_some(n))?,
            },
            per_leaf: pick(&o.per_leaf, &mut file, "per_leaf", d.per_leaf)?,
            ability_mean: pick(&o.ability_mean, &mut file, "ability_mean", d.ability_mean)?,
            ability_std: pick(&o.ability_std, &mut file, "ability_std", d.ability_std)?,
            instances: pick(&o.instances, &mut file, "instances", d.instances)?,
            dump_posteriors: pick(&o.dump_posteriors, &mut file, "dump_posteriors", d.dump_posteriors)?,
        };
        if let Some(k) = file.keys().min() {
            bail!(Error::InvalidConfig(format!("unknown config key `{k}`")));
        }
        cfg.check()?;
        Ok(cfg)
    }
}

impl RunConfig {
    fn check(&self) -> anyhow::Result<()> {
        let bad = |m: String| -> anyhow::Result<()> { Err(Error::InvalidConfig(m).into()) };
        DifficultyBins::new(self.bin_hi, self.bin_lo).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if self.tol.is_nan() || self.tol < 0.0 {
            return bad(format!("tol must be non-negative, got {}", self.tol));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.update_every == 0 {
            return bad("update_every must be at least 1".into());
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }

    pub fn bins(&self) -> DifficultyBins {
        DifficultyBins::new(self.bin_hi, self.bin_lo).expect("checked in resolve")
    }

    fn required<'a>(&self, p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("--{flag} is required")).into())
    }
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    DomainFailure,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::DomainFailure => 1,
        }
    }
}

/// Exit code for an error that aborted a command.
pub fn error_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io(_) | Error::Json(_) | Error::Record { .. } | Error::InvalidConfig(_)) => 2,
        Some(Error::Tree(TreeError::Malformed(_))) => 2,
        Some(Error::Question(crate::error::QuestionError::Malformed(_))) => 2,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 2,
    }
}

pub fn run(cli: &Cli) -> u8 {
    let result = RunConfig::resolve(&cli.overrides).and_then(|cfg| match cli.command {
        Command::ValidateTree => cmd_validate_tree(&cfg),
        Command::Fit => cmd_fit(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::OracleCheck => cmd_oracle_check(&cfg),
    });
    match result {
        Ok(status) => status.code(),
        Err(e) => {
            eprintln!("error: {e:#}");
            error_code(&e)
        }
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn write_text(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, text)
        .map_err(Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<&Path> {
    let dir = cfg.required(&cfg.out, "out")?;
    fs::create_dir_all(dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn load_tree(path: &Path) -> anyhow::Result<ConceptTree> {
    let text = read_text(path)?;
    let doc = TreeDocument::from_json(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(ConceptTree::from_document(&doc).map_err(Error::from)?)
}

pub fn load_questions(path: &Path, cfg: &RunConfig) -> anyhow::Result<QuestionBank> {
    let file = fs::File::open(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    let policy = if cfg.keep_most_frequent_kc {
        MultiKcPolicy::KeepMostFrequent
    } else {
        MultiKcPolicy::Reject
    };
    QuestionBank::read(
        std::io::BufReader::new(file),
        QuestionFormat::from_path(path),
        &cfg.bins(),
        policy,
    )
    .map_err(Error::from)
    .with_context(|| format!("parsing {}", path.display()))
}

/// Reads the stream; with `--questions`, concept and difficulty come from the question file.
pub fn load_stream(cfg: &RunConfig, tree: &ConceptTree) -> anyhow::Result<Vec<InteractionRecord>> {
    let path = cfg.required(&cfg.stream, "stream")?;
    let file = fs::File::open(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut stream = read_interactions(std::io::BufReader::new(file))
        .with_context(|| format!("parsing {}", path.display()))?;
    if let Some(qp) = &cfg.questions {
        let bank = load_questions(qp, cfg)?;
        for (i, r) in stream.iter_mut().enumerate() {
            let q = bank.get(&r.question_id).ok_or_else(|| Error::Record {
                line: i + 1,
                message: format!("question `{}` is not in {}", r.question_id, qp.display()),
            })?;
            r.kc_id = q.kc.clone();
            r.difficulty = q.difficulty;
        }
    }
    for r in &stream {
        if tree.index_of(&r.kc_id).is_none() {
            return Err(Error::UnknownNode(r.kc_id.clone()).into());
        }
    }
    Ok(stream)
}

pub fn cmd_validate_tree(cfg: &RunConfig) -> anyhow::Result<Status> {
    let path = cfg.required(&cfg.tree, "tree")?;
    let text = read_text(path)?;
    let doc = TreeDocument::from_json(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", path.display()))?;
    let report = validate_document(&doc);
    if !report.is_valid() {
        println!("{}: invalid", path.display());
        println!("{report}");
        return Ok(Status::DomainFailure);
    }
    let tree = ConceptTree::from_document(&doc).map_err(Error::from)?;
    let st = tree.stats();
    println!(
        "{}: ok ({} nodes, depth {}, {} leaves)",
        path.display(),
        st.nodes,
        st.max_depth,
        st.leaves
    );
    if let Some(qp) = &cfg.questions {
        let bank = load_questions(qp, cfg)?;
        let problems = bank.check_against(&tree);
        if !problems.is_empty() {
            println!("{}: {} problem(s)", qp.display(), problems.len());
            for p in &problems {
                println!("  {p:?}");
            }
            return Ok(Status::DomainFailure);
        }
        println!("{}: ok ({} questions)", qp.display(), bank.len());
    }
    Ok(Status::Success)
}

pub fn cmd_fit(cfg: &RunConfig) -> anyhow::Result<Status> {
    let tree = load_tree(cfg.required(&cfg.tree, "tree")?)?;
    let stream = load_stream(cfg, &tree)?;
    let data = if cfg.burn_in == 0 {
        stream
    } else {
        crate::eval::split_burn_in(&stream, cfg.burn_in).0
    };
    let (_, sets) = group_by_student(&tree, &data)?;
    let par = Parallelism::with_threads(cfg.threads)?;
    let report = fit(&tree, &sets, &Params::<f64>::defaults(&tree), &cfg.fit_config(), &par)?;
    let dir = out_dir(cfg)?;
    write_text(dir, "params.json", &report.params.to_json(&tree))?;
    write_text(dir, "fit_report.json", &report.to_json(&tree))?;
    println!(
        "fit {} students, {} iterations, converged {}, log-likelihood {:.6}",
        sets.len(),
        report.iterations,
        report.converged,
        report.final_log_likelihood()
    );
    Ok(Status::Success)
}

pub fn cmd_simulate(cfg: &RunConfig) -> anyhow::Result<Status> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tree = match &cfg.tree {
        Some(p) => load_tree(p)?,
        None => {
            let n = cfg.nodes.unwrap_or(20);
            if n == 0 {
                bail!(Error::InvalidConfig("nodes must be at least 1".into()));
            }
            random_tree(n, &mut rng)
        }
    };
    let theta: Params<f64> = random_params(&tree, &mut rng);
    let bank = match &cfg.questions {
        Some(p) => load_questions(p, cfg)?,
        None => random_question_bank(&tree, cfg.per_leaf, UNIFORM_MIX, &mut rng)?,
    };
    let sim = SimConfig {
        n_students: cfg.students,
        interactions_per_student: cfg.interactions,
        ability_mean: cfg.ability_mean,
        ability_std: cfg.ability_std,
        ability_targeting: true,
        seed: cfg.seed,
    };
    let par = Parallelism::with_threads(cfg.threads)?;
    let (stream, truth) = generate_classroom(&tree, &theta, &bank, &sim, &par)?;
    let dir = out_dir(cfg)?;
    write_text(dir, "tree.json", &tree.to_json())?;
    write_text(dir, "questions.csv", &bank.to_csv())?;
    write_text(dir, "stream.jsonl", &write_jsonl(&stream))?;
    write_text(dir, "theta_star.json", &theta.to_json(&tree))?;
    let mut gt = serde_json::to_string_pretty(&truth.to_document()).map_err(Error::from)?;
    gt.push('\n');
    write_text(dir, "ground_truth.json", &gt)?;
    let rate = stream.iter().filter(|r| r.is_correct()).count() as f64 / stream.len().max(1) as f64;
    println!(
        "simulated {} students x {} interactions on {} nodes, correct rate {:.4}",
        cfg.students,
        cfg.interactions,
        tree.len(),
        rate
    );
    Ok(Status::Success)
}

pub fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<Status> {
    let tree = load_tree(cfg.required(&cfg.tree, "tree")?)?;
    let stream = load_stream(cfg, &tree)?;
    let exp = ExperimentConfig {
        burn_in_count: cfg.burn_in,
        fit: cfg.fit_config(),
        threshold: cfg.threshold,
        online: OnlineConfig {
            update_every: cfg.update_every,
        },
        threads: cfg.threads,
    };
    let dir = out_dir(cfg)?;
    if cfg.dump_posteriors {
        let par = Parallelism::with_threads(cfg.threads)?;
        let (burn, rest) = crate::eval::split_burn_in(&stream, cfg.burn_in);
        let mut session =
            crate::online::ClassroomSession::<f64>::burn_in_fit(&tree, &burn, &exp.fit, exp.online, &par)?;
        let out = session.replay_detailed(&rest, true, &par)?;
        write_text(dir, "posteriors.jsonl", &write_jsonl(&out.posterior_steps))?;
    }
    let outcome = run_experiment(&tree, &stream, &exp)?;
    write_text(dir, "metrics.json", &outcome.metrics.to_json())?;
    write_text(dir, "predictions.jsonl", &write_jsonl(&outcome.predictions))?;
    write_text(dir, "predictions.csv", &predictions_to_csv(&outcome.predictions))?;
    write_text(dir, "theta_init.json", &outcome.session.fit_report().to_json(&tree))?;
    println!("{}", outcome.metrics);
    Ok(Status::Success)
}

pub fn cmd_oracle_check(cfg: &RunConfig) -> anyhow::Result<Status> {
    cmd_oracle_check_with(cfg, crate::inference::posteriors)
}

/// The oracle check with a caller-supplied inference engine.
pub fn cmd_oracle_check_with<F>(cfg: &RunConfig, engine: F) -> anyhow::Result<Status>
where
    F: Fn(&ConceptTree, &Params<f64>, &ObservationSet) -> crate::error::Result<BeliefTable<f64>>,
{
    let fixed = cfg.tree.as_deref().map(load_tree).transpose()?;
    let n = cfg.nodes.unwrap_or(8);
    let oc = OracleCheckConfig {
        instances: cfg.instances,
        min_nodes: n,
        max_nodes: n,
        seed: cfg.seed,
        ..OracleCheckConfig::default()
    };
    if oc.instances == 0 {
        log::warn!("oracle check ran on zero instances; nothing was compared");
    }
    let summary = oracle_check_with(&oc, fixed.as_ref(), engine)?;
    println!(
        "instances {}  marginal {:.3e}  pairwise {:.3e}  log-likelihood {:.3e}  consistency {:.3e}",
        summary.instances,
        summary.max_marginal_dev,
        summary.max_pairwise_dev,
        summary.max_log_likelihood_dev,
        summary.max_consistency_dev
    );
    if summary.passes(oc.tolerance) {
        println!("oracle check passed (tolerance {:e})", oc.tolerance);
        Ok(Status::Success)
    } else {
        println!("oracle check FAILED (tolerance {:e})", oc.tolerance);
        Ok(Status::DomainFailure)
    }
}
