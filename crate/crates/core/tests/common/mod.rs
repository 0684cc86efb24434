#![allow(dead_code)]

use hmtkt::concept_tree::{ConceptTree, Difficulty, NodeRecord, TreeDocument};
use hmtkt::em::Parallelism;
use hmtkt::model::Params;
use hmtkt::records::InteractionRecord;
use hmtkt::simulate::{generate_classroom, random_params, random_question_bank, random_tree, SimConfig, UNIFORM_MIX};
use hmtkt::ObservationSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root with one child per entry.
pub fn star(root: &str, children: &[&str]) -> TreeDocument {
    let mut nodes = vec![NodeRecord {
        id: root.to_string(),
        label: root.to_string(),
        parent: None,
    }];
    nodes.extend(children.iter().map(|c| NodeRecord {
        id: c.to_string(),
        label: c.to_string(),
        parent: Some(root.to_string()),
    }));
    TreeDocument { nodes }
}

pub fn wine() -> TreeDocument {
    star(
        "Wine Knowledge",
        &["Wine", "Wine Evaluation Knowledge", "Wine Aroma Type", "Types of Wine"],
    )
}

pub fn circuit() -> TreeDocument {
    star(
        "Circuit Design",
        &[
            "Amplifier Circuit Design",
            "Ideal Operational Amplifier",
            "Electronics",
            "Electrical Concepts",
            "Electrical Circuit Knowledge",
            "Circuit Design and Analysis",
            "Operational Amplifier Knowledge",
            "Integrated Operational Amplifier Circuit",
        ],
    )
}

pub fn education() -> TreeDocument {
    star(
        "Education Theory",
        &[
            "Feedback",
            "Class Teacher Management and Teacher-Student Relationship",
            "Foundation of Class Formation",
        ],
    )
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tree, random parameters, uniform bank with `per_leaf` questions, and a classroom.
pub struct World {
    pub tree: ConceptTree,
    pub theta: Params<f64>,
    pub stream: Vec<InteractionRecord>,
}

pub fn world(nodes: usize, students: usize, interactions: usize, targeting: bool, seed: u64) -> World {
    let mut r = rng(seed);
    let tree = random_tree(nodes, &mut r);
    let theta: Params<f64> = random_params(&tree, &mut r);
    let bank = random_question_bank(&tree, 5, UNIFORM_MIX, &mut r).unwrap();
    let cfg = SimConfig {
        n_students: students,
        interactions_per_student: interactions,
        ability_targeting: targeting,
        seed,
        ..SimConfig::default()
    };
    let (stream, _) = generate_classroom(&tree, &theta, &bank, &cfg, &Parallelism::Serial).unwrap();
    World { tree, theta, stream }
}

pub fn per_student(tree: &ConceptTree, stream: &[InteractionRecord]) -> Vec<ObservationSet> {
    hmtkt::online::group_by_student(tree, stream).unwrap().1
}

pub fn obs_from(tree: &ConceptTree, items: &[(usize, Difficulty, bool)]) -> ObservationSet {
    let mut o = ObservationSet::new(tree);
    for (j, &(n, d, c)) in items.iter().enumerate() {
        o.push_node(n, format!("q{j}"), d, c).unwrap();
    }
    o
}
