use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::TreeError;

/// Dense index of a node inside a [`ConceptTree`]. Indices follow the order
/// in which nodes appear in the source document.
pub type NodeIdx = usize;

/// One entry of the flat node list in a tree file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    #[serde(default)]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

/// On-disk representation of a concept tree: `{ "nodes": [ {id, label, parent} ] }`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TreeDocument {
    pub nodes: Vec<NodeRecord>,
}

impl TreeDocument {
    pub fn from_json(source: &str) -> Result<Self, TreeError> {
        serde_json::from_str(source).map_err(|e| TreeError::Malformed(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("tree document serializes");
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptNode {
    pub id: String,
    pub label: String,
    pub parent: Option<NodeIdx>,
    pub children: Vec<NodeIdx>,
}

/// A single structural problem found by [`validate_document`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Empty,
    DuplicateId { id: String },
    MultipleParents { id: String, parents: Vec<String> },
    DanglingParent { id: String, parent: String },
    NoRoot,
    NotConnected { roots: Vec<String> },
    Cycle { nodes: Vec<String> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "tree has no nodes"),
            Violation::DuplicateId { id } => write!(f, "duplicate node id `{id}`"),
            Violation::MultipleParents { id, parents } => {
                write!(f, "node `{id}` has multiple parents: {}", parents.join(", "))
            }
            Violation::DanglingParent { id, parent } => {
                write!(f, "node `{id}` references unknown parent `{parent}`")
            }
            Violation::NoRoot => write!(f, "no root node (every node has a parent)"),
            Violation::NotConnected { roots } => {
                write!(f, "not connected: {} roots ({})", roots.len(), roots.join(", "))
            }
            Violation::Cycle { nodes } => write!(f, "cycle through {}", nodes.join(" -> ")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_cycle(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::Cycle { .. }))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "- {v}")?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of a rooted tree on a raw node list.
/// Problems are collected, never thrown.
pub fn validate_document(doc: &TreeDocument) -> ValidationReport {
    let mut violations = Vec::new();
    if doc.nodes.is_empty() {
        violations.push(Violation::Empty);
        return ValidationReport { violations };
    }

    // id -> distinct parents, in first-seen order
    let mut parents: HashMap<&str, Vec<Option<&str>>> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for rec in &doc.nodes {
        let entry = parents.entry(rec.id.as_str()).or_insert_with(|| {
            order.push(rec.id.as_str());
            Vec::new()
        });
        let p = rec.parent.as_deref();
        if entry.contains(&p) {
            violations.push(Violation::DuplicateId { id: rec.id.clone() });
        } else {
            entry.push(p);
        }
    }
    for id in &order {
        let ps = &parents[id];
        if ps.len() > 1 {
            violations.push(Violation::MultipleParents {
                id: id.to_string(),
                parents: ps
                    .iter()
                    .map(|p| p.unwrap_or("<none>").to_string())
                    .collect(),
            });
        }
        for p in ps.iter().flatten() {
            if !parents.contains_key(p) {
                violations.push(Violation::DanglingParent {
                    id: id.to_string(),
                    parent: p.to_string(),
                });
            }
        }
    }

    let roots: Vec<&str> = order
        .iter()
        .copied()
        .filter(|id| parents[id].contains(&None))
        .collect();
    if roots.is_empty() {
        violations.push(Violation::NoRoot);
    } else if roots.len() > 1 {
        violations.push(Violation::NotConnected {
            roots: roots.iter().map(|s| s.to_string()).collect(),
        });
    }

    // Cycle detection along first-parent chains.
    let first_parent = |id: &str| -> Option<&str> {
        parents
            .get(id)
            .and_then(|ps| ps.first().copied().flatten())
            .filter(|p| parents.contains_key(p))
    };
    let mut state: HashMap<&str, u8> = HashMap::new(); // 1 = on stack, 2 = done
    let mut reported: HashSet<&str> = HashSet::new();
    for &start in &order {
        if state.contains_key(start) {
            continue;
        }
        let mut path = Vec::new();
        let mut cur = Some(start);
        while let Some(id) = cur {
            match state.get(id) {
                Some(2) => break,
                Some(_) => {
                    let pos = path.iter().position(|x| *x == id).unwrap_or(0);
                    let cycle: Vec<&str> = path[pos..].to_vec();
                    if cycle.iter().all(|n| reported.insert(n)) {
                        let mut nodes: Vec<String> = cycle.iter().map(|s| s.to_string()).collect();
                        nodes.push(id.to_string());
                        violations.push(Violation::Cycle { nodes });
                    }
                    break;
                }
                None => {
                    state.insert(id, 1);
                    path.push(id);
                    cur = first_parent(id);
                }
            }
        }
        for id in path {
            state.insert(id, 2);
        }
    }

    ValidationReport { violations }
}

/// A validated, immutable knowledge concept tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptTree {
    nodes: Vec<ConceptNode>,
    index: HashMap<String, NodeIdx>,
    root: NodeIdx,
    downward: Vec<NodeIdx>,
    depth: Vec<usize>,
}

/// Size summary of a tree. Depth counts levels, so a lone root has depth 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TreeStats {
    pub nodes: usize,
    pub max_depth: usize,
    pub leaves: usize,
}

impl ConceptTree {
    pub fn from_document(doc: &TreeDocument) -> Result<Self, TreeError> {
        let report = validate_document(doc);
        if !report.is_valid() {
            return Err(TreeError::Invalid(report));
        }
        let index: HashMap<String, NodeIdx> = doc
            .nodes
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        let mut nodes: Vec<ConceptNode> = doc
            .nodes
            .iter()
            .map(|r| ConceptNode {
                id: r.id.clone(),
                label: r.label.clone(),
                parent: r.parent.as_ref().map(|p| index[p]),
                children: Vec::new(),
            })
            .collect();
        let mut root = 0;
        for i in 0..nodes.len() {
            match nodes[i].parent {
                Some(p) => nodes[p].children.push(i),
                None => root = i,
            }
        }

        // Pre-order walk honouring child order from the document.
        let mut downward = Vec::with_capacity(nodes.len());
        let mut depth = vec![0; nodes.len()];
        let mut stack = vec![root];
        depth[root] = 1;
        while let Some(n) = stack.pop() {
            downward.push(n);
            for &c in nodes[n].children.iter().rev() {
                depth[c] = depth[n] + 1;
                stack.push(c);
            }
        }
        debug_assert_eq!(downward.len(), nodes.len());

        Ok(Self {
            nodes,
            index,
            root,
            downward,
            depth,
        })
    }

    /// Builds a tree from `(id, parent)` pairs; labels default to the id.
    pub fn from_parents<S: AsRef<str>>(pairs: &[(S, Option<S>)]) -> Result<Self, TreeError> {
        let doc = TreeDocument {
            nodes: pairs
                .iter()
                .map(|(id, p)| NodeRecord {
                    id: id.as_ref().to_string(),
                    label: id.as_ref().to_string(),
                    parent: p.as_ref().map(|p| p.as_ref().to_string()),
                })
                .collect(),
        };
        Self::from_document(&doc)
    }

    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id.clone(),
                    label: n.label.clone(),
                    parent: n.parent.map(|p| self.nodes[p].id.clone()),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        self.to_document().to_json()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeIdx {
        self.root
    }

    pub fn node(&self, idx: NodeIdx) -> &ConceptNode {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn id(&self, idx: NodeIdx) -> &str {
        &self.nodes[idx].id
    }

    pub fn index_of(&self, id: &str) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn parent(&self, idx: NodeIdx) -> Option<NodeIdx> {
        self.nodes[idx].parent
    }

    pub fn children(&self, idx: NodeIdx) -> &[NodeIdx] {
        &self.nodes[idx].children
    }

    pub fn is_leaf(&self, idx: NodeIdx) -> bool {
        self.nodes[idx].children.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeIdx> + '_ {
        (0..self.nodes.len()).filter(move |&i| self.is_leaf(i))
    }

    /// 1 for the root.
    pub fn depth(&self, idx: NodeIdx) -> usize {
        self.depth[idx]
    }

    /// Root first; every node appears after its parent.
    pub fn downward_order(&self) -> &[NodeIdx] {
        &self.downward
    }

    /// Every node appears after all of its children; the root is last.
    pub fn upward_order(&self) -> impl Iterator<Item = NodeIdx> + '_ {
        self.downward.iter().rev().copied()
    }

    pub fn traversal_orders(&self) -> (Vec<NodeIdx>, Vec<NodeIdx>) {
        (self.upward_order().collect(), self.downward.clone())
    }

    /// Number of parent-child links.
    pub fn edge_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.parent.is_some()).count()
    }

    /// All nodes in the subtree rooted at `idx`, including `idx`.
    pub fn subtree(&self, idx: NodeIdx) -> Vec<NodeIdx> {
        let mut out = Vec::new();
        let mut stack = vec![idx];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[n].children.iter().rev().copied());
        }
        out
    }

    pub fn stats(&self) -> TreeStats {
        TreeStats {
            nodes: self.nodes.len(),
            max_depth: self.depth.iter().copied().max().unwrap_or(0),
            leaves: self.leaves().count(),
        }
    }
}

/// Parses a tree file and rejects any structural violation.
pub fn parse_tree(source: &str) -> Result<ConceptTree, TreeError> {
    ConceptTree::from_document(&TreeDocument::from_json(source)?)
}

/// Re-checks the tree invariants on an already-built tree.
pub fn validate_tree(tree: &ConceptTree) -> ValidationReport {
    let mut report = validate_document(&tree.to_document());
    if tree.edge_count() + 1 != tree.len() {
        report.violations.push(Violation::NotConnected {
            roots: vec![tree.id(tree.root()).to_string()],
        });
    }
    report
}
