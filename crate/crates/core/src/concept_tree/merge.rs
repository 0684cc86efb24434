use std::collections::HashMap;

use indexmap::IndexMap;

use super::tree::{ConceptTree, NodeRecord, TreeDocument};

/// Result of [`merge_sparse_leaves`].
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub tree: ConceptTree,
    /// Question count per surviving node, in tree order.
    pub counts: IndexMap<String, usize>,
    /// Removed node id -> surviving node that now owns its questions.
    pub reassigned: HashMap<String, String>,
}

/// Folds sparse leaves into their parents until a fixpoint is reached.
///
/// At each parent, every leaf child with fewer than `min_count` questions is
/// removed and its questions move to the parent. If that leaves the parent with
/// a single child and that child is a leaf, the child is pruned as well. The
/// only leaf that may stay below `min_count` is a root with no children.
pub fn merge_sparse_leaves(
    tree: &ConceptTree,
    question_counts: &HashMap<String, usize>,
    min_count: usize,
) -> MergeOutcome {
    let n = tree.len();
    let mut count: Vec<usize> = (0..n)
        .map(|i| question_counts.get(tree.id(i)).copied().unwrap_or(0))
        .collect();
    let mut children: Vec<Vec<usize>> = (0..n).map(|i| tree.children(i).to_vec()).collect();
    let mut absorbed_by: Vec<Option<usize>> = vec![None; n];
    let post_order: Vec<usize> = tree.upward_order().collect();

    loop {
        let mut changed = false;
        for &p in &post_order {
            if absorbed_by[p].is_some() || children[p].is_empty() {
                continue;
            }
            let (sparse, keep): (Vec<usize>, Vec<usize>) = children[p]
                .iter()
                .partition(|&&c| children[c].is_empty() && count[c] < min_count);
            if sparse.is_empty() {
                continue;
            }
            for c in sparse {
                count[p] += count[c];
                absorbed_by[c] = Some(p);
            }
            children[p] = keep;
            if children[p].len() == 1 && children[children[p][0]].is_empty() {
                let only = children[p].pop().unwrap();
                count[p] += count[only];
                absorbed_by[only] = Some(p);
            }
            changed = true;
        }
        if !changed {
            break;
        }
    }

    let resolve = |mut i: usize| {
        while let Some(p) = absorbed_by[i] {
            i = p;
        }
        i
    };
    let mut reassigned = HashMap::new();
    let mut counts = IndexMap::new();
    let mut nodes = Vec::new();
    for i in 0..n {
        if absorbed_by[i].is_some() {
            reassigned.insert(tree.id(i).to_string(), tree.id(resolve(i)).to_string());
        } else {
            let node = tree.node(i);
            counts.insert(node.id.clone(), count[i]);
            nodes.push(NodeRecord {
                id: node.id.clone(),
                label: node.label.clone(),
                parent: node.parent.map(|p| tree.id(p).to_string()),
            });
        }
    }
    let tree = ConceptTree::from_document(&TreeDocument { nodes })
        .expect("removing leaves keeps a valid tree");
    MergeOutcome {
        tree,
        counts,
        reassigned,
    }
}
