//! Split complexity and weakest-link pruning.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;
use crate::tree::{Tree, TreeDocument};

/// Penalty per internal node: the 95th percentile of a chi-square with one degree of freedom.
pub const DEFAULT_LAMBDA: f64 = 3.84;

/// `Σ G_i - λ |I|` over the internal nodes of `tree`.
pub fn split_complexity(tree: &Tree, lambda: f64, g_values: &BTreeMap<usize, f64>) -> f64 {
    let internal = tree.internal_ids();
    let total: f64 = internal.iter().map(|id| g_values[id]).sum();
    total - lambda * internal.len() as f64
}

/// Split statistics stored on the internal nodes of `tree`.
pub fn stored_statistics(tree: &Tree) -> BTreeMap<usize, f64> {
    tree.nodes.values().filter_map(|n| n.split.as_ref().map(|s| (n.id, s.statistic))).collect()
}

/// `g(h)`: mean statistic over the internal nodes of the branch rooted at `h`.
pub fn branch_mean(tree: &Tree, h: usize) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for id in tree.subtree(h) {
        if let Some(s) = &tree.node(id).split {
            sum += s.statistic;
            count += 1;
        }
    }
    sum / count as f64
}

#[derive(Debug, Clone)]
pub struct PruneSequence {
    /// From the input tree down to the root-only tree.
    pub trees: Vec<Tree>,
    /// Node whose branch was removed at each step.
    pub pruned: Vec<usize>,
}

impl PruneSequence {
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc {
            pruned: Vec<usize>,
            trees: Vec<TreeDocument>,
        }
        let doc = Doc { pruned: self.pruned.clone(), trees: self.trees.iter().map(Tree::to_document).collect() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Repeatedly removes the branch with the smallest `g(h)` (smaller id on ties).
pub fn weakest_link_sequence(tree: &Tree) -> PruneSequence {
    let mut trees = vec![tree.clone()];
    let mut pruned = Vec::new();
    let mut current = tree.clone();
    while !current.is_root_only() {
        let mut best: Option<(usize, f64)> = None;
        for h in current.internal_ids() {
            let g = branch_mean(&current, h);
            if best.is_none_or(|(_, b)| g < b) {
                best = Some((h, g));
            }
        }
        let (h, _) = best.expect("an internal node exists");
        current = current.pruned_at(h);
        pruned.push(h);
        trees.push(current.clone());
    }
    PruneSequence { trees, pruned }
}
