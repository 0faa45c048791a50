mod common;

use std::collections::{BTreeMap, BTreeSet};

use cit::data::{Dataset, SubgroupMask};
use cit::estimators::split_contrast;
use cit::prune::*;
use cit::select::*;
use cit::simulate::{generate_with, run_experiment, schema_for, AlgoConfig, RunOptions, SimDesign};
use cit::tree::{grow_max_tree, SplitForm, Tree};
use common::{tree_with, Lcg};
use proptest::prelude::*;

#[test]
fn split_complexity_examples() {
    let root_only = tree_with(0, &[]);
    assert_eq!(split_complexity(&root_only, 3.84, &BTreeMap::new()), 0.0);

    let two = tree_with(0, &[(0, 5.0, 1, 2), (1, 4.0, 3, 4)]);
    let g = stored_statistics(&two);
    assert!((split_complexity(&two, 3.84, &g) - 1.32).abs() < 1e-12);

    let one = tree_with(0, &[(0, 3.84, 1, 2)]);
    assert_eq!(split_complexity(&one, DEFAULT_LAMBDA, &stored_statistics(&one)), 0.0);
}

#[test]
fn three_node_pruning_order() {
    // Root 0 with children 1 (G = 2) and 2 (G = 8).
    let tree = tree_with(0, &[(0, 10.0, 1, 2), (1, 2.0, 3, 4), (2, 8.0, 5, 6)]);
    assert!((branch_mean(&tree, 0) - 20.0 / 3.0).abs() < 1e-12);
    let seq = weakest_link_sequence(&tree);
    assert_eq!(seq.pruned, vec![1, 2, 0]);
    assert_eq!(seq.trees.len(), 4);
    assert_eq!(seq.trees.iter().map(Tree::internal_count).collect::<Vec<_>>(), vec![3, 2, 1, 0]);
    let pruned = seq.trees.last().unwrap();
    assert_eq!(pruned.node(0).effect.effect, 0.0);
    assert_eq!(seq.trees[1].node(1).effect.effect, 1.0, "pruned node keeps its estimate");
}

#[test]
fn trivial_sequences() {
    let seq = weakest_link_sequence(&tree_with(0, &[]));
    assert_eq!(seq.trees.len(), 1);
    assert!(seq.pruned.is_empty());
    let seq = weakest_link_sequence(&tree_with(0, &[(0, 1.0, 1, 2)]));
    assert_eq!(seq.pruned, vec![0]);
    assert_eq!(seq.trees.len(), 2);
}

#[test]
fn equal_branch_means_prune_smaller_id() {
    let tree = tree_with(0, &[(0, 9.0, 2, 1), (2, 3.0, 3, 4), (1, 3.0, 5, 6)]);
    assert_eq!(weakest_link_sequence(&tree).pruned, vec![1, 2, 0]);
}

/// Random tree with `k` internal nodes; ids follow creation order so they
/// are unrelated to depth or position.
fn random_tree(g: &mut Lcg, k: usize) -> Tree {
    let mut terminals = vec![0usize];
    let mut next = 1;
    let mut splits = Vec::new();
    for _ in 0..k {
        let at = terminals.swap_remove(g.below(terminals.len()));
        let (l, r) = (next, next + 1);
        next += 2;
        terminals.push(l);
        terminals.push(r);
        let stat = if g.uniform() < 0.5 { g.below(6) as f64 } else { 10.0 * g.uniform() };
        splits.push((at, stat, l, r));
    }
    tree_with(0, &splits)
}

/// Weakest-link pruning from first principles: children map, branch sums by
/// explicit descent, full scan over every internal node at each step.
fn brute_force(tree: &Tree) -> (Vec<usize>, Vec<BTreeSet<usize>>) {
    let mut children: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut stat: BTreeMap<usize, f64> = BTreeMap::new();
    for n in tree.nodes.values() {
        if let Some(s) = &n.split {
            children.insert(n.id, (s.left, s.right));
            stat.insert(n.id, s.statistic);
        }
    }
    fn descend(id: usize, ch: &BTreeMap<usize, (usize, usize)>, stat: &BTreeMap<usize, f64>) -> (f64, usize) {
        match ch.get(&id) {
            None => (0.0, 0),
            Some(&(l, r)) => {
                let (sl, cl) = descend(l, ch, stat);
                let (sr, cr) = descend(r, ch, stat);
                (stat[&id] + sl + sr, 1 + cl + cr)
            }
        }
    }
    let mut order = Vec::new();
    let mut states = vec![children.keys().copied().collect::<BTreeSet<_>>()];
    while !children.is_empty() {
        let mut best = (usize::MAX, f64::INFINITY);
        for &h in children.keys() {
            let (s, c) = descend(h, &children, &stat);
            let g = s / c as f64;
            if g < best.1 || (g == best.1 && h < best.0) {
                best = (h, g);
            }
        }
        let h = best.0;
        let mut stack = vec![h];
        while let Some(id) = stack.pop() {
            if let Some((l, r)) = children.remove(&id) {
                stack.push(l);
                stack.push(r);
            }
        }
        order.push(h);
        states.push(children.keys().copied().collect());
    }
    (order, states)
}

#[test]
fn weakest_link_matches_brute_force() {
    let mut g = Lcg(2024);
    for _ in 0..100 {
        let k = g.below(6);
        let tree = random_tree(&mut g, k);
        let seq = weakest_link_sequence(&tree);
        let (order, states) = brute_force(&tree);
        assert_eq!(seq.pruned, order);
        let got: Vec<BTreeSet<usize>> = seq.trees.iter().map(|t| t.internal_ids().into_iter().collect()).collect();
        assert_eq!(got, states);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sequence_invariants(seed in any::<u64>(), k in 0usize..8) {
        let mut g = Lcg(seed);
        let tree = random_tree(&mut g, k);
        let seq = weakest_link_sequence(&tree);
        prop_assert_eq!(seq.trees.len(), seq.pruned.len() + 1);
        prop_assert!(seq.trees.len() <= k + 1);
        prop_assert_eq!(seq.trees[0].to_json().unwrap(), tree.to_json().unwrap());
        prop_assert!(seq.trees.last().unwrap().is_root_only());
        for w in seq.trees.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            prop_assert!(b.internal_count() < a.internal_count());
            prop_assert!(b.nodes.keys().all(|id| a.nodes.contains_key(id)));
        }
        for (m, t) in seq.trees.iter().enumerate() {
            prop_assert_eq!(&weakest_link_sequence(t).pruned, &seq.pruned[m..].to_vec());
        }
    }
}

fn score(index: usize, internal_nodes: usize, complexity: f64) -> CandidateScore {
    CandidateScore { index, internal_nodes, complexity }
}

#[test]
fn argmax_prefers_smaller_tree_on_ties() {
    let s = vec![score(0, 3, 2.0), score(1, 2, 2.0), score(2, 1, 1.0), score(3, 0, 0.0)];
    assert_eq!(argmax_smallest(&s), 1);
    let s = vec![score(0, 2, -1.0), score(1, 1, -0.5), score(2, 0, 0.0)];
    assert_eq!(argmax_smallest(&s), 2);
    assert_eq!(argmax_smallest(&[score(0, 4, -3.0)]), 0);
}

fn heterog(n: usize, seed: u64) -> Dataset {
    generate_with(SimDesign::HeterogeneousContinuous, n, &mut cit::rng::stream(seed, "select-test", 0))
}

fn config(text: &str) -> cit::tree::GrowConfig {
    AlgoConfig::parse(text).unwrap().grow_config(SimDesign::HeterogeneousContinuous, 0).unwrap()
}

/// Complexity recomputed by walking validation rows down each split and
/// scoring the two child masks directly.
fn oracle_complexity(tree: &Tree, validation: &Dataset, lambda: f64, cfg: &cit::estimators::EstimatorConfig) -> f64 {
    let n = validation.n();
    let mut total = 0.0;
    for id in tree.internal_ids() {
        let reach: Vec<bool> = (0..n)
            .map(|i| {
                let mut at = tree.root;
                loop {
                    if at == id {
                        return true;
                    }
                    let Some(s) = &tree.node(at).split else { return false };
                    at = if s.rule.goes_left(validation.cell(i, s.rule.covariate)).unwrap() { s.left } else { s.right };
                }
            })
            .collect();
        let s = tree.node(id).split.as_ref().unwrap();
        let left: Vec<bool> = (0..n).map(|i| reach[i] && s.rule.goes_left(validation.cell(i, s.rule.covariate)).unwrap()).collect();
        let right: Vec<bool> = (0..n).map(|i| reach[i] && !left[i]).collect();
        let g = split_contrast(validation, &SubgroupMask::from_bits(left), &SubgroupMask::from_bits(right), cfg)
            .map(|c| c.statistic)
            .unwrap_or(0.0);
        total += g - lambda;
    }
    total
}

#[test]
fn validation_complexity_matches_oracle() {
    let train = heterog(800, 11);
    let validation = heterog(400, 12);
    for algo in ["g,out=mis-func", "dr", "ipw"] {
        let cfg = config(algo);
        let tree = grow_max_tree(&train, &SubgroupMask::full(800), &cfg).unwrap();
        let seq = weakest_link_sequence(&tree);
        assert!(seq.trees.len() >= 3, "{algo}");
        let mut want = Vec::new();
        for cand in seq.trees.iter().take(3) {
            let got = validation_complexity(cand, &validation, 3.84, &cfg.estimator, SelectOptions::default()).unwrap();
            let oracle = oracle_complexity(cand, &validation, 3.84, &cfg.estimator);
            assert!((got - oracle).abs() < 1e-8 * (1.0 + oracle.abs()), "{algo}: {got} vs {oracle}");
            want.push(oracle);
        }
        let root_only = seq.trees.last().unwrap();
        assert_eq!(validation_complexity(root_only, &validation, 3.84, &cfg.estimator, SelectOptions::default()).unwrap(), 0.0);

        let (chosen, trace) = select_final(&seq, &validation, 3.84, &cfg.estimator, SelectOptions::default()).unwrap();
        assert_eq!(trace.candidates.len(), seq.trees.len());
        for (c, w) in trace.candidates.iter().zip(&want) {
            assert!((c.complexity - w).abs() < 1e-8 * (1.0 + w.abs()));
        }
        let best = trace.candidates.iter().map(|c| c.complexity).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(trace.candidates[trace.chosen].complexity, best);
        assert_eq!(chosen.to_json().unwrap(), seq.trees[trace.chosen].to_json().unwrap());
    }
}

#[test]
fn unsupported_validation_split_counts_as_zero() {
    let train = heterog(800, 13);
    let mut cfg = config("g");
    cfg.max_depth = 1;
    let tree = grow_max_tree(&train, &SubgroupMask::full(800), &cfg).unwrap();
    let s = tree.node(tree.root).split.as_ref().unwrap();
    // Validation rows that all fall on one side of the root split.
    let rows: Vec<usize> = (0..800).filter(|&i| s.rule.goes_left(train.cell(i, s.rule.covariate)) == Some(true)).collect();
    let validation = train.take_rows(&rows);
    let c = validation_complexity(&tree, &validation, 3.84, &cfg.estimator, SelectOptions::default()).unwrap();
    assert_eq!(c, -3.84);
}

#[test]
fn single_candidate_is_selected() {
    let tree = tree_with(0, &[]);
    let seq = weakest_link_sequence(&tree);
    let validation = heterog(100, 14);
    let (chosen, trace) = select_final(&seq, &validation, 3.84, &tree.config.estimator, SelectOptions::default()).unwrap();
    assert!(chosen.is_root_only());
    assert_eq!(trace.chosen, 0);
}

#[test]
fn homogeneous_g_selects_root_only() {
    let algo = AlgoConfig::parse("g").unwrap();
    let s = run_experiment(SimDesign::HomogeneousContinuous, &algo, 200, 1000, 7, RunOptions::default()).unwrap();
    assert!(s.correct_tree_prop >= 0.95, "{}", s.correct_tree_prop);
}

/// Tree with the single split x4 < 0 for the heterogeneous design.
fn fixed_x4_tree(algo: &str) -> Tree {
    let mut tree = tree_with(0, &[(0, 1.0, 1, 2)]);
    tree.schema = schema_for(SimDesign::HeterogeneousContinuous);
    tree.config = config(algo);
    let split = tree.nodes.get_mut(&0).unwrap().split.as_mut().unwrap();
    split.rule.covariate = 3;
    split.rule.form = SplitForm::Threshold { value: 0.0 };
    tree
}

#[test]
fn bootstrap_degenerate_and_defaults() {
    assert_eq!(DEFAULT_BOOTSTRAP, 1000);
    let tree = fixed_x4_tree("g");
    let data = heterog(500, 15);
    let r = bootstrap_effects(&tree, &data, 1, 0.95, 3).unwrap();
    assert_eq!(r.replicates, 1);
    for t in &r.terminals {
        assert_eq!(t.lower, t.upper);
    }
    assert!(bootstrap_effects(&tree, &data, 0, 0.95, 3).is_err());
    assert!(bootstrap_effects(&tree, &data, 10, 1.0, 3).is_err());
    let a = bootstrap_effects(&tree, &data, 60, 0.9, 4).unwrap();
    let b = bootstrap_effects(&tree, &data, 60, 0.9, 4).unwrap();
    assert_eq!(a, b);
    for t in &a.terminals {
        assert!(t.lower <= t.point && t.point <= t.upper);
    }
}

#[test]
fn bootstrap_intervals_cover_true_effects() {
    let tree = fixed_x4_tree("g");
    let reps = 200;
    let mut covered = 0;
    let mut total = 0;
    for rep in 0..reps {
        let data = heterog(2000, 1000 + rep);
        let r = bootstrap_effects(&tree, &data, 400, 0.95, rep).unwrap();
        for (t, truth) in r.terminals.iter().zip([2.0, 5.0]) {
            total += 1;
            covered += (t.lower <= truth && truth <= t.upper) as usize;
        }
    }
    let rate = covered as f64 / total as f64;
    assert!((0.90..=0.99).contains(&rate), "coverage {rate}");
}
