mod common;

use cit::data::{Cell, Column, ColumnSpec, Dataset, Schema, SubgroupMask};
use cit::estimators::split_contrast;
use cit::simulate::{generate_with, AlgoConfig, SimDesign};
use cit::tree::*;
use common::{continuous, tree_with, Lcg};
use proptest::prelude::*;

fn thresholds(rules: &[SplitRule]) -> Vec<f64> {
    rules
        .iter()
        .map(|r| match r.form {
            SplitForm::Threshold { value } => value,
            _ => panic!("expected a threshold"),
        })
        .collect()
}

#[test]
fn continuous_candidates_are_midpoints() {
    let ds = continuous(vec![vec![4.0, 1.0, 2.0, 2.0, 4.0]], vec![0, 1, 0, 1, 0], vec![0.0; 5]);
    let rules = enumerate_splits(&ds, &SubgroupMask::full(5));
    assert_eq!(thresholds(&rules), vec![1.5, 3.0]);
}

#[test]
fn candidates_only_use_rows_in_mask() {
    let ds = continuous(vec![vec![4.0, 1.0, 2.0, 7.0]], vec![0, 1, 0, 1], vec![0.0; 4]);
    let rules = enumerate_splits(&ds, &SubgroupMask::from_indices(4, &[0, 3]));
    assert_eq!(thresholds(&rules), vec![5.5]);
    assert!(enumerate_splits(&ds, &SubgroupMask::from_indices(4, &[1])).is_empty());
}

fn level_data() -> Dataset {
    let schema = Schema::new(
        vec![ColumnSpec::categorical("c", &["a", "b", "c"]), ColumnSpec::ordinal("o", &["lo", "mid", "hi", "top"])],
        "A",
        "y",
    )
    .unwrap();
    let n = 8;
    Dataset::new(
        schema,
        vec![
            Column::Levels((0..n).map(|i| (i % 3) as u32).collect()),
            Column::Levels((0..n).map(|i| (i % 4) as u32).collect()),
        ],
        (0..n).map(|i| (i % 2) as u8).collect(),
        vec![0.0; n],
    )
    .unwrap()
}

#[test]
fn level_candidates() {
    let ds = level_data();
    let rules = enumerate_splits(&ds, &SubgroupMask::full(8));
    let cat: Vec<_> = rules.iter().filter(|r| r.covariate == 0).map(|r| r.form.clone()).collect();
    assert_eq!(
        cat,
        vec![
            SplitForm::Levels { left: vec![0], right: vec![1, 2] },
            SplitForm::Levels { left: vec![1], right: vec![0, 2] },
            SplitForm::Levels { left: vec![2], right: vec![0, 1] },
        ]
    );
    let ord: Vec<_> = rules.iter().filter(|r| r.covariate == 1).map(|r| r.form.clone()).collect();
    assert_eq!(ord, (1..4).map(|cut| SplitForm::Ordinal { cut }).collect::<Vec<_>>());
}

#[test]
fn partitions_count_and_cover() {
    for k in 2..=6u32 {
        let present: Vec<u32> = (0..k).collect();
        let parts = level_partitions(&present);
        assert_eq!(parts.len(), (1usize << (k - 1)) - 1);
        let mut seen = std::collections::BTreeSet::new();
        for (l, r) in &parts {
            let mut all: Vec<u32> = l.iter().chain(r).copied().collect();
            all.sort();
            assert_eq!(all, present);
            assert!(!l.is_empty() && !r.is_empty());
            let key = if l.contains(&0) { l.clone() } else { r.clone() };
            assert!(seen.insert(key), "duplicate partition");
        }
    }
}

fn heterog(n: usize, seed: u64) -> Dataset {
    generate_with(SimDesign::HeterogeneousContinuous, n, &mut cit::rng::stream(seed, "tree-test", 0))
}

fn config(text: &str) -> GrowConfig {
    AlgoConfig::parse(text).unwrap().grow_config(SimDesign::HeterogeneousContinuous, 0).unwrap()
}

#[test]
fn small_sample_stays_root_only() {
    let ds = heterog(20, 1);
    let mut cfg = config("g");
    cfg.min_node = 25;
    cfg.min_per_arm = 5;
    let tree = grow_max_tree(&ds, &SubgroupMask::full(20), &cfg).unwrap();
    assert!(tree.is_root_only());
    assert_eq!(tree.node(tree.root).n, 20);
}

#[test]
fn growth_is_deterministic() {
    let ds = heterog(600, 2);
    for algo in ["ipw", "g", "dr", "dr,scope=child", "ipw,scope=whole"] {
        let cfg = config(algo);
        let a = grow_max_tree(&ds, &SubgroupMask::full(600), &cfg).unwrap().to_json().unwrap();
        let b = grow_max_tree(&ds, &SubgroupMask::full(600), &cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b, "{algo}");
    }
}

#[test]
fn json_round_trip() {
    let ds = heterog(500, 3);
    let tree = grow_max_tree(&ds, &SubgroupMask::full(500), &config("dr")).unwrap();
    let text = tree.to_json().unwrap();
    let back = Tree::from_json(&text).unwrap();
    assert_eq!(back.to_json().unwrap(), text);
    assert_eq!(back.predict(&ds), tree.predict(&ds));
    assert_eq!(back.config, tree.config);
}

#[test]
fn hand_traced_routing() {
    // Node 0 sends x1 < 0 to node 1, node 2 sends x1 < 2 to node 3.
    let tree = tree_with(0, &[(0, 5.0, 1, 2), (2, 4.0, 3, 4)]);
    let xs = [-3.0, -0.1, 0.0, 0.5, 1.99, 2.0, 2.5, -7.0, 10.0, 1.0];
    let want = [1, 1, 3, 3, 3, 4, 4, 1, 4, 3];
    for (x, w) in xs.iter().zip(want) {
        assert_eq!(tree.route(|_| Cell::Num(*x)), w, "x = {x}");
        assert_eq!(tree.predict_row(&[Cell::Num(*x)]), w as f64);
    }
    let ds = continuous(vec![xs.to_vec()], vec![0; 10], vec![0.0; 10]);
    let routed = tree.route_all(&ds);
    assert_eq!(routed[&0].len(), 10);
    assert_eq!(routed[&2], vec![2, 3, 4, 5, 6, 8, 9]);
    assert_eq!(routed[&4], vec![5, 6, 8]);
}

#[test]
fn unseen_level_goes_to_larger_child() {
    let schema = Schema::new(vec![ColumnSpec::categorical("c", &["a", "b", "c", "d"])], "A", "y").unwrap();
    let mut tree = tree_with(0, &[(0, 5.0, 1, 2)]);
    tree.schema = schema;
    let split = tree.nodes.get_mut(&0).unwrap().split.as_mut().unwrap();
    split.rule.form = SplitForm::Levels { left: vec![0], right: vec![1, 2] };
    tree.nodes.get_mut(&1).unwrap().n = 10;
    tree.nodes.get_mut(&2).unwrap().n = 90;
    assert_eq!(tree.route(|_| Cell::Level(3)), 2);
    tree.nodes.get_mut(&1).unwrap().n = 90;
    assert_eq!(tree.route(|_| Cell::Level(3)), 1);
}

#[test]
fn root_split_is_exhaustive_argmax() {
    let ds = heterog(160, 4);
    let mut cfg = config("g");
    cfg.min_node = 20;
    cfg.min_per_arm = 5;
    cfg.max_depth = 1;
    let tree = grow_max_tree(&ds, &SubgroupMask::full(160), &cfg).unwrap();
    let mut best: Option<(SplitRule, f64)> = None;
    for rule in enumerate_splits(&ds, &SubgroupMask::full(160)) {
        let bits: Vec<bool> = (0..160).map(|i| rule.goes_left(ds.cell(i, rule.covariate)).unwrap()).collect();
        let ml = SubgroupMask::from_bits(bits);
        let mr = ml.complement();
        let ok = [&ml, &mr].iter().all(|m| {
            let t = m.indices().iter().filter(|&&i| ds.treatment()[i] == 1).count();
            m.size() >= 20 && t >= 5 && m.size() - t >= 5
        });
        if !ok {
            continue;
        }
        if let Ok(c) = split_contrast(&ds, &ml, &mr, &cfg.estimator) {
            if best.as_ref().is_none_or(|(_, b)| c.statistic > *b) {
                best = Some((rule, c.statistic));
            }
        }
    }
    let (rule, stat) = best.unwrap();
    let split = tree.node(tree.root).split.as_ref().expect("root splits");
    assert_eq!(split.rule, rule);
    assert!((split.statistic - stat).abs() < 1e-9 * (1.0 + stat));
}

#[test]
fn whole_scope_ipw_children_reconstruct_parent() {
    let ds = heterog(800, 5);
    let tree = grow_max_tree(&ds, &SubgroupMask::full(800), &config("ipw,scope=whole")).unwrap();
    assert!(!tree.is_root_only());
    for id in tree.internal_ids() {
        let p = tree.node(id);
        let s = p.split.as_ref().unwrap();
        let (l, r) = (tree.node(s.left), tree.node(s.right));
        let w = |n: &TreeNode| n.n as f64 / p.n as f64;
        assert!((w(l) * l.effect.mu1 + w(r) * r.effect.mu1 - p.effect.mu1).abs() < 1e-10);
        assert!((w(l) * l.effect.mu0 + w(r) * r.effect.mu0 - p.effect.mu0).abs() < 1e-10);
    }
}

#[test]
fn invalid_settings_are_rejected() {
    let ds = heterog(50, 6);
    let mut cfg = config("g");
    cfg.min_node = 10;
    cfg.min_per_arm = 6;
    assert!(grow_max_tree(&ds, &SubgroupMask::full(50), &cfg).is_err());
    let mut cfg = config("g");
    cfg.max_depth = 0;
    assert!(grow_max_tree(&ds, &SubgroupMask::full(50), &cfg).is_err());
    assert!(grow_max_tree(&ds, &SubgroupMask::empty(50), &config("g")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn growth_respects_constraints(
        seed in any::<u64>(),
        kind in prop::sample::select(vec!["ipw", "g", "dr"]),
        min_per_arm in 3usize..15,
        extra in 0usize..20,
        max_depth in 1usize..5,
    ) {
        let ds = heterog(400, seed);
        let mut cfg = config(kind);
        cfg.min_per_arm = min_per_arm;
        cfg.min_node = 2 * min_per_arm + extra;
        cfg.max_depth = max_depth;
        let tree = grow_max_tree(&ds, &SubgroupMask::full(400), &cfg).unwrap();
        prop_assert_eq!(tree.node(tree.root).rows.len(), 400);
        for node in tree.nodes.values() {
            prop_assert_eq!(node.n, node.rows.len());
            prop_assert!(node.depth <= max_depth);
            if node.id != tree.root {
                let t = node.rows.iter().filter(|&&i| ds.treatment()[i] == 1).count();
                prop_assert!(node.n >= cfg.min_node);
                prop_assert!(t >= min_per_arm && node.n - t >= min_per_arm);
            }
            if let Some(s) = &node.split {
                prop_assert!(s.statistic > 0.0);
                let (l, r) = (tree.node(s.left), tree.node(s.right));
                prop_assert_eq!(l.depth, node.depth + 1);
                let mut joined: Vec<usize> = l.rows.iter().chain(&r.rows).copied().collect();
                joined.sort();
                prop_assert_eq!(&joined, &node.rows);
                for &i in &l.rows {
                    prop_assert_eq!(s.rule.goes_left(ds.cell(i, s.rule.covariate)), Some(true));
                }
            }
        }
        // Terminal routing agrees with the stored training rows.
        for id in tree.terminal_ids() {
            for &i in &tree.node(id).rows {
                prop_assert_eq!(tree.terminal_of(&ds, i), id);
            }
        }
    }

    #[test]
    fn shuffled_rows_do_not_change_candidates(seed in any::<u64>()) {
        let mut g = Lcg(seed);
        let x: Vec<f64> = (0..30).map(|_| (g.below(12) as f64) / 4.0).collect();
        let ds = continuous(vec![x], vec![0; 30], vec![0.0; 30]);
        let rows: Vec<usize> = (0..30).collect();
        let mut shuffled = rows.clone();
        for i in (1..30).rev() {
            shuffled.swap(i, g.below(i + 1));
        }
        prop_assert_eq!(enumerate_splits_rows(&ds, &rows), enumerate_splits_rows(&ds, &shuffled));
    }
}
