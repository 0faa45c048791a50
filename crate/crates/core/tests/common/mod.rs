#![allow(dead_code)]

use std::collections::BTreeMap;

use cit::data::{Column, ColumnSpec, Dataset, Schema};
use cit::estimators::{EstimatorConfig, EstimatorKind, ModelSpecs, NodeEffect, NuisanceScope};
use cit::glm::DesignSpec;
use cit::tree::{GrowConfig, GrowDiagnostics, NodeSplit, SplitForm, SplitRule, Tree, TreeNode};

pub fn spec(text: &str) -> DesignSpec {
    DesignSpec::parse(text, "A").unwrap()
}

/// Continuous covariates named x1, x2, ... with treatment `A` and outcome `y`.
pub fn continuous(cols: Vec<Vec<f64>>, a: Vec<u8>, y: Vec<f64>) -> Dataset {
    let schema = Schema::new(
        (1..=cols.len()).map(|j| ColumnSpec::continuous(&format!("x{j}"))).collect(),
        "A",
        "y",
    )
    .unwrap();
    Dataset::new(schema, cols.into_iter().map(Column::Numeric).collect(), a, y).unwrap()
}

pub fn effect(value: f64) -> NodeEffect {
    NodeEffect { mu1: value, mu0: 0.0, effect: value, influence: Vec::new(), kind: EstimatorKind::GFormula, degenerate: false }
}

pub fn g_config() -> GrowConfig {
    GrowConfig::new(EstimatorConfig::new(
        EstimatorKind::GFormula,
        NuisanceScope::Parent,
        ModelSpecs { propensity: None, outcome: Some(spec("A + x1")) },
    ))
}

/// Tree from `(id, statistic, left, right)` splits; every other id reachable
/// from `root` is terminal. Split rules are placeholders on `x1`.
pub fn tree_with(root: usize, splits: &[(usize, f64, usize, usize)]) -> Tree {
    let by_id: BTreeMap<usize, (f64, usize, usize)> = splits.iter().map(|&(id, g, l, r)| (id, (g, l, r))).collect();
    let mut nodes = BTreeMap::new();
    let mut stack = vec![(root, 0usize)];
    while let Some((id, depth)) = stack.pop() {
        let split = by_id.get(&id).map(|&(statistic, left, right)| {
            stack.push((left, depth + 1));
            stack.push((right, depth + 1));
            NodeSplit { rule: SplitRule { covariate: 0, form: SplitForm::Threshold { value: id as f64 } }, statistic, left, right }
        });
        nodes.insert(id, TreeNode { id, depth, n: 100, effect: effect(id as f64), split, rows: Vec::new(), models: None });
    }
    let schema = Schema::new(vec![ColumnSpec::continuous("x1")], "A", "y").unwrap();
    Tree { nodes, root, config: g_config(), schema, diagnostics: GrowDiagnostics::default() }
}

/// Small deterministic generator for test fixtures.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 11
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() as f64) / ((1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| m[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / m[c][c];
    }
    x
}

pub fn invert(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| solve(m.to_vec(), (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()))
        .collect();
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
