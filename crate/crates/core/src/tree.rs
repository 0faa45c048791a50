//! Split enumeration and greedy growth of the maximum tree.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Cell, Column, CovariateKind, Dataset, Schema, SubgroupMask};
use crate::error::{CitError, Result};
use crate::estimators::{
    influence_contrast_sums, node_effect, EstimatorConfig, EstimatorKind, ModelSpecs, NodeEffect, NodeEvaluator, NuisanceModels,
    NuisanceScope, SideSums, VarianceMethod, WholeFit,
};
use crate::glm::DesignSpec;

pub const FORMAT: &str = "cit-tree/1";
pub const MAX_CATEGORICAL_LEVELS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SplitForm {
    /// Left is `x < value`.
    Threshold { value: f64 },
    /// Left holds the listed level indices; levels in neither list were not
    /// seen at this node in training.
    Levels { left: Vec<u32>, right: Vec<u32> },
    /// Left is `level index < cut`.
    Ordinal { cut: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRule {
    pub covariate: usize,
    pub form: SplitForm,
}

impl SplitRule {
    /// `Some(true)` for the left child, `None` when a level was never seen at this node.
    #[inline]
    pub fn goes_left(&self, cell: Cell) -> Option<bool> {
        match (&self.form, cell) {
            (SplitForm::Threshold { value }, Cell::Num(x)) => Some(x < *value),
            (SplitForm::Levels { left, right }, Cell::Level(l)) => {
                if left.contains(&l) {
                    Some(true)
                } else if right.contains(&l) {
                    Some(false)
                } else {
                    None
                }
            }
            (SplitForm::Ordinal { cut }, Cell::Level(l)) => Some(l < *cut),
            _ => None,
        }
    }

    pub fn describe(&self, schema: &Schema, left: bool) -> String {
        let col = &schema.columns[self.covariate];
        let name = &col.name;
        let label = |l: &u32| col.kind.levels().map_or_else(|| l.to_string(), |ls| ls[*l as usize].clone());
        match &self.form {
            SplitForm::Threshold { value } => format!("{name} {} {value}", if left { "<" } else { ">=" }),
            SplitForm::Levels { left: l, right: r } => {
                let set: Vec<String> = if left { l } else { r }.iter().map(label).collect();
                format!("{name} in {{{}}}", set.join(","))
            }
            SplitForm::Ordinal { cut } => format!("{name} {} {}", if left { "<" } else { ">=" }, label(cut)),
        }
    }
}

/// Candidate splits of the rows in `mask`, in the deterministic order used for tie-breaking.
pub fn enumerate_splits(data: &Dataset, mask: &SubgroupMask) -> Vec<SplitRule> {
    enumerate_splits_rows(data, &mask.indices())
}

pub fn enumerate_splits_rows(data: &Dataset, rows: &[usize]) -> Vec<SplitRule> {
    let mut out = Vec::new();
    if rows.len() < 2 {
        return out;
    }
    for (j, spec) in data.schema().columns.iter().enumerate() {
        match (data.column(j), &spec.kind) {
            (Column::Numeric(v), _) => {
                let mut vals: Vec<f64> = rows.iter().map(|&i| v[i]).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    let mut c = w[0] + (w[1] - w[0]) / 2.0;
                    if c <= w[0] {
                        c = w[1];
                    }
                    out.push(SplitRule { covariate: j, form: SplitForm::Threshold { value: c } });
                }
            }
            (Column::Levels(v), kind) => {
                let k = kind.levels().map_or(0, |l| l.len());
                let mut seen = vec![false; k];
                for &i in rows {
                    seen[v[i] as usize] = true;
                }
                let present: Vec<u32> = (0..k as u32).filter(|&l| seen[l as usize]).collect();
                match kind {
                    CovariateKind::Ordinal { .. } => {
                        for &cut in present.iter().skip(1) {
                            out.push(SplitRule { covariate: j, form: SplitForm::Ordinal { cut } });
                        }
                    }
                    _ => {
                        for (left, right) in level_partitions(&present) {
                            out.push(SplitRule { covariate: j, form: SplitForm::Levels { left, right } });
                        }
                    }
                }
            }
        }
    }
    out
}

/// The `2^(k-1) - 1` binary partitions of `present`. Each is keyed by its
/// smaller side (the side holding the first level when sizes tie) and the
/// list is ordered by that side's size, then lexicographically.
pub fn level_partitions(present: &[u32]) -> Vec<(Vec<u32>, Vec<u32>)> {
    let k = present.len();
    if k < 2 {
        return Vec::new();
    }
    let mut parts = Vec::new();
    for bits in 1u32..(1 << k) - 1 {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (t, &l) in present.iter().enumerate() {
            if bits >> t & 1 == 1 {
                a.push(l);
            } else {
                b.push(l);
            }
        }
        let keep = a.len() < b.len() || (a.len() == b.len() && a[0] == present[0]);
        if keep {
            parts.push((a, b));
        }
    }
    parts.sort_by(|x, y| x.0.len().cmp(&y.0.len()).then_with(|| x.0.cmp(&y.0)));
    parts
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowConfig {
    pub estimator: EstimatorConfig,
    /// Minimum number of rows in each child.
    pub min_node: usize,
    /// Minimum number of treated and of control rows in each child.
    pub min_per_arm: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl GrowConfig {
    pub fn new(estimator: EstimatorConfig) -> Self {
        GrowConfig { estimator, min_node: 30, min_per_arm: 10, max_depth: 10, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        if self.min_per_arm < 1 || self.min_node < 2 * self.min_per_arm {
            return Err(CitError::Config(format!(
                "need min_node >= 2 * min_per_arm >= 2 (got min_node {}, min_per_arm {})",
                self.min_node, self.min_per_arm
            )));
        }
        if self.max_depth < 1 {
            return Err(CitError::Config("max_depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSplit {
    pub rule: SplitRule,
    pub statistic: f64,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: usize,
    pub depth: usize,
    pub n: usize,
    pub effect: NodeEffect,
    pub split: Option<NodeSplit>,
    /// Training rows in this node (empty for trees read from JSON).
    pub rows: Vec<usize>,
    /// Models used for this node's effect; kept so selection can reuse them.
    pub models: Option<Arc<NuisanceModels>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GrowDiagnostics {
    pub evaluated: usize,
    pub inadmissible: usize,
}

#[derive(Debug, Clone)]
pub struct Tree {
    pub nodes: BTreeMap<usize, TreeNode>,
    pub root: usize,
    pub config: GrowConfig,
    pub schema: Schema,
    pub diagnostics: GrowDiagnostics,
}

impl Tree {
    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[&id]
    }

    pub fn internal_ids(&self) -> Vec<usize> {
        self.nodes.values().filter(|n| n.split.is_some()).map(|n| n.id).collect()
    }

    pub fn terminal_ids(&self) -> Vec<usize> {
        self.nodes.values().filter(|n| n.split.is_none()).map(|n| n.id).collect()
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.values().filter(|n| n.split.is_some()).count()
    }

    pub fn is_root_only(&self) -> bool {
        self.node(self.root).split.is_none()
    }

    /// Ids of the subtree rooted at `id`, in preorder.
    pub fn subtree(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(h) = stack.pop() {
            out.push(h);
            if let Some(s) = &self.node(h).split {
                stack.push(s.right);
                stack.push(s.left);
            }
        }
        out
    }

    /// Follows split rules from the root; unseen levels go to the larger child.
    pub fn route<F: Fn(usize) -> Cell>(&self, cell: F) -> usize {
        let mut id = self.root;
        while let Some(s) = &self.node(id).split {
            id = match s.rule.goes_left(cell(s.rule.covariate)) {
                Some(true) => s.left,
                Some(false) => s.right,
                None => {
                    log::debug!("unseen level at node {id}; routing to the larger child");
                    if self.node(s.left).n >= self.node(s.right).n {
                        s.left
                    } else {
                        s.right
                    }
                }
            };
        }
        id
    }

    pub fn terminal_of(&self, data: &Dataset, i: usize) -> usize {
        self.route(|j| data.cell(i, j))
    }

    pub fn predict_row(&self, row: &[Cell]) -> f64 {
        self.node(self.route(|j| row[j])).effect.effect
    }

    pub fn predict(&self, data: &Dataset) -> Vec<f64> {
        (0..data.n()).map(|i| self.node(self.terminal_of(data, i)).effect.effect).collect()
    }

    /// Rows of `data` reaching each node, keyed by node id.
    pub fn route_all(&self, data: &Dataset) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = self.nodes.keys().map(|&id| (id, Vec::new())).collect();
        for i in 0..data.n() {
            let mut id = self.root;
            loop {
                out.get_mut(&id).expect("node").push(i);
                let Some(s) = &self.node(id).split else { break };
                id = match s.rule.goes_left(data.cell(i, s.rule.covariate)) {
                    Some(true) => s.left,
                    Some(false) => s.right,
                    None if self.node(s.left).n >= self.node(s.right).n => s.left,
                    None => s.right,
                };
            }
        }
        out
    }

    /// Copy with every descendant of `id` removed; `id` keeps its effect.
    pub fn pruned_at(&self, id: usize) -> Tree {
        let mut t = self.clone();
        for h in self.subtree(id).into_iter().skip(1) {
            t.nodes.remove(&h);
        }
        t.nodes.get_mut(&id).expect("node").split = None;
        t
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.text_node(&mut s, self.root, "root".into());
        s
    }

    fn text_node(&self, s: &mut String, id: usize, label: String) {
        let node = self.node(id);
        let indent = "  ".repeat(node.depth);
        let tail = match &node.split {
            Some(sp) => format!("  G={:.4}", sp.statistic),
            None => "  *".into(),
        };
        let _ = writeln!(
            s,
            "{indent}[{id}] {label}  n={}  effect={:.4}  mu1={:.4}  mu0={:.4}{tail}",
            node.n, node.effect.effect, node.effect.mu1, node.effect.mu0
        );
        if let Some(sp) = &node.split {
            self.text_node(s, sp.left, sp.rule.describe(&self.schema, true));
            self.text_node(s, sp.right, sp.rule.describe(&self.schema, false));
        }
    }

    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            format: FORMAT.into(),
            schema: self.schema.clone(),
            config: ConfigDocument::from(&self.config),
            nodes: self
                .nodes
                .values()
                .map(|n| NodeDocument {
                    id: n.id,
                    depth: n.depth,
                    n: n.n,
                    mu1: n.effect.mu1,
                    mu0: n.effect.mu0,
                    effect: n.effect.effect,
                    split: n.split.as_ref().map(|s| SplitDocument {
                        covariate: self.schema.columns[s.rule.covariate].name.clone(),
                        rule: s.rule.form.clone(),
                        statistic: s.statistic,
                        left: s.left,
                        right: s.right,
                    }),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Tree> {
        let doc: TreeDocument = serde_json::from_str(text)?;
        Tree::from_document(doc)
    }

    pub fn from_document(doc: TreeDocument) -> Result<Tree> {
        if doc.format != FORMAT {
            return Err(CitError::Data(format!("unsupported tree format {:?}", doc.format)));
        }
        doc.schema.validate()?;
        let config = doc.config.to_config(&doc.schema)?;
        let kind = config.estimator.kind;
        let mut nodes = BTreeMap::new();
        for nd in doc.nodes {
            let split = match nd.split {
                Some(sd) => {
                    let covariate = doc
                        .schema
                        .column_index(&sd.covariate)
                        .ok_or_else(|| CitError::Data(format!("split on unknown covariate {:?}", sd.covariate)))?;
                    Some(NodeSplit { rule: SplitRule { covariate, form: sd.rule }, statistic: sd.statistic, left: sd.left, right: sd.right })
                }
                None => None,
            };
            let effect = NodeEffect { mu1: nd.mu1, mu0: nd.mu0, effect: nd.effect, influence: Vec::new(), kind, degenerate: false };
            nodes.insert(nd.id, TreeNode { id: nd.id, depth: nd.depth, n: nd.n, effect, split, rows: Vec::new(), models: None });
        }
        let root = *nodes.keys().next().ok_or_else(|| CitError::Data("tree has no nodes".into()))?;
        for node in nodes.values() {
            if let Some(s) = &node.split {
                if !nodes.contains_key(&s.left) || !nodes.contains_key(&s.right) {
                    return Err(CitError::Data(format!("node {} points at a missing child", node.id)));
                }
            }
        }
        Ok(Tree { nodes, root, config, schema: doc.schema, diagnostics: GrowDiagnostics::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub format: String,
    pub schema: Schema,
    pub config: ConfigDocument,
    pub nodes: Vec<NodeDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub id: usize,
    pub depth: usize,
    pub n: usize,
    pub mu1: f64,
    pub mu0: f64,
    pub effect: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDocument {
    pub covariate: String,
    pub rule: SplitForm,
    pub statistic: f64,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    pub estimator: EstimatorKind,
    pub scope: NuisanceScope,
    pub variance: VarianceMethod,
    pub propensity_spec: Option<String>,
    pub outcome_spec: Option<String>,
    pub epsilon: f64,
    pub min_node: usize,
    pub min_per_arm: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl From<&GrowConfig> for ConfigDocument {
    fn from(c: &GrowConfig) -> Self {
        ConfigDocument {
            estimator: c.estimator.kind,
            scope: c.estimator.scope,
            variance: c.estimator.variance,
            propensity_spec: c.estimator.specs.propensity.as_ref().map(|s| s.to_string()),
            outcome_spec: c.estimator.specs.outcome.as_ref().map(|s| s.to_string()),
            epsilon: c.estimator.epsilon,
            min_node: c.min_node,
            min_per_arm: c.min_per_arm,
            max_depth: c.max_depth,
            seed: c.seed,
        }
    }
}

impl ConfigDocument {
    pub fn to_config(&self, schema: &Schema) -> Result<GrowConfig> {
        let parse = |s: &Option<String>| -> Result<Option<DesignSpec>> {
            s.as_deref().map(|t| DesignSpec::parse(t, &schema.treatment)).transpose()
        };
        Ok(GrowConfig {
            estimator: EstimatorConfig {
                kind: self.estimator,
                scope: self.scope,
                variance: self.variance,
                specs: ModelSpecs { propensity: parse(&self.propensity_spec)?, outcome: parse(&self.outcome_spec)? },
                epsilon: self.epsilon,
            },
            min_node: self.min_node,
            min_per_arm: self.min_per_arm,
            max_depth: self.max_depth,
            seed: self.seed,
        })
    }
}

fn left_flags(data: &Dataset, rows: &[usize], rule: &SplitRule) -> Vec<bool> {
    // Unseen levels cannot occur here: candidates come from the node's own rows.
    rows.iter().map(|&i| rule.goes_left(data.cell(i, rule.covariate)).unwrap_or(false)).collect()
}

/// Node rows of one covariate grouped by value (continuous, ascending) or
/// level, with per-group counts and contribution sums.
struct VariableBins {
    reps: Vec<Cell>,
    sums: Vec<SideSums>,
    /// `prefix[m]` sums the first `m` groups.
    prefix: Vec<SideSums>,
    total: SideSums,
    continuous: bool,
}

impl VariableBins {
    fn new(data: &Dataset, rows: &[usize], j: usize, terms: Option<&[f64]>, shift: f64) -> Self {
        let row_sums = |k: usize| {
            let d = terms.map_or(0.0, |t| t[k] - shift);
            SideSums { n: 1, treated: data.treatment()[rows[k]] as usize, sum: d, sum_sq: d * d }
        };
        let (reps, sums, continuous) = match data.column(j) {
            Column::Numeric(v) => {
                let mut order: Vec<usize> = (0..rows.len()).collect();
                order.sort_by(|&a, &b| v[rows[a]].total_cmp(&v[rows[b]]));
                let (mut reps, mut sums): (Vec<Cell>, Vec<SideSums>) = (Vec::new(), Vec::new());
                for k in order {
                    let x = v[rows[k]];
                    if reps.last() != Some(&Cell::Num(x)) {
                        reps.push(Cell::Num(x));
                        sums.push(SideSums::default());
                    }
                    sums.last_mut().expect("group").add(&row_sums(k));
                }
                (reps, sums, true)
            }
            Column::Levels(v) => {
                let mut by_level: BTreeMap<u32, SideSums> = BTreeMap::new();
                for (k, &i) in rows.iter().enumerate() {
                    by_level.entry(v[i]).or_default().add(&row_sums(k));
                }
                let (reps, sums) = by_level.into_iter().map(|(l, s)| (Cell::Level(l), s)).unzip();
                (reps, sums, false)
            }
        };
        let mut prefix = vec![SideSums::default()];
        for s in &sums {
            let mut next = *prefix.last().expect("prefix");
            next.add(s);
            prefix.push(next);
        }
        let total = *prefix.last().expect("prefix");
        VariableBins { reps, sums, prefix, total, continuous }
    }

    fn left_sums(&self, rule: &SplitRule) -> SideSums {
        if self.continuous {
            // Threshold rules send a prefix of the ascending groups left.
            let m = self.reps.partition_point(|&c| rule.goes_left(c) == Some(true));
            return self.prefix[m];
        }
        let mut left = SideSums::default();
        for (c, s) in self.reps.iter().zip(&self.sums) {
            if rule.goes_left(*c) == Some(true) {
                left.add(s);
            }
        }
        left
    }
}

struct Grower<'a> {
    data: &'a Dataset,
    config: &'a GrowConfig,
    whole: Option<WholeFit>,
    nodes: BTreeMap<usize, TreeNode>,
    next_id: usize,
    diagnostics: GrowDiagnostics,
}

impl<'a> Grower<'a> {
    fn admissible(&self, left: &SideSums, right: &SideSums) -> bool {
        let c = self.config;
        [left, right].iter().all(|s| s.n >= c.min_node && s.treated >= c.min_per_arm && s.n - s.treated >= c.min_per_arm)
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize, parent_models: Option<Arc<NuisanceModels>>) -> Result<usize> {
        let id = self.next_id;
        self.next_id += 1;
        let cfg = &self.config.estimator;

        let own_models = match (&self.whole, cfg.scope) {
            (Some(w), NuisanceScope::Whole) => Some(w.models.clone()),
            _ => match NuisanceModels::fit(self.data, &rows, cfg.kind, &cfg.specs, cfg.epsilon) {
                Ok(m) => Some(Arc::new(m)),
                Err(e) if e.is_inadmissible() && parent_models.is_some() => {
                    log::debug!("node {id}: nuisance fit failed ({e}); using the parent's models");
                    None
                }
                Err(e) => return Err(e),
            },
        };
        let models = own_models.clone().or(parent_models).expect("models available");
        let effect = node_effect(cfg.kind, self.data, &rows, &models)?;

        let best = if own_models.is_some() && depth < self.config.max_depth && rows.len() >= 2 * self.config.min_node {
            self.best_split(&rows, &models)?
        } else {
            None
        };

        self.nodes.insert(
            id,
            TreeNode { id, depth, n: rows.len(), effect, split: None, rows: rows.clone(), models: Some(models.clone()) },
        );
        if let Some((rule, statistic)) = best {
            let flags = left_flags(self.data, &rows, &rule);
            let (mut lrows, mut rrows) = (Vec::new(), Vec::new());
            for (&i, &b) in rows.iter().zip(&flags) {
                if b {
                    lrows.push(i)
                } else {
                    rrows.push(i)
                }
            }
            let left = self.grow(lrows, depth + 1, Some(models.clone()))?;
            let right = self.grow(rrows, depth + 1, Some(models))?;
            self.nodes.get_mut(&id).expect("node").split = Some(NodeSplit { rule, statistic, left, right });
        }
        Ok(id)
    }

    fn best_split(&mut self, rows: &[usize], models: &NuisanceModels) -> Result<Option<(SplitRule, f64)>> {
        let cfg = &self.config.estimator;
        let evaluator = match cfg.scope {
            NuisanceScope::Whole => NodeEvaluator::new(self.data, rows.to_vec(), cfg, self.whole.as_ref()),
            _ => NodeEvaluator::with_models(self.data, rows.to_vec(), cfg, models),
        };
        let evaluator = match evaluator {
            Ok(e) => e,
            Err(e) if e.is_inadmissible() => return Ok(None),
            Err(e) => return Err(e),
        };
        let terms = evaluator.influence_terms();
        let shift = terms.map_or(0.0, |d| d.iter().sum::<f64>() / d.len() as f64);
        let mut bins: BTreeMap<usize, VariableBins> = BTreeMap::new();
        let candidates: Vec<(SplitRule, SideSums, SideSums)> = enumerate_splits_rows(self.data, rows)
            .into_iter()
            .filter_map(|rule| {
                let b = bins
                    .entry(rule.covariate)
                    .or_insert_with(|| VariableBins::new(self.data, rows, rule.covariate, terms, shift));
                let left = b.left_sums(&rule);
                let right = b.total.minus(&left);
                self.admissible(&left, &right).then_some((rule, left, right))
            })
            .collect();
        let scores: Vec<Result<Option<f64>>> = candidates
            .par_iter()
            .map(|(rule, left, right)| {
                let contrast = match terms {
                    Some(_) => influence_contrast_sums(left, right, shift),
                    None => evaluator.evaluate(&left_flags(self.data, rows, rule)),
                };
                match contrast {
                    Ok(c) => Ok(Some(c.statistic)),
                    Err(e) if e.is_inadmissible() => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (k, s) in scores.into_iter().enumerate() {
            self.diagnostics.evaluated += 1;
            match s? {
                Some(stat) => {
                    if best.is_none_or(|(_, b)| stat > b) {
                        best = Some((k, stat));
                    }
                }
                None => self.diagnostics.inadmissible += 1,
            }
        }
        Ok(best.filter(|&(_, s)| s > 0.0).map(|(k, s)| (candidates[k].0.clone(), s)))
    }
}

/// Grows the maximum tree on the rows of `mask`.
pub fn grow_max_tree(data: &Dataset, mask: &SubgroupMask, config: &GrowConfig) -> Result<Tree> {
    grow_rows(data, mask.indices(), config)
}

pub fn grow_rows(data: &Dataset, rows: Vec<usize>, config: &GrowConfig) -> Result<Tree> {
    config.validate()?;
    for col in &data.schema().columns {
        if let CovariateKind::Categorical { levels } = &col.kind {
            if levels.len() > MAX_CATEGORICAL_LEVELS {
                return Err(CitError::Config(format!(
                    "categorical covariate {:?} has {} levels; at most {MAX_CATEGORICAL_LEVELS} are supported",
                    col.name,
                    levels.len()
                )));
            }
        }
    }
    if rows.is_empty() {
        return Err(CitError::EmptySubgroup);
    }
    let whole = match config.estimator.scope {
        NuisanceScope::Whole => {
            let models = NuisanceModels::fit(data, &rows, config.estimator.kind, &config.estimator.specs, config.estimator.epsilon)?;
            Some(WholeFit::from_models(data, &rows, &config.estimator, Arc::new(models))?)
        }
        _ => None,
    };
    let mut g = Grower { data, config, whole, nodes: BTreeMap::new(), next_id: 0, diagnostics: GrowDiagnostics::default() };
    let root = g.grow(rows, 0, None)?;
    Ok(Tree { nodes: g.nodes, root, config: config.clone(), schema: data.schema().clone(), diagnostics: g.diagnostics })
}
