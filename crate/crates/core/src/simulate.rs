//! Simulation designs, truth oracles, evaluation metrics and the replication driver.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Cell, Column, ColumnSpec, Dataset, Schema};
use crate::error::{CitError, Result};
use crate::estimators::{EstimatorConfig, EstimatorKind, ModelSpecs, NuisanceScope, VarianceMethod};
use crate::glm::{expit, DesignSpec};
use crate::pipeline::{fit, FitOptions};
use crate::prune::DEFAULT_LAMBDA;
use crate::rng;
use crate::tree::{GrowConfig, SplitForm, Tree};

pub const TREATMENT: &str = "A";
pub const OUTCOME: &str = "Y";
pub const TEST_ROWS: usize = 1000;
const CORRELATION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimDesign {
    HomogeneousContinuous,
    HeterogeneousContinuous,
    BinaryMixed { homogeneous: bool },
}

impl SimDesign {
    pub fn is_binary_mixed(self) -> bool {
        matches!(self, SimDesign::BinaryMixed { .. })
    }

    pub fn is_homogeneous(self) -> bool {
        matches!(self, SimDesign::HomogeneousContinuous | SimDesign::BinaryMixed { homogeneous: true })
    }
}

impl fmt::Display for SimDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimDesign::HomogeneousContinuous => "homog",
            SimDesign::HeterogeneousContinuous => "heterog",
            SimDesign::BinaryMixed { homogeneous: false } => "binary-mixed",
            SimDesign::BinaryMixed { homogeneous: true } => "binary-mixed-homog",
        })
    }
}

impl FromStr for SimDesign {
    type Err = CitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homog" => Ok(SimDesign::HomogeneousContinuous),
            "heterog" => Ok(SimDesign::HeterogeneousContinuous),
            "binary-mixed" => Ok(SimDesign::BinaryMixed { homogeneous: false }),
            "binary-mixed-homog" => Ok(SimDesign::BinaryMixed { homogeneous: true }),
            _ => Err(CitError::Config(format!(
                "unknown setting {s:?} (expected homog, heterog, binary-mixed or binary-mixed-homog)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimSetting {
    pub design: SimDesign,
    pub n: usize,
    pub seed: u64,
}

/// Expected split of a correct tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExpectedSplit {
    /// Continuous variable split `count` times, at any cut points.
    Continuous { var: String, count: usize },
    /// Categorical split into exactly these two level sets.
    Partition { var: String, sides: [Vec<String>; 2] },
}

#[derive(Debug, Clone)]
pub struct TruthOracle {
    pub design: SimDesign,
    pub correct_splits: Vec<ExpectedSplit>,
    pub noise_variables: Vec<String>,
}

fn col(data: &Dataset, name: &str) -> usize {
    data.schema().column_index(name).unwrap_or_else(|| panic!("column {name} missing"))
}

fn num(data: &Dataset, j: usize, i: usize) -> f64 {
    match data.cell(i, j) {
        Cell::Num(x) => x,
        Cell::Level(l) => l as f64,
    }
}

fn level(data: &Dataset, j: usize, i: usize) -> u32 {
    match data.cell(i, j) {
        Cell::Level(l) => l,
        Cell::Num(_) => 0,
    }
}

fn binary_p(a: f64, x2: f64, x4_bd: bool, homogeneous: bool) -> f64 {
    let ind = if x4_bd { 1.0 } else { 0.0 };
    let p = if homogeneous {
        0.15 + 0.1 * a + expit(0.2 * x2) - 0.4 * ind
    } else {
        0.1 + 0.1 * a + expit(0.2 * x2) - 0.4 * a * ind
    };
    p.clamp(0.0, 1.0)
}

impl TruthOracle {
    pub fn new(design: SimDesign) -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let all = names(&["x1", "x2", "x3", "x4", "x5", "x6"]);
        let (correct_splits, noise_variables) = match design {
            SimDesign::HomogeneousContinuous | SimDesign::BinaryMixed { homogeneous: true } => (Vec::new(), all),
            SimDesign::HeterogeneousContinuous => (
                vec![ExpectedSplit::Continuous { var: "x4".into(), count: 1 }],
                names(&["x1", "x2", "x3", "x5", "x6"]),
            ),
            SimDesign::BinaryMixed { homogeneous: false } => (
                vec![ExpectedSplit::Partition { var: "x4".into(), sides: [names(&["A", "C"]), names(&["B", "D"])] }],
                names(&["x1", "x2", "x3", "x5", "x6"]),
            ),
        };
        TruthOracle { design, correct_splits, noise_variables }
    }

    /// Conditional average treatment effect of row `i` (needs all generated covariates).
    pub fn cate(&self, data: &Dataset, i: usize) -> f64 {
        match self.design {
            SimDesign::HomogeneousContinuous => 2.0,
            SimDesign::HeterogeneousContinuous => {
                if num(data, col(data, "x4"), i) > 0.0 {
                    5.0
                } else {
                    2.0
                }
            }
            SimDesign::BinaryMixed { homogeneous } => {
                let x2 = num(data, col(data, "x2"), i);
                let bd = matches!(level(data, col(data, "x4"), i), 1 | 3);
                binary_p(1.0, x2, bd, homogeneous) - binary_p(0.0, x2, bd, homogeneous)
            }
        }
    }

    /// Cell of the true partition containing row `i`.
    pub fn true_cell(&self, data: &Dataset, i: usize) -> usize {
        match self.design {
            SimDesign::HomogeneousContinuous | SimDesign::BinaryMixed { homogeneous: true } => 0,
            SimDesign::HeterogeneousContinuous => (num(data, col(data, "x4"), i) > 0.0) as usize,
            SimDesign::BinaryMixed { homogeneous: false } => matches!(level(data, col(data, "x4"), i), 1 | 3) as usize,
        }
    }
}

fn correlated_factor(dim: usize) -> DMatrix<f64> {
    let cov = DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { CORRELATION });
    cov.cholesky().expect("equicorrelation matrix is positive definite").l()
}

fn draw_mvn(factor: &DMatrix<f64>, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let dim = factor.nrows();
    let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..dim {
        out[i] = (0..=i).map(|k| factor[(i, k)] * z[k]).sum();
    }
}

fn level_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
}

pub fn schema_for(design: SimDesign) -> Schema {
    let columns = if design.is_binary_mixed() {
        let mut c: Vec<ColumnSpec> = (1..=3).map(|j| ColumnSpec::continuous(&format!("x{j}"))).collect();
        for (j, k) in [(4, 4), (5, 5), (6, 6)] {
            c.push(ColumnSpec {
                name: format!("x{j}"),
                kind: crate::data::CovariateKind::Categorical { levels: level_labels(k) },
            });
        }
        c
    } else {
        (1..=6).map(|j| ColumnSpec::continuous(&format!("x{j}"))).collect()
    };
    Schema::new(columns, TREATMENT, OUTCOME).expect("fixed schema is valid")
}

/// Draws `n` rows of `design` from `rng`.
pub fn generate_with(design: SimDesign, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let schema = schema_for(design);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let columns = if design.is_binary_mixed() {
        let homogeneous = design.is_homogeneous();
        let factor = correlated_factor(3);
        let mut x = [0.0; 3];
        let mut cont: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(n)).collect();
        let mut cat: Vec<Vec<u32>> = (0..3).map(|_| Vec::with_capacity(n)).collect();
        for _ in 0..n {
            draw_mvn(&factor, rng, &mut x);
            let lv = [rng.random_range(0..4u32), rng.random_range(0..5u32), rng.random_range(0..6u32)];
            let x6_bc = matches!(lv[2], 1 | 2) as u8 as f64;
            let p = expit(0.3 * x[1] - 0.3 * x[2] + 0.3 * x6_bc);
            let ai = (rng.random::<f64>() < p) as u8;
            let py = binary_p(ai as f64, x[1], matches!(lv[0], 1 | 3), homogeneous);
            let yi = (rng.random::<f64>() < py) as u8 as f64;
            for j in 0..3 {
                cont[j].push(x[j]);
                cat[j].push(lv[j]);
            }
            a.push(ai);
            y.push(yi);
        }
        cont.into_iter().map(Column::Numeric).chain(cat.into_iter().map(Column::Levels)).collect()
    } else {
        let heterogeneous = design == SimDesign::HeterogeneousContinuous;
        let factor = correlated_factor(6);
        let mut x = [0.0; 6];
        let mut cols: Vec<Vec<f64>> = (0..6).map(|_| Vec::with_capacity(n)).collect();
        for _ in 0..n {
            draw_mvn(&factor, rng, &mut x);
            let p = expit(0.6 * x[0] - 0.6 * x[1] + 0.6 * x[2]);
            let ai = (rng.random::<f64>() < p) as u8;
            let af = ai as f64;
            let x1neg = (x[0] < 0.0) as u8 as f64;
            let x4pos = (x[3] > 0.0) as u8 as f64;
            let eps: f64 = rng.sample(StandardNormal);
            let interaction = if heterogeneous { 3.0 * af * x4pos } else { 3.0 * x4pos };
            let yi = 2.0 + 2.0 * af + 2.0 * x1neg + x[1].exp() + interaction + x[4].powi(3) + eps;
            for j in 0..6 {
                cols[j].push(x[j]);
            }
            a.push(ai);
            y.push(yi);
        }
        cols.into_iter().map(Column::Numeric).collect()
    };
    Dataset::new(schema, columns, a, y).expect("generated data is valid")
}

pub fn generate(setting: &SimSetting) -> (Dataset, TruthOracle) {
    let mut rng = rng::stream(setting.seed, "generate", 0);
    (generate_with(setting.design, setting.n, &mut rng), TruthOracle::new(setting.design))
}

/// Nuisance-model variants for the simulation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    True,
    MisFunc,
    UnmeasuredCov,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::True => "true",
            Preset::MisFunc => "mis-func",
            Preset::UnmeasuredCov => "unmeasured-cov",
        })
    }
}

impl FromStr for Preset {
    type Err = CitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(Preset::True),
            "mis-func" => Ok(Preset::MisFunc),
            "unmeasured-cov" => Ok(Preset::UnmeasuredCov),
            _ => Err(CitError::Config(format!("unknown model preset {s:?} (expected true, mis-func or unmeasured-cov)"))),
        }
    }
}

/// Covariate hidden from the fitting procedure under [`Preset::UnmeasuredCov`].
pub const UNMEASURED: &str = "x2";

fn vars_without(drop: Option<&str>) -> Vec<String> {
    (1..=6).map(|j| format!("x{j}")).filter(|v| Some(v.as_str()) != drop).collect()
}

pub fn propensity_spec_text(design: SimDesign, preset: Preset) -> String {
    match (design.is_binary_mixed(), preset) {
        (false, Preset::True) => "x1 + x2 + x3".into(),
        (true, Preset::True) => "x2 + x3 + I(x6 in {B,C})".into(),
        (false, Preset::MisFunc) => vars_without(None).iter().map(|v| format!("exp({v})")).collect::<Vec<_>>().join(" + "),
        (true, Preset::MisFunc) => "exp(x1) + exp(x2) + exp(x3) + x4 + x5 + x6".into(),
        (_, Preset::UnmeasuredCov) => vars_without(Some(UNMEASURED)).join(" + "),
    }
}

pub fn outcome_spec_text(design: SimDesign, preset: Preset) -> String {
    let saturated = |drop: Option<&str>| {
        let vars = vars_without(drop);
        let mut terms = vec![TREATMENT.to_string()];
        terms.extend(vars.iter().cloned());
        terms.extend(vars.iter().map(|v| format!("{TREATMENT}:{v}")));
        terms.join(" + ")
    };
    match (design, preset) {
        (SimDesign::HomogeneousContinuous, Preset::True) => "A + I(x1<0) + exp(x2) + I(x4>0) + cube(x5)".into(),
        (SimDesign::HeterogeneousContinuous, Preset::True) => "A + I(x1<0) + exp(x2) + A:I(x4>0) + cube(x5)".into(),
        (SimDesign::BinaryMixed { homogeneous: true }, Preset::True) => "A + x2 + I(x4 in {B,D})".into(),
        (SimDesign::BinaryMixed { homogeneous: false }, Preset::True) => "A + x2 + A:I(x4 in {B,D})".into(),
        (_, Preset::MisFunc) => saturated(None),
        (_, Preset::UnmeasuredCov) => saturated(Some(UNMEASURED)),
    }
}

/// One algorithm configuration for the replication driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub kind: EstimatorKind,
    pub propensity: Option<Preset>,
    pub outcome: Option<Preset>,
    pub scope: NuisanceScope,
    pub variance: Option<VarianceMethod>,
    pub min_node: usize,
    pub min_per_arm: usize,
    pub max_depth: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub train_frac: f64,
}

impl AlgoConfig {
    /// Correctly specified models for `kind`, other settings at their defaults.
    pub fn new(kind: EstimatorKind) -> Self {
        AlgoConfig {
            kind,
            propensity: kind.needs_propensity().then_some(Preset::True),
            outcome: kind.needs_outcome().then_some(Preset::True),
            scope: NuisanceScope::Parent,
            variance: None,
            min_node: 30,
            min_per_arm: 10,
            max_depth: 10,
            epsilon: crate::estimators::DEFAULT_EPSILON,
            lambda: DEFAULT_LAMBDA,
            train_frac: 0.8,
        }
    }

    /// Parses `est[,key=value]...`, e.g. `dr,prop=true,out=mis-func,scope=parent`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut parts = text.split(',').map(str::trim);
        let kind: EstimatorKind = parts.next().unwrap_or("").parse()?;
        let mut cfg = AlgoConfig::new(kind);
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| CitError::Config(format!("expected key=value in algorithm config, got {part:?}")))?;
            let bad = |what: &str| CitError::Config(format!("invalid {what} {value:?} in algorithm config"));
            match key.trim() {
                "prop" => cfg.propensity = Some(value.parse()?),
                "out" => cfg.outcome = Some(value.parse()?),
                "scope" => cfg.scope = value.parse()?,
                "variance" => cfg.variance = Some(value.parse()?),
                "min_node" => cfg.min_node = value.parse().map_err(|_| bad("min_node"))?,
                "min_per_arm" => cfg.min_per_arm = value.parse().map_err(|_| bad("min_per_arm"))?,
                "max_depth" => cfg.max_depth = value.parse().map_err(|_| bad("max_depth"))?,
                "epsilon" => cfg.epsilon = value.parse().map_err(|_| bad("epsilon"))?,
                "lambda" => cfg.lambda = value.parse().map_err(|_| bad("lambda"))?,
                "train_frac" => cfg.train_frac = value.parse().map_err(|_| bad("train_frac"))?,
                other => return Err(CitError::Config(format!("unknown algorithm config key {other:?}"))),
            }
        }
        if !kind.needs_propensity() {
            cfg.propensity = None;
        }
        if !kind.needs_outcome() {
            cfg.outcome = None;
        }
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        let mut s = self.kind.label().to_string();
        if let Some(p) = self.propensity {
            s.push_str(&format!(" prop={p}"));
        }
        if let Some(o) = self.outcome {
            s.push_str(&format!(" out={o}"));
        }
        if self.scope != NuisanceScope::Parent {
            s.push_str(&format!(" scope={}", self.scope));
        }
        s
    }

    /// True when the fitting procedure must not see [`UNMEASURED`].
    pub fn hides_covariate(&self) -> bool {
        self.propensity == Some(Preset::UnmeasuredCov) || self.outcome == Some(Preset::UnmeasuredCov)
    }

    pub fn grow_config(&self, design: SimDesign, seed: u64) -> Result<GrowConfig> {
        let spec = |t: String| DesignSpec::parse(&t, TREATMENT);
        let specs = ModelSpecs {
            propensity: self.propensity.map(|p| spec(propensity_spec_text(design, p))).transpose()?,
            outcome: self.outcome.map(|p| spec(outcome_spec_text(design, p))).transpose()?,
        };
        let mut est = EstimatorConfig::new(self.kind, self.scope, specs);
        if let Some(v) = self.variance {
            est.variance = v;
        }
        est.epsilon = self.epsilon;
        let cfg = GrowConfig {
            estimator: est,
            min_node: self.min_node,
            min_per_arm: self.min_per_arm,
            max_depth: self.max_depth,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean squared difference between tree predictions and the true effects.
/// `routing` holds the covariates the tree was fit on; `truth` all generated ones.
pub fn mse(tree: &Tree, routing: &Dataset, truth: &Dataset, oracle: &TruthOracle) -> f64 {
    let n = routing.n();
    let pred = tree.predict(routing);
    (0..n).map(|i| (pred[i] - oracle.cate(truth, i)).powi(2)).sum::<f64>() / n as f64
}

/// Mean squared difference between predictions and true effects.
pub fn mse_values(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}

fn split_list(tree: &Tree) -> Vec<(String, SplitForm)> {
    tree.nodes
        .values()
        .filter_map(|n| n.split.as_ref().map(|s| (tree.schema.columns[s.rule.covariate].name.clone(), s.rule.form.clone())))
        .collect()
}

fn partition_labels(tree: &Tree, var: &str, left: &[u32], right: &[u32]) -> [Vec<String>; 2] {
    let j = tree.schema.column_index(var).expect("split covariate in schema");
    let levels = tree.schema.columns[j].kind.levels().unwrap_or(&[]);
    let names = |v: &[u32]| {
        let mut s: Vec<String> = v.iter().map(|&l| levels[l as usize].clone()).collect();
        s.sort();
        s
    };
    let mut sides = [names(left), names(right)];
    sides.sort();
    sides
}

fn normalized(sides: &[Vec<String>; 2]) -> [Vec<String>; 2] {
    let mut s = sides.clone();
    for side in s.iter_mut() {
        side.sort();
    }
    s.sort();
    s
}

fn matches_expected(tree: &Tree, var: &str, form: &SplitForm, expected: &ExpectedSplit) -> bool {
    match (expected, form) {
        (ExpectedSplit::Continuous { var: v, .. }, SplitForm::Threshold { .. }) => v == var,
        (ExpectedSplit::Partition { var: v, sides }, SplitForm::Levels { left, right }) => {
            v == var && partition_labels(tree, var, left, right) == normalized(sides)
        }
        _ => false,
    }
}

/// Correct-tree criterion: continuous variables are split exactly the
/// expected number of times (any cut points) and categorical splits are
/// exactly the expected level partitions.
pub fn is_correct_tree(tree: &Tree, oracle: &TruthOracle) -> bool {
    let splits = split_list(tree);
    let mut continuous: BTreeMap<String, usize> = BTreeMap::new();
    let mut partitions: Vec<(String, [Vec<String>; 2])> = Vec::new();
    for (var, form) in &splits {
        match form {
            SplitForm::Threshold { .. } => *continuous.entry(var.clone()).or_default() += 1,
            SplitForm::Levels { left, right } => partitions.push((var.clone(), partition_labels(tree, var, left, right))),
            SplitForm::Ordinal { cut } => {
                partitions.push((var.clone(), [vec![format!("<{cut}")], vec![format!(">={cut}")]]))
            }
        }
    }
    let mut want_cont: BTreeMap<String, usize> = BTreeMap::new();
    let mut want_part: Vec<(String, [Vec<String>; 2])> = Vec::new();
    for e in &oracle.correct_splits {
        match e {
            ExpectedSplit::Continuous { var, count } => {
                want_cont.insert(var.clone(), *count);
            }
            ExpectedSplit::Partition { var, sides } => want_part.push((var.clone(), normalized(sides))),
        }
    }
    partitions.sort();
    want_part.sort();
    continuous == want_cont && partitions == want_part
}

pub fn noise_split_count(tree: &Tree, oracle: &TruthOracle) -> usize {
    split_list(tree).iter().filter(|(v, _)| oracle.noise_variables.contains(v)).count()
}

/// True when the root split of the maximum tree is an expected split.
pub fn correct_first_split(max_tree: &Tree, oracle: &TruthOracle) -> bool {
    let Some(s) = &max_tree.node(max_tree.root).split else { return false };
    let var = &max_tree.schema.columns[s.rule.covariate].name;
    oracle.correct_splits.iter().any(|e| matches_expected(max_tree, var, &s.rule.form, e))
}

fn pairs(k: u64) -> u128 {
    (k as u128) * (k.saturating_sub(1) as u128) / 2
}

/// Number of row pairs co-assigned by exactly one of the two labelings.
pub fn discordant_pairs(a: &[usize], b: &[usize]) -> u128 {
    let mut ca: HashMap<usize, u64> = HashMap::new();
    let mut cb: HashMap<usize, u64> = HashMap::new();
    let mut cab: HashMap<(usize, usize), u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *cab.entry((x, y)).or_default() += 1;
    }
    let same_a: u128 = ca.values().map(|&k| pairs(k)).sum();
    let same_b: u128 = cb.values().map(|&k| pairs(k)).sum();
    let both: u128 = cab.values().map(|&k| pairs(k)).sum();
    same_a + same_b - 2 * both
}

/// Pairwise prediction similarity of two partitions given as cell labels per row.
pub fn pairwise_similarity_labels(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let m = a.len() as u64;
    assert!(m >= 2, "pairwise similarity needs at least two rows");
    1.0 - discordant_pairs(a, b) as f64 / pairs(m) as f64
}

/// Pairwise prediction similarity of the partitions two trees induce on `data`.
pub fn pairwise_similarity(tree: &Tree, reference: &Tree, data: &Dataset) -> f64 {
    let a: Vec<usize> = (0..data.n()).map(|i| tree.terminal_of(data, i)).collect();
    let b: Vec<usize> = (0..data.n()).map(|i| reference.terminal_of(data, i)).collect();
    pairwise_similarity_labels(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub mse: f64,
    pub correct_tree: bool,
    pub noise_splits: usize,
    pub pps: f64,
    pub correct_first_split: bool,
    pub terminal_nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub setting: SimDesign,
    pub algorithm: String,
    pub n: usize,
    pub seed: u64,
    pub replications: usize,
    pub failures: usize,
    pub mse: f64,
    pub correct_tree_prop: f64,
    pub mean_noise_splits: f64,
    pub pps: f64,
    pub correct_first_split_prop: f64,
    pub mean_terminal_nodes: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_fit_seconds: Option<f64>,
}

impl ExperimentSummary {
    pub fn table(summaries: &[ExperimentSummary]) -> String {
        let mut s = format!(
            "{:<42} {:>8} {:>9} {:>8} {:>7} {:>7} {:>9} {:>9}\n",
            "algorithm", "setting", "mse", "correct", "noise", "pps", "first", "seconds"
        );
        for x in summaries {
            let secs = x.mean_fit_seconds.map_or_else(|| "-".to_string(), |t| format!("{t:.4}"));
            s.push_str(&format!(
                "{:<42} {:>8} {:>9.4} {:>8.3} {:>7.3} {:>7.3} {:>9.3} {:>9}\n",
                x.algorithm, x.setting.to_string(), x.mse, x.correct_tree_prop, x.mean_noise_splits, x.pps,
                x.correct_first_split_prop, secs
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Record wall-clock fit times (makes the summary non-reproducible).
    pub timing: bool,
}

/// Fits one replicate: fresh training and test draws from streams indexed by `rep`.
pub fn run_replicate(design: SimDesign, algo: &AlgoConfig, n: usize, seed: u64, rep: u64, opts: RunOptions) -> Result<ReplicateMetrics> {
    let full_train = generate_with(design, n, &mut rng::stream(seed, "train", rep));
    let test = generate_with(design, TEST_ROWS, &mut rng::stream(seed, "test", rep));
    let (train, test_routing) = if algo.hides_covariate() {
        (full_train.drop_columns(&[UNMEASURED]), test.drop_columns(&[UNMEASURED]))
    } else {
        (full_train, test.clone())
    };
    let oracle = TruthOracle::new(design);
    let fit_seed = rng::stream(seed, "fit-seed", rep).random::<u64>();
    let config = algo.grow_config(design, fit_seed)?;
    let options = FitOptions { lambda: algo.lambda, train_frac: algo.train_frac, ..FitOptions::default() };
    let start = Instant::now();
    let result = fit(&train, &config, &options)?;
    let elapsed = start.elapsed().as_secs_f64();

    let tree = &result.tree;
    let assigned: Vec<usize> = (0..test_routing.n()).map(|i| tree.terminal_of(&test_routing, i)).collect();
    let reference: Vec<usize> = (0..test.n()).map(|i| oracle.true_cell(&test, i)).collect();
    Ok(ReplicateMetrics {
        mse: mse(tree, &test_routing, &test, &oracle),
        correct_tree: is_correct_tree(tree, &oracle),
        noise_splits: noise_split_count(tree, &oracle),
        pps: pairwise_similarity_labels(&assigned, &reference),
        correct_first_split: correct_first_split(&result.max_tree, &oracle),
        terminal_nodes: tree.terminal_ids().len(),
        fit_seconds: opts.timing.then_some(elapsed),
    })
}

/// Aggregates replicate metrics; failed replicates are counted and excluded.
pub fn summarize(
    design: SimDesign,
    algo: &AlgoConfig,
    n: usize,
    seed: u64,
    results: &[Result<ReplicateMetrics>],
) -> ExperimentSummary {
    let ok: Vec<&ReplicateMetrics> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    for (k, r) in results.iter().enumerate() {
        if let Err(e) = r {
            log::warn!("replicate {k} failed: {e}");
        }
    }
    let m = ok.len().max(1) as f64;
    let mean = |f: &dyn Fn(&ReplicateMetrics) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / m;
    let timed: Vec<f64> = ok.iter().filter_map(|r| r.fit_seconds).collect();
    ExperimentSummary {
        setting: design,
        algorithm: algo.label(),
        n,
        seed,
        replications: results.len(),
        failures: results.len() - ok.len(),
        mse: mean(&|r| r.mse),
        correct_tree_prop: mean(&|r| r.correct_tree as u8 as f64),
        mean_noise_splits: mean(&|r| r.noise_splits as f64),
        pps: mean(&|r| r.pps),
        correct_first_split_prop: mean(&|r| r.correct_first_split as u8 as f64),
        mean_terminal_nodes: mean(&|r| r.terminal_nodes as f64),
        mean_fit_seconds: (!timed.is_empty()).then(|| timed.iter().sum::<f64>() / timed.len() as f64),
    }
}

/// Runs `reps` independent replicates of `algo` on `design`.
pub fn run_experiment(
    design: SimDesign,
    algo: &AlgoConfig,
    reps: usize,
    n: usize,
    seed: u64,
    opts: RunOptions,
) -> Result<ExperimentSummary> {
    if reps < 1 {
        return Err(CitError::Config("at least one replication is required".into()));
    }
    algo.grow_config(design, 0)?;
    let results: Vec<Result<ReplicateMetrics>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| run_replicate(design, algo, n, seed, rep, opts))
        .collect();
    Ok(summarize(design, algo, n, seed, &results))
}
