//! Subgroup potential-outcome means, the split contrast `T(l, r)` and its
//! variance.
//!
//! Split candidates at a node are scored through a [`NodeEvaluator`], which
//! holds the per-row quantities that do not depend on where the node is cut.
//! Each candidate is then a single pass over the node's rows.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubgroupMask};
use crate::error::{CitError, Result};
use crate::glm::{fit_logistic_rows, fit_ols_rows, DesignSpec, LinearFit, LogisticFit, MeanModel};

pub const DEFAULT_EPSILON: f64 = 0.01;

/// Variances at or below this fraction of their own positive parts are treated as zero.
const VARIANCE_GUARD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "ipw")]
    Ipw,
    #[serde(rename = "g")]
    GFormula,
    #[serde(rename = "dr")]
    DoublyRobust,
}

impl EstimatorKind {
    pub fn needs_propensity(self) -> bool {
        matches!(self, EstimatorKind::Ipw | EstimatorKind::DoublyRobust)
    }

    pub fn needs_outcome(self) -> bool {
        matches!(self, EstimatorKind::GFormula | EstimatorKind::DoublyRobust)
    }

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Ipw => "IPW-CIT",
            EstimatorKind::GFormula => "G-CIT",
            EstimatorKind::DoublyRobust => "DR-CIT",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::GFormula => "g",
            EstimatorKind::DoublyRobust => "dr",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = CitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipw" => Ok(EstimatorKind::Ipw),
            "g" => Ok(EstimatorKind::GFormula),
            "dr" => Ok(EstimatorKind::DoublyRobust),
            _ => Err(CitError::Config(format!("unknown estimator {s:?} (expected ipw, g or dr)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuisanceScope {
    /// Fit once on all rows before growth.
    Whole,
    /// Fit on the rows of the node being split.
    Parent,
    /// Fit separately inside each candidate child.
    Child,
}

impl fmt::Display for NuisanceScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NuisanceScope::Whole => "whole",
            NuisanceScope::Parent => "parent",
            NuisanceScope::Child => "child",
        })
    }
}

impl FromStr for NuisanceScope {
    type Err = CitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(NuisanceScope::Whole),
            "parent" => Ok(NuisanceScope::Parent),
            "child" => Ok(NuisanceScope::Child),
            _ => Err(CitError::Config(format!("unknown scope {s:?} (expected whole, parent or child)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMethod {
    /// Sandwich with one nuisance fit shared by both children.
    PooledSandwich,
    /// Sandwich with a separate nuisance fit in each child.
    PerChildSandwich,
    /// Empirical variance of influence contributions, nuisance fits treated as known.
    Influence,
}

impl VarianceMethod {
    pub fn default_for(kind: EstimatorKind, scope: NuisanceScope) -> Self {
        match (kind, scope) {
            (EstimatorKind::DoublyRobust, _) => VarianceMethod::Influence,
            (_, NuisanceScope::Child) => VarianceMethod::PerChildSandwich,
            _ => VarianceMethod::PooledSandwich,
        }
    }
}

impl fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceMethod::PooledSandwich => "pooled-sandwich",
            VarianceMethod::PerChildSandwich => "per-child-sandwich",
            VarianceMethod::Influence => "influence",
        })
    }
}

impl FromStr for VarianceMethod {
    type Err = CitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled-sandwich" => Ok(VarianceMethod::PooledSandwich),
            "per-child-sandwich" => Ok(VarianceMethod::PerChildSandwich),
            "influence" => Ok(VarianceMethod::Influence),
            _ => Err(CitError::Config(format!(
                "unknown variance method {s:?} (expected pooled-sandwich, per-child-sandwich or influence)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpecs {
    pub propensity: Option<DesignSpec>,
    pub outcome: Option<DesignSpec>,
}

/// Everything needed to estimate node effects and score splits.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub scope: NuisanceScope,
    pub variance: VarianceMethod,
    pub specs: ModelSpecs,
    pub epsilon: f64,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, scope: NuisanceScope, specs: ModelSpecs) -> Self {
        EstimatorConfig {
            kind,
            scope,
            variance: VarianceMethod::default_for(kind, scope),
            specs,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_propensity() && self.specs.propensity.is_none() {
            return Err(CitError::Config(format!("estimator {} needs a propensity spec", self.kind)));
        }
        if self.kind.needs_outcome() && self.specs.outcome.is_none() {
            return Err(CitError::Config(format!("estimator {} needs an outcome spec", self.kind)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(CitError::Config(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        match (self.variance, self.scope) {
            (VarianceMethod::PooledSandwich, NuisanceScope::Child) => Err(CitError::Config(
                "pooled-sandwich variance needs a shared fit (scope whole or parent)".into(),
            )),
            (VarianceMethod::PerChildSandwich, s) if s != NuisanceScope::Child => {
                Err(CitError::Config("per-child-sandwich variance needs scope child".into()))
            }
            (VarianceMethod::Influence, _) => Ok(()),
            _ if self.kind == EstimatorKind::DoublyRobust => {
                Err(CitError::Config("the doubly robust estimator supports only influence variance".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Fitted propensity and outcome models.
#[derive(Debug, Clone)]
pub struct NuisanceModels {
    pub propensity: Option<LogisticFit>,
    pub outcome: Option<LinearFit>,
    pub epsilon: f64,
}

/// Per-row predictions from [`NuisanceModels`]. `e` is already truncated to `[ε, 1-ε]`.
#[derive(Debug, Clone, Default)]
pub struct RowPredictions {
    pub e: Option<Vec<f64>>,
    pub g1: Option<Vec<f64>>,
    pub g0: Option<Vec<f64>>,
}

impl NuisanceModels {
    /// Fits the models `kind` requires on `rows`.
    pub fn fit(data: &Dataset, rows: &[usize], kind: EstimatorKind, specs: &ModelSpecs, epsilon: f64) -> Result<Self> {
        let propensity = match (&specs.propensity, kind.needs_propensity()) {
            (Some(spec), true) => Some(fit_logistic_rows(data, rows, spec)?),
            (None, true) => return Err(CitError::Config("missing propensity spec".into())),
            _ => None,
        };
        let outcome = match (&specs.outcome, kind.needs_outcome()) {
            (Some(spec), true) => Some(fit_ols_rows(data, rows, spec)?),
            (None, true) => return Err(CitError::Config("missing outcome spec".into())),
            _ => None,
        };
        Ok(NuisanceModels { propensity, outcome, epsilon })
    }

    pub fn predict(&self, data: &Dataset, rows: &[usize]) -> Result<RowPredictions> {
        let e = match &self.propensity {
            Some(fit) => Some(
                fit.predict_rows(data, rows, None)?
                    .into_iter()
                    .map(|p| truncate(p, self.epsilon))
                    .collect(),
            ),
            None => None,
        };
        let (g1, g0) = match &self.outcome {
            Some(fit) => (Some(fit.predict_rows(data, rows, Some(1))?), Some(fit.predict_rows(data, rows, Some(0))?)),
            None => (None, None),
        };
        Ok(RowPredictions { e, g1, g0 })
    }
}

#[inline]
pub fn truncate(p: f64, epsilon: f64) -> f64 {
    p.clamp(epsilon, 1.0 - epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEffect {
    pub mu1: f64,
    pub mu0: f64,
    pub effect: f64,
    /// Centered per-row contributions `D_i - effect`, in row order.
    #[serde(skip)]
    pub influence: Vec<f64>,
    pub kind: EstimatorKind,
    /// An arm had no rows, so its mean is not a real estimate.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl NodeEffect {
    fn from_contributions(kind: EstimatorKind, mu1: f64, mu0: f64, d: &[f64], degenerate: bool) -> Self {
        let effect = mu1 - mu0;
        NodeEffect { mu1, mu0, effect, influence: d.iter().map(|v| v - effect).collect(), kind, degenerate }
    }
}

fn arms_missing(data: &Dataset, rows: &[usize]) -> bool {
    let treated = rows.iter().filter(|&&i| data.treatment()[i] == 1).count();
    treated == 0 || treated == rows.len()
}

fn require<'a>(v: &'a Option<Vec<f64>>, what: &str) -> Result<&'a [f64]> {
    v.as_deref().ok_or_else(|| CitError::Config(format!("{what} model required")))
}

/// Inverse probability weighting estimate on `rows` from precomputed predictions.
pub fn ipw_effect(data: &Dataset, rows: &[usize], preds: &RowPredictions) -> Result<NodeEffect> {
    if rows.is_empty() {
        return Err(CitError::EmptySubgroup);
    }
    let e = require(&preds.e, "propensity")?;
    let n = rows.len() as f64;
    let (mut s1, mut s0) = (0.0, 0.0);
    let mut d = Vec::with_capacity(rows.len());
    for (k, &i) in rows.iter().enumerate() {
        let y = data.outcome()[i];
        let (t1, t0) = if data.treatment()[i] == 1 { (y / e[k], 0.0) } else { (0.0, y / (1.0 - e[k])) };
        s1 += t1;
        s0 += t0;
        d.push(t1 - t0);
    }
    Ok(NodeEffect::from_contributions(EstimatorKind::Ipw, s1 / n, s0 / n, &d, arms_missing(data, rows)))
}

/// G-formula estimate: mean of predicted outcomes under each arm.
pub fn g_effect(rows: &[usize], preds: &RowPredictions) -> Result<NodeEffect> {
    if rows.is_empty() {
        return Err(CitError::EmptySubgroup);
    }
    let g1 = require(&preds.g1, "outcome")?;
    let g0 = require(&preds.g0, "outcome")?;
    let n = rows.len() as f64;
    let d: Vec<f64> = g1.iter().zip(g0).map(|(a, b)| a - b).collect();
    Ok(NodeEffect::from_contributions(
        EstimatorKind::GFormula,
        g1.iter().sum::<f64>() / n,
        g0.iter().sum::<f64>() / n,
        &d,
        false,
    ))
}

/// Doubly robust (augmented IPW) estimate.
pub fn dr_effect(data: &Dataset, rows: &[usize], preds: &RowPredictions) -> Result<NodeEffect> {
    if rows.is_empty() {
        return Err(CitError::EmptySubgroup);
    }
    let e = require(&preds.e, "propensity")?;
    let g1 = require(&preds.g1, "outcome")?;
    let g0 = require(&preds.g0, "outcome")?;
    let n = rows.len() as f64;
    let (mut s1, mut s0) = (0.0, 0.0);
    let mut d = Vec::with_capacity(rows.len());
    for (k, &i) in rows.iter().enumerate() {
        let y = data.outcome()[i];
        let (t1, t0) = if data.treatment()[i] == 1 {
            (g1[k] + (y - g1[k]) / e[k], g0[k])
        } else {
            (g1[k], g0[k] + (y - g0[k]) / (1.0 - e[k]))
        };
        s1 += t1;
        s0 += t0;
        d.push(t1 - t0);
    }
    Ok(NodeEffect::from_contributions(EstimatorKind::DoublyRobust, s1 / n, s0 / n, &d, arms_missing(data, rows)))
}

pub fn effect_from_predictions(
    kind: EstimatorKind,
    data: &Dataset,
    rows: &[usize],
    preds: &RowPredictions,
) -> Result<NodeEffect> {
    match kind {
        EstimatorKind::Ipw => ipw_effect(data, rows, preds),
        EstimatorKind::GFormula => g_effect(rows, preds),
        EstimatorKind::DoublyRobust => dr_effect(data, rows, preds),
    }
}

pub fn node_effect(kind: EstimatorKind, data: &Dataset, rows: &[usize], models: &NuisanceModels) -> Result<NodeEffect> {
    if rows.is_empty() {
        return Err(CitError::EmptySubgroup);
    }
    effect_from_predictions(kind, data, rows, &models.predict(data, rows)?)
}

pub fn estimate_ipw(data: &Dataset, mask: &SubgroupMask, models: &NuisanceModels) -> Result<NodeEffect> {
    node_effect(EstimatorKind::Ipw, data, &mask.indices(), models)
}

pub fn estimate_g(data: &Dataset, mask: &SubgroupMask, models: &NuisanceModels) -> Result<NodeEffect> {
    node_effect(EstimatorKind::GFormula, data, &mask.indices(), models)
}

pub fn estimate_dr(data: &Dataset, mask: &SubgroupMask, models: &NuisanceModels) -> Result<NodeEffect> {
    node_effect(EstimatorKind::DoublyRobust, data, &mask.indices(), models)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitContrast {
    pub t_hat: f64,
    pub variance: f64,
    pub statistic: f64,
}

impl SplitContrast {
    fn new(t_hat: f64, variance: f64, scale: f64) -> Result<Self> {
        if !variance.is_finite() || !t_hat.is_finite() {
            return Err(CitError::Inadmissible("non-finite contrast".into()));
        }
        if variance <= 0.0 || variance <= VARIANCE_GUARD * scale {
            return Err(CitError::Inadmissible("variance is not positive".into()));
        }
        Ok(SplitContrast { t_hat, variance, statistic: t_hat * t_hat / variance })
    }
}

/// Variance of `T(l, r)` from two nodes' influence contributions: the sample
/// variance of the pooled contributions `(D_i - τ_l)/p_l` over `l` and
/// `-(D_i - τ_r)/p_r` over `r`, divided by `n_union`.
pub fn if_variance(effect_l: &NodeEffect, effect_r: &NodeEffect, n_union: usize) -> Result<f64> {
    let nl = effect_l.influence.len() as f64;
    let nr = effect_r.influence.len() as f64;
    let nu = n_union as f64;
    let pl = nl / nu;
    let pr = nr / nu;
    let pooled: Vec<f64> = effect_l
        .influence
        .iter()
        .map(|v| v / pl)
        .chain(effect_r.influence.iter().map(|v| -v / pr))
        .collect();
    pooled_contribution_variance(&pooled, n_union)
}

/// Sample variance (divisor `m - 1`) of `contributions`, divided by `n_union`.
pub fn pooled_contribution_variance(contributions: &[f64], n_union: usize) -> Result<f64> {
    let m = contributions.len();
    if m < 2 {
        return Err(CitError::Inadmissible("fewer than two influence contributions".into()));
    }
    let mean = contributions.iter().sum::<f64>() / m as f64;
    let ss: f64 = contributions.iter().map(|v| (v - mean) * (v - mean)).sum();
    let var = ss / (m as f64 - 1.0) / n_union as f64;
    let scale = contributions.iter().map(|v| v * v).sum::<f64>() / (m as f64 - 1.0) / n_union as f64;
    if !var.is_finite() || var <= 0.0 || var <= VARIANCE_GUARD * scale {
        return Err(CitError::Inadmissible("influence variance is zero".into()));
    }
    Ok(var)
}

// ---------------------------------------------------------------------------
// Sandwich pieces

fn kept_columns(width: usize, dropped: &[usize]) -> Vec<usize> {
    (0..width).filter(|j| !dropped.contains(j)).collect()
}

/// Statistics of one nuisance fit entering the sandwich correction:
/// `inv` is the inverse of the (averaged) information matrix and `gram`
/// the sum of outer products of the per-row estimating-function values.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub n: f64,
    pub inv: DMatrix<f64>,
    pub gram: DMatrix<f64>,
}

fn sym_inverse(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| CitError::Inadmissible("information matrix is singular".into()))
}

/// Per-row propensity terms for one fit: `w = AY/e - (1-A)Y/(1-e)`,
/// `h = AY(1-e)/e + (1-A)Ye/(1-e)`, the retained design row `x`, and
/// `r = (A - e) x`.
#[derive(Debug, Clone)]
struct IpwRows {
    k: usize,
    w: Vec<f64>,
    h: Vec<f64>,
    x: Vec<f64>,
    r: Vec<f64>,
    e: Vec<f64>,
}

impl IpwRows {
    fn build(data: &Dataset, rows: &[usize], fit: &LogisticFit, epsilon: f64) -> Result<Self> {
        let design = fit.design();
        let keep = kept_columns(design.width(), &fit.dropped);
        let k = keep.len();
        let beta: Vec<f64> = keep.iter().map(|&j| fit.coefficients[j]).collect();
        let mut full = vec![0.0; design.width()];
        let n = rows.len();
        let mut out = IpwRows {
            k,
            w: Vec::with_capacity(n),
            h: Vec::with_capacity(n),
            x: Vec::with_capacity(n * k),
            r: Vec::with_capacity(n * k),
            e: Vec::with_capacity(n),
        };
        fit.check_levels(data, rows)?;
        for &i in rows {
            let a = data.treatment()[i];
            design.fill_row(data, i, a as f64, &mut full);
            let start = out.x.len();
            out.x.extend(keep.iter().map(|&j| full[j]));
            let xi = &out.x[start..];
            let eta: f64 = xi.iter().zip(&beta).map(|(x, b)| x * b).sum();
            let e = truncate(crate::glm::expit(eta), epsilon);
            let y = data.outcome()[i];
            let (w, h) = if a == 1 { (y / e, y * (1.0 - e) / e) } else { (-y / (1.0 - e), y * e / (1.0 - e)) };
            let resid = a as f64 - e;
            for c in 0..k {
                let v = resid * out.x[start + c];
                out.r.push(v);
            }
            out.w.push(w);
            out.h.push(h);
            out.e.push(e);
        }
        Ok(out)
    }

    fn group(&self) -> Result<GroupStats> {
        let n = self.w.len();
        let k = self.k;
        let mut info = DMatrix::zeros(k, k);
        let mut gram = DMatrix::zeros(k, k);
        for i in 0..n {
            let x = &self.x[i * k..(i + 1) * k];
            let r = &self.r[i * k..(i + 1) * k];
            let wt = self.e[i] * (1.0 - self.e[i]);
            for a in 0..k {
                for b in 0..=a {
                    info[(a, b)] += wt * x[a] * x[b];
                    gram[(a, b)] += r[a] * r[b];
                }
            }
        }
        symmetrize(&mut info);
        symmetrize(&mut gram);
        info /= n as f64;
        Ok(GroupStats { n: n as f64, inv: sym_inverse(info)?, gram })
    }
}

/// Per-row outcome-model terms: `delta = z(A=1) - z(A=0)` and `v = z ε`
/// over the retained columns, plus the retained coefficients.
#[derive(Debug, Clone)]
struct GRows {
    k: usize,
    eta: Vec<f64>,
    delta: Vec<f64>,
    v: Vec<f64>,
    z: Vec<f64>,
}

impl GRows {
    fn build(data: &Dataset, rows: &[usize], fit: &LinearFit) -> Result<Self> {
        let design = fit.design();
        let keep = kept_columns(design.width(), &fit.dropped);
        let k = keep.len();
        let eta: Vec<f64> = keep.iter().map(|&j| fit.coefficients[j]).collect();
        let q = design.width();
        let (mut z1, mut z0, mut zo) = (vec![0.0; q], vec![0.0; q], vec![0.0; q]);
        let n = rows.len();
        let mut out = GRows { k, delta: Vec::with_capacity(n * k), v: Vec::with_capacity(n * k), z: Vec::with_capacity(n * k), eta };
        fit.check_levels(data, rows)?;
        for &i in rows {
            let a = data.treatment()[i] as f64;
            design.fill_row(data, i, 1.0, &mut z1);
            design.fill_row(data, i, 0.0, &mut z0);
            design.fill_row(data, i, a, &mut zo);
            let fitted: f64 = keep.iter().zip(&out.eta).map(|(&j, b)| zo[j] * b).sum();
            let resid = data.outcome()[i] - fitted;
            for &j in &keep {
                out.delta.push(z1[j] - z0[j]);
                out.v.push(zo[j] * resid);
                out.z.push(zo[j]);
            }
        }
        Ok(out)
    }

    fn group(&self) -> Result<GroupStats> {
        let k = self.k;
        let n = self.v.len() / k.max(1);
        let mut info = DMatrix::zeros(k, k);
        let mut gram = DMatrix::zeros(k, k);
        for i in 0..n {
            let z = &self.z[i * k..(i + 1) * k];
            let v = &self.v[i * k..(i + 1) * k];
            for a in 0..k {
                for b in 0..=a {
                    info[(a, b)] += z[a] * z[b];
                    gram[(a, b)] += v[a] * v[b];
                }
            }
        }
        symmetrize(&mut info);
        symmetrize(&mut gram);
        info /= n as f64;
        Ok(GroupStats { n: n as f64, inv: sym_inverse(info)?, gram })
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for a in 0..k {
        for b in 0..a {
            m[(b, a)] = m[(a, b)];
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad(b: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    b.dot(&(m * b))
}

/// One child's rows within a block of precomputed per-row terms.
struct Side<'a, T> {
    rows: &'a T,
    pos: &'a [usize],
    group: &'a GroupStats,
}

/// IPW contrast with the sandwich variance. With `shared` the two sides use
/// one propensity fit (gradient `-(H_l - H_r)`); otherwise each side has its
/// own fit (gradients `-H_l` and `+H_r`).
fn ipw_sandwich(l: Side<'_, IpwRows>, r: Side<'_, IpwRows>, shared: bool) -> Result<SplitContrast> {
    let nl = l.pos.len() as f64;
    let nr = r.pos.len() as f64;
    let np = nl + nr;
    let (pl, pr) = (nl / np, nr / np);
    let k = l.rows.k;
    let mean = |s: &Side<'_, IpwRows>| -> (f64, DVector<f64>) {
        let mut tau = 0.0;
        let mut hbar = DVector::zeros(s.rows.k);
        for &i in s.pos {
            tau += s.rows.w[i];
            let x = &s.rows.x[i * s.rows.k..(i + 1) * s.rows.k];
            for c in 0..s.rows.k {
                hbar[c] += s.rows.h[i] * x[c];
            }
        }
        let n = s.pos.len() as f64;
        (tau / n, hbar / n)
    };
    let (tau_l, h_l) = mean(&l);
    let (tau_r, h_r) = mean(&r);
    let t = tau_l - tau_r;
    let (b_l, b_r) = if shared {
        let b = &l.group.inv * -(&h_l - &h_r);
        (b.clone(), b)
    } else {
        (&l.group.inv * -&h_l, &r.group.inv * &h_r)
    };

    let mut ss = 0.0;
    let mut cross_l = 0.0;
    let mut cross_r = 0.0;
    for &i in l.pos {
        let d = l.rows.w[i] / pl - t;
        ss += d * d;
        cross_l += d * dot(&l.rows.r[i * k..(i + 1) * k], b_l.as_slice());
    }
    let kr = r.rows.k;
    for &i in r.pos {
        let d = -r.rows.w[i] / pr - t;
        ss += d * d;
        cross_r += d * dot(&r.rows.r[i * kr..(i + 1) * kr], b_r.as_slice());
    }
    let ptau = pr * tau_l + pl * tau_r;
    let corr = ptau * ptau / (pl * pr);
    let base = (ss / np - corr) / np;
    let (adj, quad_part) = if shared {
        let ng = l.group.n;
        let qd = quad(&b_l, &l.group.gram) / (ng * ng);
        (qd + 2.0 * (cross_l + cross_r) / (np * ng), qd)
    } else {
        let (ngl, ngr) = (l.group.n, r.group.n);
        let ql = quad(&b_l, &l.group.gram) / (ngl * ngl);
        let qr = quad(&b_r, &r.group.gram) / (ngr * ngr);
        (ql + qr + 2.0 * cross_l / (np * ngl) + 2.0 * cross_r / (np * ngr), ql + qr)
    };
    SplitContrast::new(t, base + adj, ss / (np * np) + quad_part)
}

/// G-formula contrast with the sandwich variance, which includes the
/// outcome-regression estimation term.
fn g_sandwich(l: Side<'_, GRows>, r: Side<'_, GRows>, shared: bool) -> Result<SplitContrast> {
    let nl = l.pos.len() as f64;
    let nr = r.pos.len() as f64;
    let np = nl + nr;
    let (pl, pr) = (nl / np, nr / np);
    let mean_delta = |s: &Side<'_, GRows>| -> DVector<f64> {
        let k = s.rows.k;
        let mut m = DVector::zeros(k);
        for &i in s.pos {
            for c in 0..k {
                m[c] += s.rows.delta[i * k + c];
            }
        }
        m / s.pos.len() as f64
    };
    let dl = mean_delta(&l);
    let dr = mean_delta(&r);
    let tau_l = dot(dl.as_slice(), &l.rows.eta);
    let tau_r = dot(dr.as_slice(), &r.rows.eta);
    let t = tau_l - tau_r;
    let (b_l, b_r) = if shared {
        let b = &l.group.inv * (&dl - &dr);
        (b.clone(), b)
    } else {
        (&l.group.inv * &dl, &r.group.inv * -&dr)
    };
    let pass = |s: &Side<'_, GRows>, mean: &DVector<f64>, b: &DVector<f64>, sign: f64, p: f64| -> (f64, f64) {
        let k = s.rows.k;
        let (mut ss, mut cross) = (0.0, 0.0);
        for &i in s.pos {
            let row = &s.rows.delta[i * k..(i + 1) * k];
            // (delta_i - mean)·eta, so constant contrasts give exact zeros.
            let dev: f64 = row.iter().zip(mean.iter()).zip(&s.rows.eta).map(|((d, m), e)| (d - m) * e).sum();
            let psi = sign * dev / p;
            ss += psi * psi;
            cross += psi * dot(&s.rows.v[i * k..(i + 1) * k], b.as_slice());
        }
        (ss, cross)
    };
    let (ss_l, cross_l) = pass(&l, &dl, &b_l, 1.0, pl);
    let (ss_r, cross_r) = pass(&r, &dr, &b_r, -1.0, pr);
    let ss = ss_l + ss_r;
    let (adj, quad_part) = if shared {
        let ng = l.group.n;
        let qd = quad(&b_l, &l.group.gram) / (ng * ng);
        (qd + 2.0 * (cross_l + cross_r) / (np * ng), qd)
    } else {
        let (ngl, ngr) = (l.group.n, r.group.n);
        let ql = quad(&b_l, &l.group.gram) / (ngl * ngl);
        let qr = quad(&b_r, &r.group.gram) / (ngr * ngr);
        (ql + qr + 2.0 * cross_l / (np * ngl) + 2.0 * cross_r / (np * ngr), ql + qr)
    };
    SplitContrast::new(t, ss / (np * np) + adj, ss / (np * np) + quad_part)
}

/// Contrast of per-row contributions `d` with the influence variance.
fn influence_contrast(dl: &[f64], dr: &[f64]) -> Result<SplitContrast> {
    let nl = dl.len() as f64;
    let nr = dr.len() as f64;
    let np = nl + nr;
    let tau_l = dl.iter().sum::<f64>() / nl;
    let tau_r = dr.iter().sum::<f64>() / nr;
    let (pl, pr) = (nl / np, nr / np);
    let mut ss = 0.0;
    let mut scale = 0.0;
    for &d in dl {
        let psi = (d - tau_l) / pl;
        ss += psi * psi;
        scale += (d / pl) * (d / pl);
    }
    for &d in dr {
        let psi = -(d - tau_r) / pr;
        ss += psi * psi;
        scale += (d / pr) * (d / pr);
    }
    // Contributions are centered by construction, so the sum of squares is the sample variance numerator.
    let m = np;
    if m < 2.0 {
        return Err(CitError::Inadmissible("fewer than two influence contributions".into()));
    }
    let var = ss / (m - 1.0) / np;
    SplitContrast::new(tau_l - tau_r, var, scale / (m - 1.0) / np)
}

/// Running sums of one side's contributions, taken about a fixed `shift`
/// (any value near their mean) to limit cancellation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SideSums {
    pub n: usize,
    pub treated: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl SideSums {
    #[inline]
    pub fn add(&mut self, other: &SideSums) {
        self.n += other.n;
        self.treated += other.treated;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    #[inline]
    pub fn minus(&self, other: &SideSums) -> SideSums {
        SideSums {
            n: self.n - other.n,
            treated: self.treated - other.treated,
            sum: self.sum - other.sum,
            sum_sq: self.sum_sq - other.sum_sq,
        }
    }
}

/// [`influence_contrast`] from running sums of shifted contributions.
pub fn influence_contrast_sums(l: &SideSums, r: &SideSums, shift: f64) -> Result<SplitContrast> {
    if l.n == 0 || r.n == 0 {
        return Err(CitError::EmptySubgroup);
    }
    for s in [l, r] {
        if s.treated == 0 || s.treated == s.n {
            return Err(CitError::Inadmissible("a treatment arm is empty".into()));
        }
    }
    let (nl, nr) = (l.n as f64, r.n as f64);
    let np = nl + nr;
    if np < 2.0 {
        return Err(CitError::Inadmissible("fewer than two influence contributions".into()));
    }
    let (pl, pr) = (nl / np, nr / np);
    let (ml, mr) = (l.sum / nl, r.sum / nr);
    let ss_l = (l.sum_sq - nl * ml * ml).max(0.0);
    let ss_r = (r.sum_sq - nr * mr * mr).max(0.0);
    let ss = ss_l / (pl * pl) + ss_r / (pr * pr);
    let raw = |s: &SideSums| s.sum_sq + 2.0 * shift * s.sum + s.n as f64 * shift * shift;
    let scale = raw(l) / (pl * pl) + raw(r) / (pr * pr);
    SplitContrast::new(ml - mr, ss / (np - 1.0) / np, scale / (np - 1.0) / np)
}

fn contributions(kind: EstimatorKind, data: &Dataset, rows: &[usize], preds: &RowPredictions) -> Result<Vec<f64>> {
    let eff = effect_from_predictions(kind, data, rows, preds)?;
    if eff.degenerate {
        return Err(CitError::Inadmissible("a treatment arm is empty".into()));
    }
    Ok(eff.influence.iter().map(|v| v + eff.effect).collect())
}

// ---------------------------------------------------------------------------
// Node evaluator

/// Nuisance fit on all rows, shared by every node under scope `Whole`.
#[derive(Debug, Clone)]
pub struct WholeFit {
    pub models: Arc<NuisanceModels>,
    ipw_group: Option<Arc<GroupStats>>,
    g_group: Option<Arc<GroupStats>>,
}

impl WholeFit {
    pub fn new(data: &Dataset, cfg: &EstimatorConfig) -> Result<Self> {
        let rows: Vec<usize> = (0..data.n()).collect();
        let models = NuisanceModels::fit(data, &rows, cfg.kind, &cfg.specs, cfg.epsilon)?;
        Self::from_models(data, &rows, cfg, Arc::new(models))
    }

    /// Wraps already fitted models; group statistics are taken over `rows`.
    pub fn from_models(data: &Dataset, rows: &[usize], cfg: &EstimatorConfig, models: Arc<NuisanceModels>) -> Result<Self> {
        let mut ipw_group = None;
        let mut g_group = None;
        if cfg.variance != VarianceMethod::Influence {
            match cfg.kind {
                EstimatorKind::Ipw => {
                    let fit = models.propensity.as_ref().expect("propensity fitted");
                    ipw_group = Some(Arc::new(IpwRows::build(data, rows, fit, cfg.epsilon)?.group()?));
                }
                EstimatorKind::GFormula => {
                    let fit = models.outcome.as_ref().expect("outcome fitted");
                    g_group = Some(Arc::new(GRows::build(data, rows, fit)?.group()?));
                }
                EstimatorKind::DoublyRobust => {}
            }
        }
        Ok(WholeFit { models, ipw_group, g_group })
    }
}

enum Block {
    Ipw(IpwRows, Arc<GroupStats>),
    G(GRows, Arc<GroupStats>),
    Influence(Vec<f64>),
}

impl Block {
    /// Per-row terms over `rows` for models shared by both children.
    fn build(
        data: &Dataset,
        rows: &[usize],
        cfg: &EstimatorConfig,
        models: &NuisanceModels,
        shared_group: Option<Arc<GroupStats>>,
    ) -> Result<Self> {
        match (cfg.variance, cfg.kind) {
            (VarianceMethod::Influence, kind) => {
                let preds = models.predict(data, rows)?;
                let eff = effect_from_predictions(kind, data, rows, &preds)?;
                Ok(Block::Influence(eff.influence.iter().map(|v| v + eff.effect).collect()))
            }
            (_, EstimatorKind::Ipw) => {
                let fit = models.propensity.as_ref().ok_or_else(|| CitError::Config("propensity model required".into()))?;
                let block = IpwRows::build(data, rows, fit, cfg.epsilon)?;
                let group = match shared_group {
                    Some(g) => g,
                    None => Arc::new(block.group()?),
                };
                Ok(Block::Ipw(block, group))
            }
            (_, EstimatorKind::GFormula) => {
                let fit = models.outcome.as_ref().ok_or_else(|| CitError::Config("outcome model required".into()))?;
                let block = GRows::build(data, rows, fit)?;
                let group = match shared_group {
                    Some(g) => g,
                    None => Arc::new(block.group()?),
                };
                Ok(Block::G(block, group))
            }
            (_, EstimatorKind::DoublyRobust) => {
                Err(CitError::Config("the doubly robust estimator supports only influence variance".into()))
            }
        }
    }
}

fn contrast_of_blocks(l: &Block, lpos: &[usize], r: &Block, rpos: &[usize], shared: bool) -> Result<SplitContrast> {
    match (l, r) {
        (Block::Ipw(bl, gl), Block::Ipw(br, gr)) => ipw_sandwich(
            Side { rows: bl, pos: lpos, group: gl },
            Side { rows: br, pos: rpos, group: gr },
            shared,
        ),
        (Block::G(bl, gl), Block::G(br, gr)) => g_sandwich(
            Side { rows: bl, pos: lpos, group: gl },
            Side { rows: br, pos: rpos, group: gr },
            shared,
        ),
        (Block::Influence(dl), Block::Influence(dr)) => {
            let a: Vec<f64> = lpos.iter().map(|&i| dl[i]).collect();
            let b: Vec<f64> = rpos.iter().map(|&i| dr[i]).collect();
            influence_contrast(&a, &b)
        }
        _ => unreachable!("both sides are built with one configuration"),
    }
}

enum Mode {
    Shared(Block),
    Child,
    ChildFixed(Arc<NuisanceModels>, Arc<NuisanceModels>),
}

/// Scores candidate splits of one node. `rows` are dataset row indices;
/// candidates are given as a left-membership flag per node row.
pub struct NodeEvaluator<'a> {
    data: &'a Dataset,
    rows: Vec<usize>,
    cfg: &'a EstimatorConfig,
    mode: Mode,
}

impl<'a> NodeEvaluator<'a> {
    /// Evaluator following `cfg.scope`: the node's own fit for `Parent`,
    /// `whole` for `Whole`, per-candidate fits for `Child`.
    pub fn new(data: &'a Dataset, rows: Vec<usize>, cfg: &'a EstimatorConfig, whole: Option<&WholeFit>) -> Result<Self> {
        let mode = match cfg.scope {
            NuisanceScope::Child => Mode::Child,
            NuisanceScope::Parent => {
                let models = NuisanceModels::fit(data, &rows, cfg.kind, &cfg.specs, cfg.epsilon)?;
                Mode::Shared(Block::build(data, &rows, cfg, &models, None)?)
            }
            NuisanceScope::Whole => {
                let whole = whole.ok_or_else(|| CitError::Config("scope whole needs a whole-data fit".into()))?;
                let group = match cfg.kind {
                    EstimatorKind::Ipw => whole.ipw_group.clone(),
                    EstimatorKind::GFormula => whole.g_group.clone(),
                    EstimatorKind::DoublyRobust => None,
                };
                Mode::Shared(Block::build(data, &rows, cfg, &whole.models, group)?)
            }
        };
        Ok(NodeEvaluator { data, rows, cfg, mode })
    }

    /// Evaluator whose shared fit is the given models, with the sandwich
    /// statistics taken over this node's rows. Per-child mode ignores `models`.
    pub fn with_models(data: &'a Dataset, rows: Vec<usize>, cfg: &'a EstimatorConfig, models: &NuisanceModels) -> Result<Self> {
        let mode = match cfg.scope {
            NuisanceScope::Child => Mode::Child,
            _ => Mode::Shared(Block::build(data, &rows, cfg, models, None)?),
        };
        Ok(NodeEvaluator { data, rows, cfg, mode })
    }

    /// Per-child evaluator with fixed models for the two children.
    pub fn with_child_models(
        data: &'a Dataset,
        rows: Vec<usize>,
        cfg: &'a EstimatorConfig,
        left: Arc<NuisanceModels>,
        right: Arc<NuisanceModels>,
    ) -> Result<Self> {
        Ok(NodeEvaluator { data, rows, cfg, mode: Mode::ChildFixed(left, right) })
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Per-row contributions when the statistic depends on them only through
    /// side sums (shared models with influence variance), aligned with `rows`.
    pub fn influence_terms(&self) -> Option<&[f64]> {
        match &self.mode {
            Mode::Shared(Block::Influence(d)) => Some(d),
            _ => None,
        }
    }

    pub fn evaluate(&self, left: &[bool]) -> Result<SplitContrast> {
        debug_assert_eq!(left.len(), self.rows.len());
        let mut lpos = Vec::with_capacity(left.len());
        let mut rpos = Vec::with_capacity(left.len());
        for (k, &b) in left.iter().enumerate() {
            if b {
                lpos.push(k);
            } else {
                rpos.push(k);
            }
        }
        if lpos.is_empty() || rpos.is_empty() {
            return Err(CitError::EmptySubgroup);
        }
        match &self.mode {
            Mode::Shared(block) => {
                if let Block::Ipw(..) | Block::Influence(_) = block {
                    for pos in [&lpos, &rpos] {
                        let treated = pos.iter().filter(|&&k| self.data.treatment()[self.rows[k]] == 1).count();
                        if treated == 0 || treated == pos.len() {
                            return Err(CitError::Inadmissible("a treatment arm is empty".into()));
                        }
                    }
                }
                contrast_of_blocks(block, &lpos, block, &rpos, true)
            }
            Mode::Child | Mode::ChildFixed(..) => {
                let lrows: Vec<usize> = lpos.iter().map(|&k| self.rows[k]).collect();
                let rrows: Vec<usize> = rpos.iter().map(|&k| self.rows[k]).collect();
                let cfg = self.cfg;
                let fit = |rows: &[usize]| NuisanceModels::fit(self.data, rows, cfg.kind, &cfg.specs, cfg.epsilon);
                let (ml, mr) = match &self.mode {
                    Mode::ChildFixed(l, r) => ((**l).clone(), (**r).clone()),
                    _ => (fit(&lrows)?, fit(&rrows)?),
                };
                if cfg.variance == VarianceMethod::Influence {
                    let dl = contributions(cfg.kind, self.data, &lrows, &ml.predict(self.data, &lrows)?)?;
                    let dr = contributions(cfg.kind, self.data, &rrows, &mr.predict(self.data, &rrows)?)?;
                    return influence_contrast(&dl, &dr);
                }
                let bl = Block::build(self.data, &lrows, cfg, &ml, None)?;
                let br = Block::build(self.data, &rrows, cfg, &mr, None)?;
                let all_l: Vec<usize> = (0..lrows.len()).collect();
                let all_r: Vec<usize> = (0..rrows.len()).collect();
                contrast_of_blocks(&bl, &all_l, &br, &all_r, false)
            }
        }
    }
}

/// Scores the split of `mask_l ∪ mask_r` into the two masks. Under scope
/// `Whole` the nuisance models are fit on every row of `data`.
pub fn split_contrast(
    data: &Dataset,
    mask_l: &SubgroupMask,
    mask_r: &SubgroupMask,
    cfg: &EstimatorConfig,
) -> Result<SplitContrast> {
    cfg.validate()?;
    if !mask_l.is_disjoint(mask_r) {
        return Err(CitError::Config("child masks overlap".into()));
    }
    let union = mask_l.union(mask_r);
    let rows = union.indices();
    let left: Vec<bool> = rows.iter().map(|&i| mask_l.contains(i)).collect();
    let whole = match cfg.scope {
        NuisanceScope::Whole => Some(WholeFit::new(data, cfg)?),
        _ => None,
    };
    NodeEvaluator::new(data, rows, cfg, whole.as_ref())?.evaluate(&left)
}

fn ipw_cfg(epsilon: f64, scope: NuisanceScope, fit: &LogisticFit) -> EstimatorConfig {
    let mut cfg = EstimatorConfig::new(
        EstimatorKind::Ipw,
        scope,
        ModelSpecs { propensity: Some(fit.spec.clone()), outcome: None },
    );
    cfg.epsilon = epsilon;
    cfg
}

/// Variance of `T_IPW(l, r)` when the propensity model was fit on `l ∪ r`.
pub fn ipw_variance_pooled(
    data: &Dataset,
    mask_l: &SubgroupMask,
    mask_r: &SubgroupMask,
    fit: &LogisticFit,
    epsilon: f64,
) -> Result<f64> {
    let union = mask_l.union(mask_r);
    let rows = union.indices();
    let left: Vec<bool> = rows.iter().map(|&i| mask_l.contains(i)).collect();
    let cfg = ipw_cfg(epsilon, NuisanceScope::Parent, fit);
    let models = NuisanceModels { propensity: Some(fit.clone()), outcome: None, epsilon };
    Ok(NodeEvaluator::with_models(data, rows, &cfg, &models)?.evaluate(&left)?.variance)
}

/// Variance of `T_IPW(l, r)` when each child has its own propensity fit.
pub fn ipw_variance_per_child(
    data: &Dataset,
    mask_l: &SubgroupMask,
    mask_r: &SubgroupMask,
    fit_l: &LogisticFit,
    fit_r: &LogisticFit,
    epsilon: f64,
) -> Result<f64> {
    let (lrows, rrows) = (mask_l.indices(), mask_r.indices());
    let cfg = ipw_cfg(epsilon, NuisanceScope::Child, fit_l);
    let bl = Block::build(data, &lrows, &cfg, &NuisanceModels { propensity: Some(fit_l.clone()), outcome: None, epsilon }, None)?;
    let br = Block::build(data, &rrows, &cfg, &NuisanceModels { propensity: Some(fit_r.clone()), outcome: None, epsilon }, None)?;
    let all_l: Vec<usize> = (0..lrows.len()).collect();
    let all_r: Vec<usize> = (0..rrows.len()).collect();
    Ok(contrast_of_blocks(&bl, &all_l, &br, &all_r, false)?.variance)
}
