//! Final tree selection on validation data and bootstrap intervals for a fixed tree.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CitError, Result};
use crate::estimators::{node_effect, EstimatorConfig, NodeEvaluator, NuisanceModels, NuisanceScope, WholeFit};
use crate::prune::PruneSequence;
use crate::rng;
use crate::tree::Tree;

pub const DEFAULT_BOOTSTRAP: usize = 1000;
const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SelectOptions {
    /// Score validation splits with the models fit during growth instead of refitting.
    pub reuse_training_fits: bool,
}

/// Validation statistic of every internal node of `tree`. Nodes whose
/// statistic cannot be computed on the validation rows get 0.
pub fn validation_statistics(
    tree: &Tree,
    validation: &Dataset,
    cfg: &EstimatorConfig,
    opts: SelectOptions,
) -> Result<BTreeMap<usize, f64>> {
    let routed = tree.route_all(validation);
    let whole = if cfg.scope == NuisanceScope::Whole && !opts.reuse_training_fits {
        match WholeFit::new(validation, cfg) {
            Ok(w) => Some(w),
            Err(e) if e.is_inadmissible() => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let internal = tree.internal_ids();
    let stats: Vec<Result<f64>> = internal
        .par_iter()
        .map(|&id| {
            let split = tree.node(id).split.as_ref().expect("internal");
            let rows = routed[&id].clone();
            let left: Vec<bool> = rows
                .iter()
                .map(|&i| routed[&split.left].binary_search(&i).is_ok())
                .collect();
            let evaluator = if opts.reuse_training_fits {
                let models = tree.node(id).models.as_ref().ok_or_else(|| {
                    CitError::Config("reusing training fits needs a tree grown in this process".into())
                })?;
                if cfg.scope == NuisanceScope::Child {
                    let ml = tree.node(split.left).models.clone();
                    let mr = tree.node(split.right).models.clone();
                    match (ml, mr) {
                        (Some(ml), Some(mr)) => NodeEvaluator::with_child_models(validation, rows, cfg, ml, mr),
                        _ => return Ok(0.0),
                    }
                } else {
                    NodeEvaluator::with_models(validation, rows, cfg, models)
                }
            } else if cfg.scope == NuisanceScope::Whole {
                match &whole {
                    Some(w) => NodeEvaluator::new(validation, rows, cfg, Some(w)),
                    None => return Ok(0.0),
                }
            } else {
                NodeEvaluator::new(validation, rows, cfg, None)
            };
            let evaluator = match evaluator {
                Ok(e) => e,
                Err(e) if e.is_inadmissible() || matches!(e, CitError::UnseenLevel { .. }) => return Ok(0.0),
                Err(e) => return Err(e),
            };
            match evaluator.evaluate(&left) {
                Ok(c) => Ok(c.statistic),
                Err(e) if e.is_inadmissible() || matches!(e, CitError::UnseenLevel { .. }) => Ok(0.0),
                Err(e) => Err(e),
            }
        })
        .collect();
    internal.into_iter().zip(stats).map(|(id, s)| s.map(|v| (id, v))).collect()
}

/// Split complexity of `candidate` with statistics recomputed on `validation`.
pub fn validation_complexity(
    candidate: &Tree,
    validation: &Dataset,
    lambda: f64,
    cfg: &EstimatorConfig,
    opts: SelectOptions,
) -> Result<f64> {
    let stats = validation_statistics(candidate, validation, cfg, opts)?;
    Ok(crate::prune::split_complexity(candidate, lambda, &stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub internal_nodes: usize,
    pub complexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub lambda: f64,
    pub candidates: Vec<CandidateScore>,
    pub chosen: usize,
}

/// Index of the candidate with the largest complexity; ties go to the smaller tree.
pub fn argmax_smallest(scores: &[CandidateScore]) -> usize {
    let mut best = 0;
    for (k, s) in scores.iter().enumerate().skip(1) {
        let b = &scores[best];
        if s.complexity > b.complexity || (s.complexity == b.complexity && s.internal_nodes < b.internal_nodes) {
            best = k;
        }
    }
    best
}

/// Picks the element of `sequence` maximizing the validation split complexity.
pub fn select_final(
    sequence: &PruneSequence,
    validation: &Dataset,
    lambda: f64,
    cfg: &EstimatorConfig,
    opts: SelectOptions,
) -> Result<(Tree, SelectionTrace)> {
    let first = sequence.trees.first().ok_or_else(|| CitError::Config("empty prune sequence".into()))?;
    // Every candidate is a subtree of the first, so its nodes keep their validation statistic.
    let stats = validation_statistics(first, validation, cfg, opts)?;
    let candidates: Vec<CandidateScore> = sequence
        .trees
        .iter()
        .enumerate()
        .map(|(index, t)| CandidateScore {
            index,
            internal_nodes: t.internal_count(),
            complexity: crate::prune::split_complexity(t, lambda, &stats),
        })
        .collect();
    let chosen = argmax_smallest(&candidates);
    Ok((sequence.trees[chosen].clone(), SelectionTrace { lambda, candidates, chosen }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalInterval {
    pub id: usize,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub dropped: usize,
    pub level: f64,
    pub terminals: Vec<TerminalInterval>,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Terminal effects of the frozen `tree` on `data`, estimated as in growth.
fn terminal_effects(tree: &Tree, data: &Dataset, terminals: &[usize], groups: &BTreeMap<usize, Vec<usize>>) -> Result<Vec<f64>> {
    let cfg = &tree.config.estimator;
    let whole = if cfg.scope == NuisanceScope::Whole {
        let rows: Vec<usize> = (0..data.n()).collect();
        Some(Arc::new(NuisanceModels::fit(data, &rows, cfg.kind, &cfg.specs, cfg.epsilon)?))
    } else {
        None
    };
    terminals
        .iter()
        .map(|id| {
            let rows = &groups[id];
            if rows.is_empty() {
                return Err(CitError::EmptySubgroup);
            }
            let models = match &whole {
                Some(m) => m.clone(),
                None => Arc::new(NuisanceModels::fit(data, rows, cfg.kind, &cfg.specs, cfg.epsilon)?),
            };
            let eff = node_effect(cfg.kind, data, rows, &models)?;
            if eff.degenerate {
                return Err(CitError::Inadmissible("empty treatment arm in a terminal node".into()));
            }
            Ok(eff.effect)
        })
        .collect()
}

/// Nonparametric bootstrap of the terminal effects of a fixed tree with
/// percentile intervals at `level`.
pub fn bootstrap_effects(tree: &Tree, data: &Dataset, b: usize, level: f64, seed: u64) -> Result<BootstrapResult> {
    if b < 1 {
        return Err(CitError::Config("bootstrap needs at least one replicate".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(CitError::Config(format!("interval level must lie in (0, 1), got {level}")));
    }
    let terminals = tree.terminal_ids();
    let terminal_of: Vec<usize> = (0..data.n()).map(|i| tree.terminal_of(data, i)).collect();
    let group = |rows: &[usize]| -> BTreeMap<usize, Vec<usize>> {
        let mut g: BTreeMap<usize, Vec<usize>> = terminals.iter().map(|&t| (t, Vec::new())).collect();
        for (k, &i) in rows.iter().enumerate() {
            g.get_mut(&terminal_of[i]).expect("terminal").push(k);
        }
        g
    };
    let all: Vec<usize> = (0..data.n()).collect();
    let point = terminal_effects(tree, data, &terminals, &group(&all))?;

    let n = data.n();
    let draws: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(seed, "bootstrap", rep as u64);
            for _ in 0..MAX_REDRAWS {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let sample = data.take_rows(&idx);
                match terminal_effects(tree, &sample, &terminals, &group(&idx)) {
                    Ok(v) => return Some(v),
                    Err(_) => continue,
                }
            }
            None
        })
        .collect();
    let kept: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let dropped = b - kept.len();
    if kept.is_empty() {
        return Err(CitError::Inadmissible("every bootstrap replicate failed".into()));
    }
    if dropped > 0 {
        log::warn!("{dropped} bootstrap replicates dropped after {MAX_REDRAWS} redraws");
    }
    let alpha = 1.0 - level;
    let intervals = terminals
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            let mut v: Vec<f64> = kept.iter().map(|r| r[t]).collect();
            v.sort_by(f64::total_cmp);
            TerminalInterval {
                id,
                point: point[t],
                lower: quantile_sorted(&v, alpha / 2.0),
                upper: quantile_sorted(&v, 1.0 - alpha / 2.0),
            }
        })
        .collect();
    Ok(BootstrapResult { replicates: kept.len(), dropped, level, terminals: intervals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&[7.0], 0.025), 7.0);
    }

    #[test]
    fn ties_prefer_smaller_trees() {
        let s = |internal_nodes, complexity| CandidateScore { index: 0, internal_nodes, complexity };
        assert_eq!(argmax_smallest(&[s(3, -1.0), s(1, -0.5), s(0, 0.0)]), 2);
        assert_eq!(argmax_smallest(&[s(2, 4.0), s(1, 4.0), s(0, 0.0)]), 1);
        assert_eq!(argmax_smallest(&[s(2, 5.0), s(1, 4.0), s(0, 0.0)]), 0);
    }
}
