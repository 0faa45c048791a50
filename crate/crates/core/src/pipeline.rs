//! End-to-end fit: split rows, grow, prune, select.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{CitError, Result};
use crate::prune::{weakest_link_sequence, PruneSequence, DEFAULT_LAMBDA};
use crate::rng;
use crate::select::{select_final, SelectOptions, SelectionTrace};
use crate::tree::{grow_rows, GrowConfig, Tree};

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub lambda: f64,
    /// Share of rows used to build the tree; the rest select among pruned subtrees.
    pub train_frac: f64,
    pub select: SelectOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { lambda: DEFAULT_LAMBDA, train_frac: 0.8, select: SelectOptions::default() }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub max_tree: Tree,
    pub sequence: PruneSequence,
    pub selection: SelectionTrace,
    pub tree: Tree,
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
}

#[derive(Serialize)]
struct SelectionDoc<'a> {
    train_rows: usize,
    validation_rows: usize,
    #[serde(flatten)]
    trace: &'a SelectionTrace,
}

impl FitResult {
    pub fn selection_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SelectionDoc {
            train_rows: self.train_rows.len(),
            validation_rows: self.validation_rows.len(),
            trace: &self.selection,
        })?)
    }
}

/// Random build/validation partition of `0..n`, both sorted.
pub fn train_validation_split(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(CitError::Config(format!("train fraction must lie in (0, 1), got {train_frac}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split", 0));
    let n_train = ((n as f64) * train_frac).round() as usize;
    let (mut train, mut valid) = (idx[..n_train].to_vec(), idx[n_train..].to_vec());
    train.sort_unstable();
    valid.sort_unstable();
    if train.is_empty() || valid.is_empty() {
        return Err(CitError::InsufficientData(format!("{n} rows cannot be split at fraction {train_frac}")));
    }
    Ok((train, valid))
}

/// Fits a causal interaction tree on `data`.
pub fn fit(data: &Dataset, config: &GrowConfig, opts: &FitOptions) -> Result<FitResult> {
    config.validate()?;
    let (train_rows, validation_rows) = train_validation_split(data.n(), opts.train_frac, config.seed)?;
    let train = data.take_rows(&train_rows);
    let validation = data.take_rows(&validation_rows);
    let max_tree = grow_rows(&train, (0..train.n()).collect(), config)?;
    let sequence = weakest_link_sequence(&max_tree);
    let (tree, selection) = select_final(&sequence, &validation, opts.lambda, &config.estimator, opts.select)?;
    Ok(FitResult { max_tree, sequence, selection, tree, train_rows, validation_rows })
}
