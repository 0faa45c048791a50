//! Typed observational datasets: covariates `X`, binary treatment `A`, outcome `Y`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CitError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Categorical { levels: Vec<String> },
    Ordinal { levels: Vec<String> },
}

impl CovariateKind {
    pub fn levels(&self) -> Option<&[String]> {
        match self {
            CovariateKind::Continuous => None,
            CovariateKind::Categorical { levels } | CovariateKind::Ordinal { levels } => {
                Some(levels)
            }
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, CovariateKind::Continuous)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

impl ColumnSpec {
    pub fn continuous(name: &str) -> Self {
        ColumnSpec { name: name.to_string(), kind: CovariateKind::Continuous }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: CovariateKind::Categorical { levels: levels.iter().map(|s| s.to_string()).collect() },
        }
    }

    pub fn ordinal(name: &str, levels: &[&str]) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: CovariateKind::Ordinal { levels: levels.iter().map(|s| s.to_string()).collect() },
        }
    }

    pub fn level_index(&self, label: &str) -> Option<u32> {
        self.kind.levels()?.iter().position(|l| l == label).map(|i| i as u32)
    }
}

/// Column layout of a dataset. Built through [`Schema::new`], which enforces
/// unique names and keeps treatment/outcome out of the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    pub treatment: String,
    pub outcome: String,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>, treatment: &str, outcome: &str) -> Result<Self> {
        let schema = Schema { columns, treatment: treatment.to_string(), outcome: outcome.to_string() };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(CitError::Config(format!("duplicate column name {:?}", col.name)));
            }
            if let Some(levels) = col.kind.levels() {
                if levels.is_empty() {
                    return Err(CitError::Config(format!("column {:?} has no levels", col.name)));
                }
                let distinct: HashSet<_> = levels.iter().collect();
                if distinct.len() != levels.len() {
                    return Err(CitError::Config(format!("column {:?} has duplicate levels", col.name)));
                }
            }
        }
        if self.treatment == self.outcome {
            return Err(CitError::Config("treatment and outcome columns must differ".into()));
        }
        for special in [&self.treatment, &self.outcome] {
            if seen.contains(special.as_str()) {
                return Err(CitError::Config(format!("{special:?} cannot be both a covariate and treatment/outcome")));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let schema: Schema = serde_json::from_reader(File::open(path)?)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    /// Schema with the named covariates removed.
    pub fn without(&self, drop: &[&str]) -> Schema {
        Schema {
            columns: self.columns.iter().filter(|c| !drop.contains(&c.name.as_str())).cloned().collect(),
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
        }
    }
}

/// Storage for one covariate. Categorical and ordinal cells hold the index of
/// their label in the schema's level list.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Levels(Vec<u32>),
}

/// A single covariate cell, used when routing rows that are not part of a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Num(f64),
    Level(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingPolicy {
    Reject,
    DropRows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    columns: Vec<Column>,
    treatment: Vec<u8>,
    outcome: Vec<f64>,
}

impl Dataset {
    pub fn new(schema: Schema, columns: Vec<Column>, treatment: Vec<u8>, outcome: Vec<f64>) -> Result<Self> {
        schema.validate()?;
        let n = treatment.len();
        if outcome.len() != n {
            return Err(CitError::Data("treatment and outcome lengths differ".into()));
        }
        if columns.len() != schema.columns.len() {
            return Err(CitError::Data("column count does not match schema".into()));
        }
        for (spec, col) in schema.columns.iter().zip(&columns) {
            match (col, &spec.kind) {
                (Column::Numeric(v), CovariateKind::Continuous) => {
                    if v.len() != n {
                        return Err(CitError::Data(format!("column {:?} has wrong length", spec.name)));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(CitError::Data(format!("column {:?} has non-finite values", spec.name)));
                    }
                }
                (Column::Levels(v), CovariateKind::Categorical { levels } | CovariateKind::Ordinal { levels }) => {
                    if v.len() != n {
                        return Err(CitError::Data(format!("column {:?} has wrong length", spec.name)));
                    }
                    if v.iter().any(|&l| l as usize >= levels.len()) {
                        return Err(CitError::Data(format!("column {:?} has out-of-range level", spec.name)));
                    }
                }
                _ => return Err(CitError::Data(format!("column {:?} storage does not match its kind", spec.name))),
            }
        }
        if let Some(row) = treatment.iter().position(|&a| a > 1) {
            return Err(CitError::InvalidTreatment { row, value: treatment[row].to_string() });
        }
        if let Some(row) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(CitError::Data(format!("non-finite outcome at row {row}")));
        }
        Ok(Dataset { schema, columns, treatment, outcome })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    #[inline]
    pub fn cell(&self, row: usize, j: usize) -> Cell {
        match &self.columns[j] {
            Column::Numeric(v) => Cell::Num(v[row]),
            Column::Levels(v) => Cell::Level(v[row]),
        }
    }

    pub fn row(&self, row: usize) -> Vec<Cell> {
        (0..self.columns.len()).map(|j| self.cell(row, j)).collect()
    }

    /// New dataset made of the given rows, in the given order (duplicates allowed).
    pub fn take_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
                Column::Levels(v) => Column::Levels(rows.iter().map(|&i| v[i]).collect()),
            })
            .collect();
        Dataset {
            schema: self.schema.clone(),
            columns,
            treatment: rows.iter().map(|&i| self.treatment[i]).collect(),
            outcome: rows.iter().map(|&i| self.outcome[i]).collect(),
        }
    }

    /// Dataset restricted to the named covariates being removed.
    pub fn drop_columns(&self, drop: &[&str]) -> Dataset {
        let keep: Vec<usize> = (0..self.schema.p())
            .filter(|&j| !drop.contains(&self.schema.columns[j].name.as_str()))
            .collect();
        Dataset {
            schema: self.schema.without(drop),
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.schema.columns.iter().map(|c| c.name.as_str()).collect();
        header.push(&self.schema.treatment);
        header.push(&self.schema.outcome);
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            record.clear();
            for (j, spec) in self.schema.columns.iter().enumerate() {
                record.push(format_cell(spec, self.cell(i, j)));
            }
            record.push(self.treatment[i].to_string());
            record.push(self.outcome[i].to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

pub fn format_cell(spec: &ColumnSpec, cell: Cell) -> String {
    match (cell, spec.kind.levels()) {
        (Cell::Num(x), _) => x.to_string(),
        (Cell::Level(l), Some(levels)) => levels[l as usize].clone(),
        (Cell::Level(l), None) => l.to_string(),
    }
}

pub fn is_missing(raw: &str) -> bool {
    let t = raw.trim();
    t.is_empty() || t == "NA"
}

/// Parses one covariate cell according to its declared kind.
pub fn parse_cell(spec: &ColumnSpec, raw: &str, row: usize) -> Result<Cell> {
    let t = raw.trim();
    match &spec.kind {
        CovariateKind::Continuous => {
            let x: f64 = t
                .parse()
                .map_err(|_| CitError::Data(format!("cannot parse {t:?} as a number in column {:?} at row {row}", spec.name)))?;
            if !x.is_finite() {
                return Err(CitError::Data(format!("non-finite value in column {:?} at row {row}", spec.name)));
            }
            Ok(Cell::Num(x))
        }
        CovariateKind::Categorical { .. } | CovariateKind::Ordinal { .. } => spec
            .level_index(t)
            .map(Cell::Level)
            .ok_or_else(|| CitError::UnseenLevel { column: spec.name.clone(), level: t.to_string() }),
    }
}

pub fn parse_treatment(raw: &str, row: usize) -> Result<u8> {
    match raw.trim() {
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        other => Err(CitError::InvalidTreatment { row, value: other.to_string() }),
    }
}

/// Reads an RFC-4180 CSV with a header row. Returns the dataset and the number
/// of rows dropped for missing cells (always 0 under [`MissingPolicy::Reject`]).
pub fn read_csv<R: Read>(reader: R, schema: &Schema, policy: MissingPolicy) -> Result<(Dataset, usize)> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CitError::Data(format!("header is missing column {name:?}")))
    };
    let cov_pos: Vec<usize> = schema.columns.iter().map(|c| find(&c.name)).collect::<Result<_>>()?;
    let a_pos = find(&schema.treatment)?;
    let y_pos = find(&schema.outcome)?;

    let mut columns: Vec<Column> = schema
        .columns
        .iter()
        .map(|c| if c.kind.is_continuous() { Column::Numeric(Vec::new()) } else { Column::Levels(Vec::new()) })
        .collect();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut dropped = 0usize;

    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let mut missing = None;
        for (spec, &pos) in schema.columns.iter().zip(&cov_pos) {
            if is_missing(record.get(pos).unwrap_or("")) {
                missing = Some(spec.name.clone());
                break;
            }
        }
        if missing.is_none() {
            if is_missing(record.get(a_pos).unwrap_or("")) {
                missing = Some(schema.treatment.clone());
            } else if is_missing(record.get(y_pos).unwrap_or("")) {
                missing = Some(schema.outcome.clone());
            }
        }
        if let Some(column) = missing {
            match policy {
                MissingPolicy::Reject => return Err(CitError::MissingValue { row, column }),
                MissingPolicy::DropRows => {
                    dropped += 1;
                    continue;
                }
            }
        }
        for ((spec, &pos), col) in schema.columns.iter().zip(&cov_pos).zip(columns.iter_mut()) {
            match (parse_cell(spec, &record[pos], row)?, col) {
                (Cell::Num(x), Column::Numeric(v)) => v.push(x),
                (Cell::Level(l), Column::Levels(v)) => v.push(l),
                _ => unreachable!("cell kind follows column kind"),
            }
        }
        treatment.push(parse_treatment(&record[a_pos], row)?);
        let y_raw = record[y_pos].trim();
        let y: f64 = y_raw
            .parse()
            .map_err(|_| CitError::Data(format!("cannot parse outcome {y_raw:?} at row {row}")))?;
        outcome.push(y);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} rows with missing values");
    }
    Ok((Dataset::new(schema.clone(), columns, treatment, outcome)?, dropped))
}

pub fn load_csv(path: &Path, schema: &Schema, policy: MissingPolicy) -> Result<(Dataset, usize)> {
    read_csv(File::open(path)?, schema, policy)
}

/// Membership indicator of a subgroup `w` over the `n` rows of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgroupMask {
    bits: Vec<bool>,
    size: usize,
}

impl SubgroupMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let size = bits.iter().filter(|&&b| b).count();
        SubgroupMask { bits, size }
    }

    pub fn full(n: usize) -> Self {
        SubgroupMask { bits: vec![true; n], size: n }
    }

    pub fn empty(n: usize) -> Self {
        SubgroupMask { bits: vec![false; n], size: 0 }
    }

    pub fn from_indices(n: usize, rows: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &i in rows {
            bits[i] = true;
        }
        Self::from_bits(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn complement(&self) -> Self {
        SubgroupMask { bits: self.bits.iter().map(|b| !b).collect(), size: self.bits.len() - self.size }
    }

    pub fn union(&self, other: &Self) -> Self {
        Self::from_bits(self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect())
    }

    pub fn intersect(&self, other: &Self) -> Self {
        Self::from_bits(self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect())
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        !self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }
}

/// `n(w)`: the number of observations in the subgroup.
pub fn subgroup_count(mask: &SubgroupMask) -> usize {
    mask.bits.iter().filter(|&&b| b).count()
}
