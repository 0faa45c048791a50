//! Linear and logistic regression for the nuisance models.
//!
//! Model matrices are described by a [`DesignSpec`], a small text grammar
//! documented in `docs/design-spec.md`:
//!
//! ```text
//! 1 + A + I(x1<0) + exp(x2) + A:I(x4>0) + cube(x5)
//! ```

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::data::{Column, CovariateKind, Dataset, Schema, SubgroupMask};
use crate::error::{CitError, Result};

const RANK_TOL: f64 = 1e-9;
pub const LOGISTIC_TOL: f64 = 1e-8;
pub const LOGISTIC_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    #[inline]
    fn eval(self, x: f64, c: f64) -> bool {
        match self {
            CmpOp::Lt => x < c,
            CmpOp::Le => x <= c,
            CmpOp::Gt => x > c,
            CmpOp::Ge => x >= c,
        }
    }
}

/// A covariate-derived quantity.
#[derive(Debug, Clone, PartialEq)]
pub enum Atom {
    Var(String),
    Exp(String),
    Cube(String),
    Cmp { var: String, op: CmpOp, value: f64 },
    In { var: String, levels: Vec<String> },
}

impl Atom {
    pub fn var(&self) -> &str {
        match self {
            Atom::Var(v) | Atom::Exp(v) | Atom::Cube(v) => v,
            Atom::Cmp { var, .. } | Atom::In { var, .. } => var,
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Var(v) => write!(f, "{v}"),
            Atom::Exp(v) => write!(f, "exp({v})"),
            Atom::Cube(v) => write!(f, "cube({v})"),
            Atom::Cmp { var, op, value } => write!(f, "I({var}{}{value})", op.symbol()),
            Atom::In { var, levels } => write!(f, "I({var} in {{{}}})", levels.join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Intercept,
    Treatment,
    Main(Atom),
    /// Product of the treatment indicator with an atom.
    Treated(Atom),
}

/// Parsed model formula. The intercept is always present exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    terms: Vec<Term>,
    treatment: String,
}

impl DesignSpec {
    pub fn parse(text: &str, treatment: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for raw in split_top_level(text)? {
            let raw = raw.trim();
            if raw.is_empty() {
                return Err(CitError::Spec(format!("empty term in {text:?}")));
            }
            terms.push(parse_term(raw, treatment)?);
        }
        Self::from_terms(terms, treatment)
    }

    pub fn from_terms(mut terms: Vec<Term>, treatment: &str) -> Result<Self> {
        let n_int = terms.iter().filter(|t| **t == Term::Intercept).count();
        if n_int > 1 {
            return Err(CitError::Spec("intercept listed more than once".into()));
        }
        terms.retain(|t| *t != Term::Intercept);
        terms.insert(0, Term::Intercept);
        let mut seen = HashSet::new();
        for t in &terms {
            let key = term_text(t, treatment);
            if !seen.insert(key.clone()) {
                return Err(CitError::Spec(format!("duplicate term {key}")));
            }
        }
        Ok(DesignSpec { terms, treatment: treatment.to_string() })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn treatment(&self) -> &str {
        &self.treatment
    }

    /// True when some term depends on the treatment indicator.
    pub fn uses_treatment(&self) -> bool {
        self.terms.iter().any(|t| matches!(t, Term::Treatment | Term::Treated(_)))
    }
}

impl fmt::Display for DesignSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(|t| term_text(t, &self.treatment)).collect();
        write!(f, "{}", parts.join(" + "))
    }
}

fn term_text(t: &Term, treatment: &str) -> String {
    match t {
        Term::Intercept => "1".into(),
        Term::Treatment => treatment.into(),
        Term::Main(a) => a.to_string(),
        Term::Treated(a) => format!("{treatment}:{a}"),
    }
}

fn split_top_level(text: &str) -> Result<Vec<&str>> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        match ch {
            '(' | '{' => depth += 1,
            ')' | '}' => {
                depth -= 1;
                if depth < 0 {
                    return Err(CitError::Spec(format!("unbalanced brackets in {text:?}")));
                }
            }
            '+' if depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(CitError::Spec(format!("unbalanced brackets in {text:?}")));
    }
    parts.push(&text[start..]);
    Ok(parts)
}

fn is_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_term(raw: &str, treatment: &str) -> Result<Term> {
    if raw == "1" {
        return Ok(Term::Intercept);
    }
    if raw == treatment {
        return Ok(Term::Treatment);
    }
    if let Some((lhs, rhs)) = raw.split_once(':') {
        if lhs.trim() != treatment {
            return Err(CitError::Spec(format!("interaction {raw:?} must have the form {treatment}:term")));
        }
        let atom = parse_atom(rhs.trim())?;
        if atom.var() == treatment {
            return Err(CitError::Spec(format!("treatment interacted with itself in {raw:?}")));
        }
        return Ok(Term::Treated(atom));
    }
    Ok(Term::Main(parse_atom(raw)?))
}

fn inner<'a>(raw: &'a str, head: &str) -> Option<&'a str> {
    raw.strip_prefix(head)?.strip_suffix(')').map(str::trim)
}

fn parse_atom(raw: &str) -> Result<Atom> {
    let bad = || CitError::Spec(format!("cannot parse term {raw:?}"));
    let name = |s: &str| -> Result<String> {
        let s = s.trim();
        if is_name(s) {
            Ok(s.to_string())
        } else {
            Err(CitError::Spec(format!("invalid column name {s:?} in {raw:?}")))
        }
    };
    if let Some(v) = inner(raw, "exp(") {
        return Ok(Atom::Exp(name(v)?));
    }
    if let Some(v) = inner(raw, "cube(") {
        return Ok(Atom::Cube(name(v)?));
    }
    if let Some(body) = inner(raw, "I(") {
        if let Some((var, set)) = body.split_once(" in ") {
            let set = set.trim().strip_prefix('{').and_then(|s| s.strip_suffix('}')).ok_or_else(bad)?;
            let levels: Vec<String> = set.split(',').map(|l| l.trim().to_string()).collect();
            if levels.iter().any(|l| l.is_empty()) {
                return Err(bad());
            }
            return Ok(Atom::In { var: name(var)?, levels });
        }
        for (sym, op) in [("<=", CmpOp::Le), (">=", CmpOp::Ge), ("<", CmpOp::Lt), (">", CmpOp::Gt)] {
            if let Some((var, num)) = body.split_once(sym) {
                let value: f64 = num.trim().parse().map_err(|_| bad())?;
                if !value.is_finite() {
                    return Err(bad());
                }
                return Ok(Atom::Cmp { var: name(var)?, op, value });
            }
        }
        return Err(bad());
    }
    if is_name(raw) {
        return Ok(Atom::Var(raw.to_string()));
    }
    Err(bad())
}

#[derive(Debug, Clone)]
enum Source {
    One,
    Treat,
    Num(usize),
    Exp(usize),
    Cube(usize),
    Cmp(usize, CmpOp, f64),
    Dummy(usize, u32),
    LevelIn(usize, Vec<bool>),
}

#[derive(Debug, Clone)]
struct DesignColumn {
    source: Source,
    treated: bool,
    name: String,
}

/// A [`DesignSpec`] resolved against a schema: one entry per model-matrix column.
#[derive(Debug, Clone)]
pub struct Design {
    columns: Vec<DesignColumn>,
}

impl Design {
    pub fn compile(spec: &DesignSpec, schema: &Schema) -> Result<Self> {
        if spec.treatment() != schema.treatment {
            return Err(CitError::Spec(format!(
                "spec treatment {:?} does not match schema treatment {:?}",
                spec.treatment(),
                schema.treatment
            )));
        }
        let mut columns = Vec::new();
        for term in spec.terms() {
            match term {
                Term::Intercept => columns.push(DesignColumn { source: Source::One, treated: false, name: "1".into() }),
                Term::Treatment => {
                    columns.push(DesignColumn { source: Source::Treat, treated: false, name: spec.treatment().into() })
                }
                Term::Main(atom) => columns.extend(compile_atom(atom, schema, false, spec.treatment())?),
                Term::Treated(atom) => columns.extend(compile_atom(atom, schema, true, spec.treatment())?),
            }
        }
        Ok(Design { columns })
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Writes the model-matrix row for observation `i`, with treatment value `a`.
    #[inline]
    pub fn fill_row(&self, data: &Dataset, i: usize, a: f64, out: &mut [f64]) {
        for (slot, col) in out.iter_mut().zip(&self.columns) {
            let base = match &col.source {
                Source::One => 1.0,
                Source::Treat => a,
                Source::Num(j) => num(data, *j, i),
                Source::Exp(j) => num(data, *j, i).exp(),
                Source::Cube(j) => num(data, *j, i).powi(3),
                Source::Cmp(j, op, c) => indicator(op.eval(num(data, *j, i), *c)),
                Source::Dummy(j, l) => indicator(level(data, *j, i) == *l),
                Source::LevelIn(j, set) => indicator(set[level(data, *j, i) as usize]),
            };
            *slot = if col.treated { base * a } else { base };
        }
    }

    /// Row-major model matrix for `rows`; `a_override` replaces the observed treatment.
    pub fn matrix(&self, data: &Dataset, rows: &[usize], a_override: Option<u8>) -> DMatrix<f64> {
        let q = self.width();
        let mut buf = vec![0.0; rows.len() * q];
        for (k, &i) in rows.iter().enumerate() {
            let a = a_override.unwrap_or(data.treatment()[i]) as f64;
            self.fill_row(data, i, a, &mut buf[k * q..(k + 1) * q]);
        }
        DMatrix::from_row_slice(rows.len(), q, &buf)
    }

    fn dummy_columns(&self) -> HashSet<usize> {
        self.columns
            .iter()
            .filter_map(|c| match c.source {
                Source::Dummy(j, _) => Some(j),
                _ => None,
            })
            .collect()
    }

    fn seen_levels(&self, data: &Dataset, rows: &[usize]) -> Vec<(usize, Vec<bool>)> {
        let mut cols: Vec<usize> = self.dummy_columns().into_iter().collect();
        cols.sort_unstable();
        cols.into_iter()
            .map(|j| {
                let k = data.schema().columns[j].kind.levels().map_or(0, |l| l.len());
                let mut seen = vec![false; k];
                for &i in rows {
                    seen[level(data, j, i) as usize] = true;
                }
                (j, seen)
            })
            .collect()
    }
}

#[inline]
fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn num(data: &Dataset, j: usize, i: usize) -> f64 {
    match data.column(j) {
        Column::Numeric(v) => v[i],
        Column::Levels(v) => v[i] as f64,
    }
}

#[inline]
fn level(data: &Dataset, j: usize, i: usize) -> u32 {
    match data.column(j) {
        Column::Levels(v) => v[i],
        Column::Numeric(_) => 0,
    }
}

fn compile_atom(atom: &Atom, schema: &Schema, treated: bool, treatment: &str) -> Result<Vec<DesignColumn>> {
    let var = atom.var();
    let j = schema
        .column_index(var)
        .ok_or_else(|| CitError::Spec(format!("term {atom} refers to unknown covariate {var:?}")))?;
    let kind = &schema.columns[j].kind;
    let prefix = if treated { format!("{treatment}:") } else { String::new() };
    let one = |source: Source| vec![DesignColumn { source, treated, name: format!("{prefix}{atom}") }];
    let need_numeric = || -> Result<()> {
        if kind.is_continuous() {
            Ok(())
        } else {
            Err(CitError::Spec(format!("term {atom} needs a continuous covariate")))
        }
    };
    match atom {
        Atom::Var(_) => match kind {
            CovariateKind::Continuous => Ok(one(Source::Num(j))),
            CovariateKind::Categorical { levels } | CovariateKind::Ordinal { levels } => Ok(levels
                .iter()
                .enumerate()
                .skip(1)
                .map(|(l, label)| DesignColumn {
                    source: Source::Dummy(j, l as u32),
                    treated,
                    name: format!("{prefix}{var}[{label}]"),
                })
                .collect()),
        },
        Atom::Exp(_) => {
            need_numeric()?;
            Ok(one(Source::Exp(j)))
        }
        Atom::Cube(_) => {
            need_numeric()?;
            Ok(one(Source::Cube(j)))
        }
        Atom::Cmp { op, value, .. } => {
            need_numeric()?;
            Ok(one(Source::Cmp(j, *op, *value)))
        }
        Atom::In { levels, .. } => {
            let all = kind
                .levels()
                .ok_or_else(|| CitError::Spec(format!("term {atom} needs a categorical or ordinal covariate")))?;
            let mut set = vec![false; all.len()];
            for l in levels {
                let idx = all
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| CitError::Spec(format!("level {l:?} not declared for {var:?}")))?;
                set[idx] = true;
            }
            Ok(one(Source::LevelIn(j, set)))
        }
    }
}

/// Indices of a maximal set of linearly independent columns, scanning left to
/// right so that earlier terms take precedence (modified Gram-Schmidt on
/// unit-normalized columns).
pub fn independent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let (n, q) = x.shape();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..q {
        let col = x.column(j);
        let norm = col.norm();
        if norm == 0.0 || !norm.is_finite() {
            continue;
        }
        let mut v: DVector<f64> = col / norm;
        for b in &basis {
            let d = b.dot(&v);
            v.axpy(-d, b, 1.0);
        }
        // A second pass keeps the orthogonalization accurate for nearly dependent columns.
        for b in &basis {
            let d = b.dot(&v);
            v.axpy(-d, b, 1.0);
        }
        let r = v.norm();
        if r > RANK_TOL * (n as f64).sqrt().max(1.0) && basis.len() < n {
            basis.push(v / r);
            keep.push(j);
        }
    }
    keep
}

fn select_columns(x: &DMatrix<f64>, keep: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), keep.len(), |i, k| x[(i, keep[k])])
}

fn expand(q: usize, keep: &[usize], beta: &DVector<f64>) -> Vec<f64> {
    let mut full = vec![0.0; q];
    for (k, &j) in keep.iter().enumerate() {
        full[j] = beta[k];
    }
    full
}

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub spec: DesignSpec,
    design: Design,
    /// Full-width coefficients; dropped columns hold 0.
    pub coefficients: Vec<f64>,
    pub rank: usize,
    pub dropped: Vec<usize>,
    seen: Vec<(usize, Vec<bool>)>,
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub spec: DesignSpec,
    design: Design,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub dropped: Vec<usize>,
    seen: Vec<(usize, Vec<bool>)>,
}

pub fn fit_ols(data: &Dataset, mask: &SubgroupMask, spec: &DesignSpec) -> Result<LinearFit> {
    fit_ols_rows(data, &mask.indices(), spec)
}

/// Least squares of the outcome on the design columns over `rows`.
pub fn fit_ols_rows(data: &Dataset, rows: &[usize], spec: &DesignSpec) -> Result<LinearFit> {
    let design = Design::compile(spec, data.schema())?;
    let x = design.matrix(data, rows, None);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| data.outcome()[i]));
    let keep = independent_columns(&x);
    if keep.is_empty() || rows.len() < design.width() {
        return Err(CitError::InsufficientData(format!(
            "{} rows for a model of width {}",
            rows.len(),
            design.width()
        )));
    }
    let xk = select_columns(&x, &keep);
    let qr = xk.qr();
    let qty = qr.q().transpose() * &y;
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| CitError::InsufficientData("singular least-squares system".into()))?;
    let q = design.width();
    let dropped: Vec<usize> = (0..q).filter(|j| !keep.contains(j)).collect();
    if !dropped.is_empty() {
        log::debug!("ols dropped collinear columns {dropped:?}");
    }
    let seen = design.seen_levels(data, rows);
    Ok(LinearFit {
        spec: spec.clone(),
        coefficients: expand(q, &keep, &beta),
        rank: keep.len(),
        dropped,
        design,
        seen,
    })
}

pub fn fit_logistic(data: &Dataset, mask: &SubgroupMask, spec: &DesignSpec) -> Result<LogisticFit> {
    fit_logistic_rows(data, &mask.indices(), spec)
}

/// Maximum-likelihood logistic regression of the treatment by IRLS.
pub fn fit_logistic_rows(data: &Dataset, rows: &[usize], spec: &DesignSpec) -> Result<LogisticFit> {
    let design = Design::compile(spec, data.schema())?;
    let a: Vec<f64> = rows.iter().map(|&i| data.treatment()[i] as f64).collect();
    let treated = a.iter().filter(|&&v| v == 1.0).count();
    if treated == 0 || treated == rows.len() {
        return Err(CitError::DegenerateResponse(format!("{treated} of {} rows treated", rows.len())));
    }
    let x = design.matrix(data, rows, None);
    let keep = independent_columns(&x);
    if rows.len() < design.width() {
        return Err(CitError::InsufficientData(format!("{} rows for a model of width {}", rows.len(), design.width())));
    }
    let xk = select_columns(&x, &keep);
    let (n, k) = xk.shape();
    let mut beta = DVector::zeros(k);
    let mut converged = false;
    let mut iterations = 0;
    let mut xtw = DMatrix::zeros(k, n);
    let mut z = DVector::zeros(n);
    while iterations < LOGISTIC_MAX_ITER {
        iterations += 1;
        let eta = &xk * &beta;
        for i in 0..n {
            let p = expit(eta[i]);
            // p(1-p) underflows to 0 long before eta is extreme; floor it
            let t = (-eta[i].abs()).exp();
            let w = (t / ((1.0 + t) * (1.0 + t))).max(f64::EPSILON);
            if !w.is_finite() {
                return Err(CitError::LogisticFailed("non-finite working weights".into()));
            }
            z[i] = eta[i] + (a[i] - p) / w;
            for c in 0..k {
                xtw[(c, i)] = xk[(i, c)] * w;
            }
        }
        let info = &xtw * &xk;
        let chol = info
            .cholesky()
            .ok_or_else(|| CitError::LogisticFailed("information matrix not positive definite".into()))?;
        let next = chol.solve(&(&xtw * &z));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(CitError::LogisticFailed("non-finite coefficients".into()));
        }
        let change = (&next - &beta).amax();
        beta = next;
        if change < LOGISTIC_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CitError::LogisticFailed(format!("no convergence after {LOGISTIC_MAX_ITER} iterations")));
    }
    let q = design.width();
    let seen = design.seen_levels(data, rows);
    Ok(LogisticFit {
        spec: spec.clone(),
        coefficients: expand(q, &keep, &beta),
        converged,
        iterations,
        dropped: (0..q).filter(|j| !keep.contains(j)).collect(),
        design,
        seen,
    })
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Models that map a model-matrix row to a mean.
pub trait MeanModel {
    fn design(&self) -> &Design;
    fn coefficients(&self) -> &[f64];
    fn link(&self, eta: f64) -> f64;
    fn seen_levels(&self) -> &[(usize, Vec<bool>)];

    fn check_levels(&self, data: &Dataset, rows: &[usize]) -> Result<()> {
        for (j, seen) in self.seen_levels() {
            for &i in rows {
                let l = level(data, *j, i);
                if !seen[l as usize] {
                    let spec = &data.schema().columns[*j];
                    let label = spec.kind.levels().map_or_else(|| l.to_string(), |ls| ls[l as usize].clone());
                    return Err(CitError::UnseenLevel { column: spec.name.clone(), level: label });
                }
            }
        }
        Ok(())
    }

    fn predict_rows(&self, data: &Dataset, rows: &[usize], a_override: Option<u8>) -> Result<Vec<f64>> {
        self.check_levels(data, rows)?;
        let design = self.design();
        let beta = self.coefficients();
        let mut row = vec![0.0; design.width()];
        Ok(rows
            .iter()
            .map(|&i| {
                let a = a_override.unwrap_or(data.treatment()[i]) as f64;
                design.fill_row(data, i, a, &mut row);
                self.link(row.iter().zip(beta).map(|(x, b)| x * b).sum())
            })
            .collect())
    }
}

impl MeanModel for LinearFit {
    fn design(&self) -> &Design {
        &self.design
    }
    fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
    fn link(&self, eta: f64) -> f64 {
        eta
    }
    fn seen_levels(&self) -> &[(usize, Vec<bool>)] {
        &self.seen
    }
}

impl MeanModel for LogisticFit {
    fn design(&self) -> &Design {
        &self.design
    }
    fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
    fn link(&self, eta: f64) -> f64 {
        expit(eta)
    }
    fn seen_levels(&self) -> &[(usize, Vec<bool>)] {
        &self.seen
    }
}

/// Per-masked-row predicted means, optionally with the treatment fixed at `a`.
pub fn predict_mean<M: MeanModel>(
    fit: &M,
    data: &Dataset,
    mask: &SubgroupMask,
    treatment_override: Option<u8>,
) -> Result<Vec<f64>> {
    fit.predict_rows(data, &mask.indices(), treatment_override)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnSpec, Schema};

    fn dataset(x: Vec<f64>, a: Vec<u8>, y: Vec<f64>) -> Dataset {
        let schema = Schema::new(vec![ColumnSpec::continuous("x")], "A", "y").unwrap();
        Dataset::new(schema, vec![Column::Numeric(x)], a, y).unwrap()
    }

    #[test]
    fn parse_and_display_round_trip() {
        let text = "1 + A + I(x1<0) + exp(x2) + A:I(x4>0) + cube(x5) + I(g in {B,D})";
        let spec = DesignSpec::parse(text, "A").unwrap();
        assert_eq!(spec.to_string(), text);
        assert_eq!(DesignSpec::parse(&spec.to_string(), "A").unwrap(), spec);
    }

    #[test]
    fn intercept_is_implicit_and_unique() {
        let spec = DesignSpec::parse("x1 + A", "A").unwrap();
        assert_eq!(spec.terms()[0], Term::Intercept);
        assert_eq!(spec.to_string(), "1 + x1 + A");
        assert!(DesignSpec::parse("1 + x1 + 1", "A").is_err());
        assert!(DesignSpec::parse("x1 + x1", "A").is_err());
    }

    #[test]
    fn malformed_specs_are_rejected() {
        for bad in ["x1 +", "exp(x1", "I(x1 ~ 3)", "B:x1", "A:A", "I(x1<abc)", "2x"] {
            assert!(DesignSpec::parse(bad, "A").is_err(), "{bad}");
        }
    }

    #[test]
    fn intercept_only_ols_is_mean() {
        let ds = dataset(vec![0.0, 0.0, 0.0], vec![0, 1, 0], vec![1.0, 2.0, 3.0]);
        let spec = DesignSpec::parse("1", "A").unwrap();
        let fit = fit_ols(&ds, &SubgroupMask::full(3), &spec).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_line_is_recovered() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let ds = dataset(x, vec![0, 1, 0, 1, 0], y);
        let fit = fit_ols(&ds, &SubgroupMask::full(5), &DesignSpec::parse("x", "A").unwrap()).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-10);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-10);
        let ds3 = dataset(vec![3.0], vec![0], vec![0.0]);
        let pred = predict_mean(&fit, &ds3, &SubgroupMask::full(1), None).unwrap();
        assert!((pred[0] - 7.0).abs() < 1e-10);
    }

    #[test]
    fn collinear_columns_are_dropped() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let ds = dataset(x, vec![0, 1, 0, 1, 1], vec![1.0, 3.0, 2.0, 5.0, 4.0]);
        // I(x>0) is identically 1 and duplicates the intercept.
        let spec = DesignSpec::parse("x + I(x>0)", "A").unwrap();
        let fit = fit_ols(&ds, &SubgroupMask::full(5), &spec).unwrap();
        assert_eq!(fit.rank, 2);
        assert_eq!(fit.dropped, vec![2]);
        assert_eq!(fit.coefficients[2], 0.0);
    }

    #[test]
    fn too_few_rows_is_insufficient() {
        let ds = dataset(vec![1.0], vec![0], vec![1.0]);
        let spec = DesignSpec::parse("x", "A").unwrap();
        assert!(matches!(fit_ols(&ds, &SubgroupMask::full(1), &spec), Err(CitError::InsufficientData(_))));
    }

    #[test]
    fn intercept_only_logistic_is_log_odds() {
        let ds = dataset(vec![0.0; 4], vec![1, 1, 1, 0], vec![0.0; 4]);
        let fit = fit_logistic(&ds, &SubgroupMask::full(4), &DesignSpec::parse("1", "A").unwrap()).unwrap();
        assert!((fit.coefficients[0] - 3f64.ln()).abs() < 1e-8);
        assert!(fit.converged);
    }

    #[test]
    fn zero_coefficient_logistic_predicts_half() {
        let ds = dataset(vec![0.0; 4], vec![1, 0, 1, 0], vec![0.0; 4]);
        let fit = fit_logistic(&ds, &SubgroupMask::full(4), &DesignSpec::parse("1", "A").unwrap()).unwrap();
        let p = predict_mean(&fit, &ds, &SubgroupMask::full(4), None).unwrap();
        assert!(p.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn separation_fails_and_one_arm_is_degenerate() {
        let ds = dataset(vec![-2.0, -1.0, 1.0, 2.0], vec![0, 0, 1, 1], vec![0.0; 4]);
        let spec = DesignSpec::parse("x", "A").unwrap();
        assert!(matches!(fit_logistic(&ds, &SubgroupMask::full(4), &spec), Err(CitError::LogisticFailed(_))));
        let ds = dataset(vec![-2.0, -1.0, 1.0, 2.0], vec![1; 4], vec![0.0; 4]);
        assert!(matches!(fit_logistic(&ds, &SubgroupMask::full(4), &spec), Err(CitError::DegenerateResponse(_))));
    }

    #[test]
    fn treatment_override_changes_treated_terms() {
        let ds = dataset(vec![1.0, 2.0, 3.0, 4.0], vec![0, 1, 0, 1], vec![1.0, 5.0, 3.0, 9.0]);
        let spec = DesignSpec::parse("A + A:x", "A").unwrap();
        let fit = fit_ols(&ds, &SubgroupMask::full(4), &spec).unwrap();
        let m = SubgroupMask::full(4);
        let g1 = predict_mean(&fit, &ds, &m, Some(1)).unwrap();
        let g0 = predict_mean(&fit, &ds, &m, Some(0)).unwrap();
        for i in 0..4 {
            let x = (i + 1) as f64;
            let b = &fit.coefficients;
            assert!((g1[i] - (b[0] + b[1] + b[2] * x)).abs() < 1e-10);
            assert!((g0[i] - b[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn unseen_level_errors_at_prediction() {
        let schema = Schema::new(vec![ColumnSpec::categorical("g", &["a", "b", "c"])], "A", "y").unwrap();
        let train = Dataset::new(
            schema.clone(),
            vec![Column::Levels(vec![0, 1, 0, 1, 0, 1])],
            vec![0, 1, 0, 1, 1, 0],
            vec![1.0, 2.0, 1.5, 2.5, 1.2, 2.2],
        )
        .unwrap();
        let fit = fit_ols(&train, &SubgroupMask::full(6), &DesignSpec::parse("g", "A").unwrap()).unwrap();
        assert_eq!(fit.dropped, vec![2]);
        let test = Dataset::new(schema, vec![Column::Levels(vec![2])], vec![0], vec![0.0]).unwrap();
        let err = predict_mean(&fit, &test, &SubgroupMask::full(1), None).unwrap_err();
        assert!(matches!(err, CitError::UnseenLevel { .. }));
    }
}
