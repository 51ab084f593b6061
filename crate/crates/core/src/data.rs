//! Dataset representation, CSV ingestion, feature expansion and fold plans.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Smallest sample the estimator accepts: two folds of two rows.
pub const MIN_ROWS: usize = 4;

/// Default cap on the number of design columns after expansion.
pub const DEFAULT_MAX_COLUMNS: usize = 5_000;

/// Observed sample `(y, d, x)` with the moderators `z` given as columns of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub d: Vec<u8>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub z_cols: Vec<usize>,
    pub outcome_name: String,
    pub treatment_name: String,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(y: Vec<f64>, d: Vec<u8>, x: DMatrix<f64>, x_names: Vec<String>, z_cols: Vec<usize>) -> Result<Self> {
        let ds = Dataset {
            y,
            d,
            x,
            x_names,
            z_cols,
            outcome_name: "y".into(),
            treatment_name: "d".into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_names(mut self, outcome: &str, treatment: &str) -> Self {
        self.outcome_name = outcome.to_string();
        self.treatment_name = treatment.to_string();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.d.len() != n || self.x.nrows() != n {
            return Err(Error::Validation(format!(
                "length mismatch: y has {n} rows, d has {}, x has {}",
                self.d.len(),
                self.x.nrows()
            )));
        }
        if n < MIN_ROWS {
            return Err(Error::Validation(format!("need at least {MIN_ROWS} rows, got {n}")));
        }
        if self.x_names.len() != self.x.ncols() {
            return Err(Error::Validation(format!(
                "{} column names for {} columns",
                self.x_names.len(),
                self.x.ncols()
            )));
        }
        if let Some(i) = self.d.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!("treatment value {} at row {} is not 0 or 1", self.d[i], i + 1)));
        }
        let treated = self.n_treated();
        if treated == 0 || treated == n {
            return Err(Error::Validation("both treatment arms must be non-empty".into()));
        }
        if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite outcome at row {}", i + 1)));
        }
        if let Some(k) = self.x.iter().position(|v| !v.is_finite()) {
            let (r, c) = (k % n, k / n);
            return Err(Error::Validation(format!(
                "non-finite value at row {}, column '{}'",
                r + 1,
                self.x_names[c]
            )));
        }
        if self.z_cols.is_empty() {
            return Err(Error::Validation("at least one moderator column is required".into()));
        }
        let mut seen = BTreeSet::new();
        for &c in &self.z_cols {
            if c >= self.x.ncols() {
                return Err(Error::Validation(format!("moderator index {c} out of range")));
            }
            if !seen.insert(c) {
                return Err(Error::Validation(format!("moderator index {c} listed twice")));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn lambda_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn lambda_z(&self) -> usize {
        self.z_cols.len()
    }

    pub fn n_treated(&self) -> usize {
        self.d.iter().filter(|&&v| v == 1).count()
    }

    pub fn z_names(&self) -> Vec<String> {
        self.z_cols.iter().map(|&c| self.x_names[c].clone()).collect()
    }

    /// Moderator matrix, `n × λ_Z`.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        self.x.select_columns(&self.z_cols)
    }

    /// Same data with a different moderator set.
    pub fn with_moderators(&self, z_cols: Vec<usize>) -> Result<Self> {
        let mut ds = self.clone();
        ds.z_cols = z_cols;
        ds.validate()?;
        Ok(ds)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.x_names.iter().position(|n| n == name)
    }

    /// Writes `outcome, treatment, x...` with shortest round-trip float formatting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![self.outcome_name.clone(), self.treatment_name.clone()];
        header.extend(self.x_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.y[i].to_string(), self.d[i].to_string()];
            rec.extend((0..self.lambda_x()).map(|j| self.x[(i, j)].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which confounders enter `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Confounders {
    /// The literal string `"rest"`: every column not used as outcome or treatment.
    Rest(RestMarker),
    List(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestMarker {
    Rest,
}

impl Default for Confounders {
    fn default() -> Self {
        Confounders::Rest(RestMarker::Rest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expansion {
    pub degree: usize,
    #[serde(default)]
    pub interactions: bool,
}

/// Column-role map for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatment: String,
    pub moderators: Vec<String>,
    #[serde(default)]
    pub confounders: Confounders,
    /// Numeric confounders to one-hot encode like text columns.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categorical: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expand: Option<Expansion>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "NaN" | "nan" | "." | "null")
}

enum ColumnData {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

fn parse_column(name: &str, cells: &[String]) -> Result<ColumnData> {
    for (i, c) in cells.iter().enumerate() {
        if is_missing(c) {
            return Err(Error::Validation(format!("missing value at row {}, column '{name}'", i + 1)));
        }
    }
    let parsed: Vec<Option<f64>> = cells.iter().map(|c| c.parse::<f64>().ok()).collect();
    let n_numeric = parsed.iter().filter(|v| v.is_some()).count();
    if n_numeric == cells.len() {
        return Ok(ColumnData::Numeric(parsed.into_iter().map(|v| v.unwrap()).collect()));
    }
    if n_numeric == 0 {
        return Ok(ColumnData::Categorical(cells.to_vec()));
    }
    let row = parsed.iter().position(|v| v.is_none()).unwrap();
    Err(Error::Parse {
        row: row + 1,
        column: name.to_string(),
        message: format!("'{}' is not a number", cells[row]),
    })
}

fn numeric_column(name: &str, cells: &[String]) -> Result<Vec<f64>> {
    match parse_column(name, cells)? {
        ColumnData::Numeric(v) => Ok(v),
        ColumnData::Categorical(v) => Err(Error::Parse {
            row: 1,
            column: name.to_string(),
            message: format!("'{}' is not a number", v[0]),
        }),
    }
}

/// Reads a CSV file and assembles a validated [`Dataset`].
///
/// Text columns among the confounders are one-hot encoded with the first
/// category (in sorted order) dropped.
pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut columns: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for rec in reader.records() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            columns[j].push(cell.trim().to_string());
        }
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column '{name}' not found in file header")))
    };

    let yi = find(&roles.outcome)?;
    let di = find(&roles.treatment)?;
    let y = numeric_column(&roles.outcome, &columns[yi])?;
    let d_raw = numeric_column(&roles.treatment, &columns[di])?;
    let mut d = Vec::with_capacity(d_raw.len());
    for (i, v) in d_raw.iter().enumerate() {
        if *v == 0.0 {
            d.push(0);
        } else if *v == 1.0 {
            d.push(1);
        } else {
            return Err(Error::Validation(format!(
                "treatment column '{}' has value {v} at row {}; expected 0 or 1",
                roles.treatment,
                i + 1
            )));
        }
    }

    let mut x_cols: Vec<String> = match &roles.confounders {
        Confounders::Rest(_) => header
            .iter()
            .filter(|h| **h != roles.outcome && **h != roles.treatment)
            .cloned()
            .collect(),
        Confounders::List(list) => list.clone(),
    };
    for m in &roles.moderators {
        if !x_cols.contains(m) {
            x_cols.push(m.clone());
        }
    }

    let mut names = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for name in &x_cols {
        let j = find(name)?;
        let is_moderator = roles.moderators.contains(name);
        let parsed = if roles.categorical.contains(name) && !is_moderator {
            if let Some(i) = columns[j].iter().position(|c| is_missing(c)) {
                return Err(Error::Validation(format!("missing value at row {}, column '{name}'", i + 1)));
            }
            ColumnData::Categorical(columns[j].clone())
        } else {
            parse_column(name, &columns[j])?
        };
        match parsed {
            ColumnData::Numeric(v) => {
                names.push(name.clone());
                values.push(v);
            }
            ColumnData::Categorical(cells) => {
                if is_moderator {
                    return Err(Error::Parse {
                        row: 1,
                        column: name.clone(),
                        message: "moderator columns must be numeric".into(),
                    });
                }
                let levels: BTreeSet<&String> = cells.iter().collect();
                for level in levels.into_iter().skip(1) {
                    names.push(format!("{name}={level}"));
                    values.push(cells.iter().map(|c| f64::from(u8::from(c == level))).collect());
                }
            }
        }
    }
    let n = y.len();
    let x = DMatrix::from_fn(n, values.len(), |i, j| values[j][i]);
    let z_cols = roles
        .moderators
        .iter()
        .map(|m| names.iter().position(|n| n == m).expect("moderators were added to x"))
        .collect();
    let ds = Dataset::new(y, d, x, names, z_cols)?.with_names(&roles.outcome, &roles.treatment);
    match roles.expand {
        Some(e) => expand_features(&ds, e.degree, e.interactions, DEFAULT_MAX_COLUMNS),
        None => Ok(ds),
    }
}

/// Appends per-column powers `2..=degree` and, optionally, all pairwise
/// products of the original columns. Moderator indices keep pointing at the
/// original columns.
pub fn expand_features(ds: &Dataset, degree: usize, interactions: bool, max_columns: usize) -> Result<Dataset> {
    if degree == 0 {
        return Err(Error::Validation("expansion degree must be at least 1".into()));
    }
    let p = ds.lambda_x();
    let n_out = p * degree + if interactions { p * p.saturating_sub(1) / 2 } else { 0 };
    if n_out > max_columns {
        return Err(Error::Resource(format!(
            "expansion would produce {n_out} columns (cap {max_columns})"
        )));
    }
    let n = ds.n();
    let mut names = ds.x_names.clone();
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| ds.x.column(j).iter().copied().collect()).collect();
    for k in 2..=degree {
        for j in 0..p {
            names.push(format!("{}^{k}", ds.x_names[j]));
            cols.push(ds.x.column(j).iter().map(|v| v.powi(k as i32)).collect());
        }
    }
    if interactions {
        for a in 0..p {
            for b in (a + 1)..p {
                names.push(format!("{}*{}", ds.x_names[a], ds.x_names[b]));
                cols.push((0..n).map(|i| ds.x[(i, a)] * ds.x[(i, b)]).collect());
            }
        }
    }
    let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    let mut out = ds.clone();
    out.x = x;
    out.x_names = names;
    out.validate()?;
    Ok(out)
}

/// Assignment of rows to cross-fitting folds (labels `1..=folds`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub assignments: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

impl FoldPlan {
    /// Rows whose label is `fold` (1-based).
    pub fn rows_in(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    /// Rows whose label is not `fold`.
    pub fn rows_outside(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.folds];
        for &a in &self.assignments {
            s[a - 1] += 1;
        }
        s
    }
}

fn check_fold_args(n: usize, folds: usize) -> Result<()> {
    if folds < 2 {
        return Err(Error::Validation(format!("fold count must be at least 2, got {folds}")));
    }
    if folds > n {
        return Err(Error::Validation(format!("fold count {folds} exceeds sample size {n}")));
    }
    Ok(())
}

/// Uniformly random permutation cut into `folds` contiguous blocks.
pub fn make_folds(n: usize, folds: usize, seed: u64) -> Result<FoldPlan> {
    check_fold_args(n, folds)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[rng::tag::FOLDS]));
    let mut assignments = vec![0; n];
    let base = n / folds;
    let extra = n % folds;
    let mut pos = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        for &row in &perm[pos..pos + size] {
            assignments[row] = f + 1;
        }
        pos += size;
    }
    Ok(FoldPlan { assignments, folds, seed })
}

/// Fold plan that balances each treatment arm across folds; overall fold
/// sizes still differ by at most one.
pub fn make_stratified_folds(d: &[u8], folds: usize, seed: u64) -> Result<FoldPlan> {
    let n = d.len();
    check_fold_args(n, folds)?;
    let mut rng = rng::stream(seed, &[rng::tag::FOLDS]);
    let mut order = Vec::with_capacity(n);
    for arm in [1u8, 0u8] {
        let mut rows: Vec<usize> = (0..n).filter(|&i| d[i] == arm).collect();
        rows.shuffle(&mut rng);
        order.extend(rows);
    }
    let mut assignments = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        assignments[row] = pos % folds + 1;
    }
    Ok(FoldPlan { assignments, folds, seed })
}
