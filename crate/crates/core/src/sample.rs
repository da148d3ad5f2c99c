//! In-memory RD dataset, treatment assignment and mass-point census.
//!
//! Treatment assignment uses a weak inequality: a unit whose score equals
//! the cutoff exactly is assigned to treatment. Datasets with mass at the
//! cutoff are sensitive to this convention.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};

/// Observed RD data.
///
/// Immutable after construction; all constructors validate the invariants
/// (equal lengths, finite scores and outcomes, binary treatment receipt).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdSample {
    score: Vec<f64>,
    outcome: Vec<f64>,
    received: Option<Vec<f64>>,
    covariates: BTreeMap<String, Vec<f64>>,
    cutoff: f64,
    unit_cutoffs: Option<Vec<f64>>,
}

/// Which columns of a CSV file hold which variables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub score: String,
    pub outcome: String,
    #[serde(default)]
    pub treatment: Option<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub cutoff_column: Option<String>,
}

impl ColumnMap {
    pub fn new(score: impl Into<String>, outcome: impl Into<String>) -> Self {
        Self {
            score: score.into(),
            outcome: outcome.into(),
            ..Default::default()
        }
    }
}

/// `T_i = 1(X_i >= c_i)` for every unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentView {
    pub assigned: Vec<u8>,
    pub n_above: usize,
    pub n_below: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassPointSummary {
    pub distinct_values: Vec<f64>,
    pub m: usize,
    pub counts: Vec<usize>,
    /// Largest distinct value strictly below the cutoff.
    pub below_neighbor: Option<f64>,
}

fn check_len(name: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(RdError::LengthMismatch {
            name: name.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

impl RdSample {
    /// Builds a sample from a score and outcome vector.
    pub fn new(score: Vec<f64>, outcome: Vec<f64>, cutoff: f64) -> Result<Self> {
        if score.is_empty() {
            return Err(RdError::EmptyInput);
        }
        check_len("outcome", score.len(), outcome.len())?;
        if !cutoff.is_finite() {
            return Err(RdError::InvalidArgument(format!("cutoff {cutoff} is not finite")));
        }
        if let Some(row) = score.iter().position(|x| !x.is_finite()) {
            return Err(RdError::NonFiniteScore { row });
        }
        if let Some(row) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(RdError::NonFiniteOutcome { row });
        }
        Ok(Self {
            score,
            outcome,
            received: None,
            covariates: BTreeMap::new(),
            cutoff,
            unit_cutoffs: None,
        })
    }

    pub fn with_received(mut self, received: Vec<f64>) -> Result<Self> {
        check_len("received", self.len(), received.len())?;
        if let Some(row) = received.iter().position(|&d| d != 0.0 && d != 1.0) {
            return Err(RdError::BadTreatmentCode { row });
        }
        self.received = Some(received);
        Ok(self)
    }

    /// Adds a covariate. Non-finite entries are kept as NaN and treated as
    /// missing by the tests that use the covariate.
    pub fn with_covariate(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        check_len(&name, self.len(), values.len())?;
        let values = values
            .into_iter()
            .map(|v| if v.is_finite() { v } else { f64::NAN })
            .collect();
        self.covariates.insert(name, values);
        Ok(self)
    }

    pub fn with_unit_cutoffs(mut self, cutoffs: Vec<f64>) -> Result<Self> {
        check_len("unit_cutoffs", self.len(), cutoffs.len())?;
        if let Some(row) = cutoffs.iter().position(|c| !c.is_finite()) {
            return Err(RdError::NonFiniteCutoff { row });
        }
        self.unit_cutoffs = Some(cutoffs);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    pub fn score(&self) -> &[f64] {
        &self.score
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn received(&self) -> Option<&[f64]> {
        self.received.as_deref()
    }

    pub fn covariate(&self, name: &str) -> Option<&[f64]> {
        self.covariates.get(name).map(Vec::as_slice)
    }

    pub fn covariate_names(&self) -> impl Iterator<Item = &str> {
        self.covariates.keys().map(String::as_str)
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn unit_cutoffs(&self) -> Option<&[f64]> {
        self.unit_cutoffs.as_deref()
    }

    /// Cutoff that applies to unit `i`.
    pub fn cutoff_for(&self, i: usize) -> f64 {
        match &self.unit_cutoffs {
            Some(c) => c[i],
            None => self.cutoff,
        }
    }

    /// Cutoff in which window and bandwidth bounds are expressed: the scalar
    /// cutoff, or 0 for multi-cutoff samples (whose scores are normalized).
    pub fn reference_cutoff(&self) -> f64 {
        if self.unit_cutoffs.is_some() {
            0.0
        } else {
            self.cutoff
        }
    }

    /// Scores expressed relative to each unit's applicable cutoff.
    pub fn centered_scores(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.score[i] - self.cutoff_for(i)).collect()
    }

    /// Sample restricted to the given row indices, in that order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(RdError::EmptyInput);
        }
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(Self {
            score: pick(&self.score),
            outcome: pick(&self.outcome),
            received: self.received.as_ref().map(pick),
            covariates: self.covariates.iter().map(|(k, v)| (k.clone(), pick(v))).collect(),
            cutoff: self.cutoff,
            unit_cutoffs: self.unit_cutoffs.as_ref().map(pick),
        })
    }

    /// Same units with a different scalar cutoff (per-unit cutoffs dropped).
    pub fn with_cutoff(&self, cutoff: f64) -> Self {
        let mut s = self.clone();
        s.cutoff = cutoff;
        s.unit_cutoffs = None;
        s
    }

    /// Same units with the outcome replaced.
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Self> {
        check_len("outcome", self.len(), outcome.len())?;
        if let Some(row) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(RdError::NonFiniteOutcome { row });
        }
        let mut s = self.clone();
        s.outcome = outcome;
        Ok(s)
    }

    /// Reads a CSV file with a header row.
    pub fn from_csv(path: impl AsRef<Path>, columns: &ColumnMap, cutoff: f64, delimiter: u8) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_csv_bytes(&bytes, columns, cutoff, delimiter)
    }

    pub fn from_csv_bytes(bytes: &[u8], columns: &ColumnMap, cutoff: f64, delimiter: u8) -> Result<Self> {
        if !cutoff.is_finite() {
            return Err(RdError::InvalidArgument(format!("cutoff {cutoff} is not finite")));
        }
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(bytes);
        let headers = reader.headers()?.clone();
        let locate = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| RdError::MissingColumn(name.to_string()))
        };
        let score_col = locate(&columns.score)?;
        let outcome_col = locate(&columns.outcome)?;
        let treat_col = columns.treatment.as_deref().map(locate).transpose()?;
        let cutoff_col = columns.cutoff_column.as_deref().map(locate).transpose()?;
        let cov_cols = columns
            .covariates
            .iter()
            .map(|c| locate(c))
            .collect::<Result<Vec<_>>>()?;

        let mut score = Vec::new();
        let mut outcome = Vec::new();
        let mut received = Vec::new();
        let mut unit_cutoffs = Vec::new();
        let mut covs: Vec<Vec<f64>> = vec![Vec::new(); cov_cols.len()];
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let field = |col: usize| parse_number(record.get(col).unwrap_or(""));
            let x = field(score_col).filter(|x| x.is_finite());
            score.push(x.ok_or(RdError::NonFiniteScore { row })?);
            let y = field(outcome_col).filter(|y| y.is_finite());
            outcome.push(y.ok_or(RdError::NonFiniteOutcome { row })?);
            if let Some(col) = treat_col {
                match field(col) {
                    Some(d) if d == 0.0 || d == 1.0 => received.push(d),
                    _ => return Err(RdError::BadTreatmentCode { row }),
                }
            }
            if let Some(col) = cutoff_col {
                let c = field(col).filter(|c| c.is_finite());
                unit_cutoffs.push(c.ok_or(RdError::NonFiniteCutoff { row })?);
            }
            for (k, &col) in cov_cols.iter().enumerate() {
                covs[k].push(field(col).unwrap_or(f64::NAN));
            }
        }
        if score.is_empty() {
            return Err(RdError::EmptyInput);
        }
        let mut sample = RdSample::new(score, outcome, cutoff)?;
        if treat_col.is_some() {
            sample = sample.with_received(received)?;
        }
        if cutoff_col.is_some() {
            sample = sample.with_unit_cutoffs(unit_cutoffs)?;
        }
        for (name, values) in columns.covariates.iter().zip(covs) {
            sample = sample.with_covariate(name.clone(), values)?;
        }
        Ok(sample)
    }
}

fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return None;
    }
    s.parse::<f64>().ok()
}

/// Treatment assignment indicator. Pure and idempotent.
pub fn assignment(sample: &RdSample) -> AssignmentView {
    let assigned: Vec<u8> = (0..sample.len())
        .map(|i| u8::from(sample.score[i] >= sample.cutoff_for(i)))
        .collect();
    let n_above = assigned.iter().filter(|&&t| t == 1).count();
    AssignmentView {
        n_below: assigned.len() - n_above,
        n_above,
        assigned,
    }
}

/// Census of distinct score values.
///
/// For multi-cutoff samples the census is taken on normalized scores
/// `X_i - C_i` relative to cutoff 0.
pub fn mass_points(sample: &RdSample) -> MassPointSummary {
    let (values, cutoff) = if sample.unit_cutoffs.is_some() {
        (sample.centered_scores(), 0.0)
    } else {
        (sample.score.clone(), sample.cutoff)
    };
    mass_points_of(&values, cutoff)
}

pub(crate) fn mass_points_of(values: &[f64], cutoff: f64) -> MassPointSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct_values: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for v in sorted {
        match distinct_values.last() {
            Some(&last) if last == v => *counts.last_mut().unwrap() += 1,
            _ => {
                distinct_values.push(v);
                counts.push(1);
            }
        }
    }
    let below_neighbor = distinct_values.iter().rev().find(|&&v| v < cutoff).copied();
    MassPointSummary {
        m: distinct_values.len(),
        distinct_values,
        counts,
        below_neighbor,
    }
}
