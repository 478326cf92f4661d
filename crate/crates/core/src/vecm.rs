//! Data model for vector error correction models.
//!
//! A [`TimeSeriesMatrix`] stores one observation per row (oldest first) and one
//! series per column. [`build_design`] embeds it into the regression form
//!
//! ```text
//! Y = X Γ + Z Π' + E
//! ```
//!
//! where `Y` holds current differences, `X` the stacked lagged differences
//! (plus an optional constant column) and `Z` the lagged levels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A T×q multivariate time series, rows ordered oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesMatrix {
    values: DMatrix<f64>,
    labels: Option<Vec<String>>,
}

impl TimeSeriesMatrix {
    pub fn new(values: DMatrix<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        for col in 0..values.ncols() {
            for row in 0..values.nrows() {
                if !values[(row, col)].is_finite() {
                    return Err(Error::NonFinite { row, col });
                }
            }
        }
        if let Some(l) = &labels {
            if l.len() != values.ncols() {
                return Err(Error::InvalidInput(format!(
                    "{} labels for {} series",
                    l.len(),
                    values.ncols()
                )));
            }
        }
        Ok(Self { values, labels })
    }

    /// Builds a series from row-major observations.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let q = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != q) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        let values = DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]);
        Self::new(values, None)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Labels, falling back to `y1..yq`.
    pub fn labels_or_default(&self) -> Vec<String> {
        match &self.labels {
            Some(l) => l.clone(),
            None => (1..=self.nseries()).map(|i| format!("y{i}")).collect(),
        }
    }

    /// Number of observations T.
    pub fn nobs(&self) -> usize {
        self.values.nrows()
    }

    /// Number of series q.
    pub fn nseries(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `start..end` as a new series.
    pub fn slice_rows(&self, start: usize, end: usize) -> TimeSeriesMatrix {
        assert!(start <= end && end <= self.nobs());
        TimeSeriesMatrix {
            values: self.values.rows(start, end - start).into_owned(),
            labels: self.labels.clone(),
        }
    }

    /// Iterated first differences of the given order.
    pub fn difference(&self, order: usize) -> Result<TimeSeriesMatrix> {
        if order == 0 {
            return Err(Error::InvalidInput("difference order must be >= 1".into()));
        }
        if self.nobs() <= order {
            return Err(Error::TooShort {
                needed: order + 1,
                got: self.nobs(),
            });
        }
        let mut current = self.values.clone();
        for _ in 0..order {
            let t = current.nrows();
            current = current.rows(1, t - 1) - current.rows(0, t - 1);
        }
        Ok(TimeSeriesMatrix {
            values: current,
            labels: self.labels.clone(),
        })
    }
}

/// Regression embedding `(Y, X, Z)` of a VECM with lag order `p`.
#[derive(Debug, Clone)]
pub struct VecmDesign {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub lag: usize,
    pub intercept: bool,
}

impl VecmDesign {
    /// Effective number of observations n = T - p.
    pub fn nobs(&self) -> usize {
        self.y.nrows()
    }

    pub fn nseries(&self) -> usize {
        self.y.ncols()
    }

    /// Number of short-run regressors, q(p-1) plus one for the intercept.
    pub fn n_short_run(&self) -> usize {
        self.x.ncols()
    }
}

/// Subtracts each column's mean.
pub(crate) fn demean_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.row_mean();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - mean[j])
}

/// Builds the VECM design at lag order `p`.
///
/// Row `t` (0-based) corresponds to time `s = p + t`: `Y` holds `Δy_s`, `Z` holds
/// `y_{s-1}` and `X` stacks `Δy_{s-1}, …, Δy_{s-p+1}`, followed by a column of
/// ones when `intercept` is set.
pub fn build_design(series: &TimeSeriesMatrix, p: usize, intercept: bool) -> Result<VecmDesign> {
    if p == 0 {
        return Err(Error::InvalidInput("lag order p must be >= 1".into()));
    }
    let t_obs = series.nobs();
    if t_obs < p + 2 {
        return Err(Error::TooShort {
            needed: p + 2,
            got: t_obs,
        });
    }
    let q = series.nseries();
    let v = series.values();
    let n = t_obs - p;
    let k = q * (p - 1) + usize::from(intercept);

    let y = DMatrix::from_fn(n, q, |t, j| v[(p + t, j)] - v[(p + t - 1, j)]);
    let z = DMatrix::from_fn(n, q, |t, j| v[(p + t - 1, j)]);
    let x = DMatrix::from_fn(n, k, |t, c| {
        if c == q * (p - 1) {
            return 1.0;
        }
        let lag = c / q + 1;
        let j = c % q;
        let s = p + t - lag;
        v[(s, j)] - v[(s - 1, j)]
    });
    Ok(VecmDesign {
        y,
        x,
        z,
        lag: p,
        intercept,
    })
}

/// Penalty applied to the cointegrating vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaPenalty {
    Lasso,
    AdaptiveLasso,
    Ridge,
}

/// Tuning parameters and solver tolerances of the penalized likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// One value per cointegrating vector; a single value is broadcast.
    pub lambda1: Vec<f64>,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta_penalty: BetaPenalty,
    pub tol_outer: f64,
    pub tol_inner: f64,
    pub max_outer_iter: usize,
    pub max_inner_iter: usize,
    /// When false the intercept row of Γ is left unpenalized.
    pub penalize_intercept: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda1: vec![0.0],
            lambda2: 0.0,
            lambda3: 0.0,
            beta_penalty: BetaPenalty::Lasso,
            tol_outer: 1e-3,
            tol_inner: 1e-6,
            max_outer_iter: 100,
            max_inner_iter: 10_000,
            penalize_intercept: true,
        }
    }
}

impl PenaltyConfig {
    /// An unpenalized configuration.
    pub fn unpenalized() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = self
            .lambda1
            .iter()
            .chain([&self.lambda2, &self.lambda3]);
        for &l in lambdas {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "penalty parameters must be finite and >= 0, got {l}"
                )));
            }
        }
        if self.lambda1.is_empty() {
            return Err(Error::InvalidInput("lambda1 must not be empty".into()));
        }
        if !(self.tol_outer > 0.0 && self.tol_inner > 0.0) {
            return Err(Error::InvalidInput("tolerances must be > 0".into()));
        }
        if self.max_outer_iter == 0 || self.max_inner_iter == 0 {
            return Err(Error::InvalidInput("iteration limits must be > 0".into()));
        }
        Ok(())
    }

    /// λ₁ expanded to one value per cointegrating vector.
    pub fn lambda1_for_rank(&self, r: usize) -> Result<Vec<f64>> {
        match self.lambda1.len() {
            1 => Ok(vec![self.lambda1[0]; r]),
            len if len == r => Ok(self.lambda1.clone()),
            len => Err(Error::InvalidInput(format!(
                "lambda1 has {len} entries for rank {r}"
            ))),
        }
    }
}
