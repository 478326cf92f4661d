//! Cointegration rank selection by the iterative rank selection criterion.
//!
//! Given short-run estimates Γ̂, the rank is the number of eigenvalues of
//! `Ỹ'PỸ` (with `Ỹ = Y − XΓ̂` and `P` the projection onto the columns of Z)
//! at or above `μ = 2S²(q + l)`. Γ̂ depends on the rank, so the count is
//! iterated starting from `r = q` until it stops changing.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::short_run_at_rank;
use crate::solvers::{numerical_rank, pseudo_inverse, symmetrize, DEFAULT_RANK_TOL};
use crate::vecm::{demean_columns, PenaltyConfig, VecmDesign};

/// Sample size used in the denominator of S².
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum SampleSize {
    /// Rows of the design, `n = T − p`.
    #[default]
    Effective,
    /// Observations in levels, `T`.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankEstimate {
    pub r_hat: usize,
    /// Eigenvalues of `Ỹ'PỸ` in descending order, at the final iteration.
    pub eigenvalues: Vec<f64>,
    pub mu: f64,
    pub s2: f64,
    pub iterations: usize,
    /// Ranks visited, starting with q.
    pub trajectory: Vec<usize>,
    /// Set when the iteration alternated between two ranks.
    pub cycled: bool,
}

/// Threshold `μ = 2S²(q + l)` with `S² = ‖Ỹ − PỸ‖² / (nq − lq)`.
///
/// Returns `(μ, S², l)` where `l` is the numerical rank of Z.
pub fn rsc_threshold(y_tilde: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<(f64, f64, usize)> {
    rsc_threshold_with_size(y_tilde, z, y_tilde.nrows())
}

/// [`rsc_threshold`] with an explicit sample size in the S² denominator.
pub fn rsc_threshold_with_size(y_tilde: &DMatrix<f64>, z: &DMatrix<f64>, size: usize) -> Result<(f64, f64, usize)> {
    let (_, s2, l) = projection_parts(y_tilde, z, size)?;
    let q = y_tilde.ncols() as f64;
    Ok((2.0 * s2 * (q + l as f64), s2, l))
}

fn projection_parts(y_tilde: &DMatrix<f64>, z: &DMatrix<f64>, size: usize) -> Result<(DMatrix<f64>, f64, usize)> {
    if y_tilde.nrows() != z.nrows() {
        return Err(Error::InvalidInput("Ỹ and Z must have the same rows".into()));
    }
    let q = y_tilde.ncols();
    let l = numerical_rank(z, DEFAULT_RANK_TOL);
    if size <= l || q == 0 {
        return Err(Error::InvalidInput(format!(
            "sample size {size} must exceed rank(Z) = {l}"
        )));
    }
    let fitted = z * (pseudo_inverse(&z.tr_mul(z), DEFAULT_RANK_TOL) * z.tr_mul(y_tilde));
    let rss = (y_tilde - &fitted).norm_squared();
    let s2 = rss / ((size * q - l * q) as f64);
    Ok((fitted, s2, l))
}

/// Eigenvalues of `Ỹ'PỸ`, descending and clipped at zero.
fn projected_eigenvalues(fitted: &DMatrix<f64>) -> Vec<f64> {
    let m = symmetrize(&fitted.tr_mul(fitted));
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Rank count for a given short-run estimate.
pub fn rsc_count(y_tilde: &DMatrix<f64>, z: &DMatrix<f64>, size: usize) -> Result<(usize, Vec<f64>, f64, f64)> {
    let (fitted, s2, l) = projection_parts(y_tilde, z, size)?;
    let q = y_tilde.ncols() as f64;
    let mu = 2.0 * s2 * (q + l as f64);
    let ev = projected_eigenvalues(&fitted);
    let r = ev.iter().filter(|&&v| v >= mu).count();
    Ok((r, ev, mu, s2))
}

/// Iterative rank selection with the effective sample size in S².
pub fn select_rank(design: &VecmDesign, config: &PenaltyConfig) -> Result<RankEstimate> {
    select_rank_with(design, config, SampleSize::Effective)
}

pub fn select_rank_with(design: &VecmDesign, config: &PenaltyConfig, size: SampleSize) -> Result<RankEstimate> {
    let q = design.nseries();
    let n = match size {
        SampleSize::Effective => design.nobs(),
        SampleSize::Raw => design.nobs() + design.lag,
    };
    let cfg = PenaltyConfig {
        lambda1: vec![config.lambda1.first().copied().unwrap_or(0.0)],
        ..config.clone()
    };
    let mut trajectory = vec![q];
    let mut current = q;
    // q + 1 distinct ranks exist, so a longer run has necessarily revisited one
    for iteration in 1..=q + 2 {
        let gamma = short_run_at_rank(design, current, &cfg)?;
        let y_tilde = if design.x.ncols() == 0 {
            design.y.clone()
        } else {
            &design.y - &design.x * gamma
        };
        // a fitted constant is partialled out of both sides
        let (r, eigenvalues, mu, s2) = if design.intercept {
            rsc_count(&demean_columns(&y_tilde), &demean_columns(&design.z), n)?
        } else {
            rsc_count(&y_tilde, &design.z, n)?
        };
        trajectory.push(r);
        let done = r == current;
        let len = trajectory.len();
        let cycled = !done && len >= 3 && trajectory[len - 3] == r;
        if done || cycled || iteration == q + 2 {
            let r_hat = if cycled { r.min(current) } else { r };
            if cycled {
                log::warn!("rank selection alternated between {current} and {r}; reporting {r_hat}");
            }
            return Ok(RankEstimate {
                r_hat,
                eigenvalues,
                mu,
                s2,
                iterations: iteration,
                trajectory,
                cycled: cycled || !done,
            });
        }
        current = r;
    }
    unreachable!("loop returns on its last iteration")
}
