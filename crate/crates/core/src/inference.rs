//! Residual-bootstrap test of the zero-sum restriction on the cointegrating
//! vectors (every vector's coefficients sum to zero).

use nalgebra::{Cholesky, DMatrix, DVector, RowDVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{
    fit_sparse_vecm, johansen_ml, normalize_leading_one, ridge_gamma, CointegrationFit, Method,
};
use crate::simulation::rng_for;
use crate::solvers::{graphical_lasso, pseudo_inverse, GlassoOptions, DEFAULT_RANK_TOL};
use crate::tuning::fit_tuned;
use crate::vecm::{build_design, PenaltyConfig, TimeSeriesMatrix, VecmDesign};

/// Spreads against the first series: the first row is all ones and rows
/// `2..q` form `−I_{q−1}`.
pub fn eht_null_beta(q: usize) -> Result<DMatrix<f64>> {
    if q < 2 {
        return Err(Error::InvalidInput("the spread matrix needs q >= 2".into()));
    }
    Ok(DMatrix::from_fn(q, q - 1, |i, j| match i {
        0 => 1.0,
        _ if i == j + 1 => -1.0,
        _ => 0.0,
    }))
}

/// Column sums of β after rescaling each column to a leading one.
pub fn zero_sum_theta(beta: &DMatrix<f64>) -> Vec<f64> {
    let (_, b) = normalize_leading_one(&DMatrix::zeros(1, beta.ncols()), beta);
    b.column_iter().map(|c| c.sum()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapOptions {
    pub lag: usize,
    pub intercept: bool,
    pub method: Method,
    pub replications: usize,
    pub eta: f64,
    pub seed: u64,
    /// Starting penalties and tolerances for the sparse methods.
    pub config: PenaltyConfig,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            lag: 1,
            intercept: false,
            method: Method::Johansen,
            replications: 999,
            eta: 0.05,
            seed: 0,
            config: PenaltyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapResult {
    pub q_stat: f64,
    pub q_boot: Vec<f64>,
    pub p_value: f64,
    pub replications: usize,
    pub eta: f64,
    pub theta_hat: Vec<f64>,
    /// H₀ is rejected when `p_value <= eta`.
    pub reject: bool,
    /// Set when the replicate covariance needed a ridge to be inverted.
    pub regularized: bool,
    /// Bootstrap samples that were redrawn after a failed fit.
    pub retries: usize,
    /// Estimate on the original data (leading-one normalization).
    pub beta: DMatrix<f64>,
}

/// Share of bootstrap statistics strictly above `q`.
pub fn bootstrap_p_value(q: f64, q_boot: &[f64]) -> f64 {
    if q_boot.is_empty() {
        return f64::NAN;
    }
    q_boot.iter().filter(|&&v| v > q).count() as f64 / q_boot.len() as f64
}

const MAX_RETRIES: usize = 10;

/// Bootstrap test of `H₀: every cointegrating vector sums to zero` at rank
/// `q − 1`.
///
/// The model is estimated under H₀ with β fixed to [`eht_null_beta`];
/// bootstrap samples are generated recursively from the first `p`
/// observations with i.i.d. resampled centered residuals, and the chosen
/// method is refit on each. `Q = Θ̂'C⁻¹Θ̂` uses the covariance `C` of the
/// bootstrap replicates for both the original and the bootstrap statistics.
/// The sparse methods reuse the penalties tuned on the original data.
pub fn bootstrap_zero_sum_test(series: &TimeSeriesMatrix, opts: &BootstrapOptions) -> Result<BootstrapResult> {
    if opts.replications < 2 {
        return Err(Error::InvalidInput("at least two bootstrap replications are needed".into()));
    }
    if !(opts.eta > 0.0 && opts.eta < 1.0) {
        return Err(Error::InvalidInput("eta must lie in (0, 1)".into()));
    }
    let q = series.nseries();
    let beta0 = eht_null_beta(q)?;
    let r = q - 1;
    let design = build_design(series, opts.lag, opts.intercept)?;

    let (fit, refit_cfg) = match opts.method.beta_penalty() {
        None => (johansen_ml(&design, r)?, None),
        Some(penalty) => {
            let base = PenaltyConfig {
                beta_penalty: penalty,
                ..opts.config.clone()
            };
            let tuned = fit_tuned(&design, r, &base)?;
            let cfg = PenaltyConfig {
                lambda1: tuned.lambda1.clone(),
                lambda2: tuned.lambda2,
                lambda3: tuned.lambda3,
                ..base
            };
            (tuned.fit, Some(cfg))
        }
    };
    let (_, beta_hat) = fit.normalized();
    let theta_hat = zero_sum_theta(&fit.beta);

    let null = match &refit_cfg {
        None => restricted_ols(&design, &beta0)?,
        Some(cfg) => restricted_penalized(&design, &beta0, cfg)?,
    };
    let mut resid = &design.y - &design.x * &null.gamma - (&design.z * &beta0) * null.alpha.transpose();
    let means = resid.row_sum() / resid.nrows() as f64;
    for mut row in resid.row_iter_mut() {
        row -= &means;
    }
    let pi0 = &null.alpha * beta0.transpose();

    let refit = |sample: &TimeSeriesMatrix| -> Result<CointegrationFit> {
        let d = build_design(sample, opts.lag, opts.intercept)?;
        match &refit_cfg {
            None => johansen_ml(&d, r),
            Some(cfg) => fit_sparse_vecm(&d, r, cfg),
        }
    };

    let draws: Vec<Result<(Vec<f64>, usize)>> = (0..opts.replications)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(opts.seed, b as u64);
            let mut failures = 0;
            loop {
                let sample = bootstrap_sample(series, opts.lag, opts.intercept, &pi0, &null.gamma, &resid, &mut rng)?;
                match refit(&sample) {
                    Ok(f) => return Ok((zero_sum_theta(&f.beta), failures)),
                    Err(e) if failures < MAX_RETRIES => {
                        log::debug!("bootstrap replicate {b}: {e}; redrawing");
                        failures += 1;
                    }
                    Err(e) => {
                        return Err(Error::Numerical(format!(
                            "bootstrap replicate {b} failed {} times: {e}",
                            failures + 1
                        )))
                    }
                }
            }
        })
        .collect();
    let mut thetas = Vec::with_capacity(opts.replications);
    let mut retries = 0;
    for d in draws {
        let (t, f) = d?;
        thetas.push(t);
        retries += f;
    }

    let (cov_inv, regularized) = replicate_precision(&thetas)?;
    let quad = |t: &[f64]| {
        let v = DVector::from_column_slice(t);
        (v.transpose() * &cov_inv * &v)[(0, 0)].max(0.0)
    };
    let q_stat = quad(&theta_hat);
    let q_boot: Vec<f64> = thetas.iter().map(|t| quad(t)).collect();
    let p_value = bootstrap_p_value(q_stat, &q_boot);
    Ok(BootstrapResult {
        q_stat,
        q_boot,
        p_value,
        replications: opts.replications,
        eta: opts.eta,
        theta_hat,
        reject: p_value <= opts.eta,
        regularized,
        retries,
        beta: beta_hat,
    })
}

/// Inverse of the empirical covariance of the replicates; adds `1e-8·I`
/// when it is singular.
fn replicate_precision(thetas: &[Vec<f64>]) -> Result<(DMatrix<f64>, bool)> {
    let b = thetas.len();
    let m = thetas[0].len();
    let data = DMatrix::from_fn(b, m, |i, j| thetas[i][j]);
    let mean = data.row_sum() / b as f64;
    let mut centered = data;
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.tr_mul(&centered) / (b - 1) as f64;
    if let Some(c) = Cholesky::new(cov.clone()) {
        let inv = c.inverse();
        if inv.iter().all(|v| v.is_finite()) {
            return Ok((inv, false));
        }
    }
    log::warn!("bootstrap covariance is singular; adding a 1e-8 ridge");
    let ridged = cov + DMatrix::identity(m, m) * 1e-8;
    let inv = Cholesky::new(ridged)
        .ok_or_else(|| Error::Singular("bootstrap covariance".into()))?
        .inverse();
    Ok((inv, true))
}

struct NullFit {
    alpha: DMatrix<f64>,
    gamma: DMatrix<f64>,
}

/// Least squares of Y on `[X, Zβ₀]`.
fn restricted_ols(design: &VecmDesign, beta0: &DMatrix<f64>) -> Result<NullFit> {
    let k = design.n_short_run();
    let zb = &design.z * beta0;
    let w = DMatrix::from_fn(design.nobs(), k + zb.ncols(), |i, j| {
        if j < k { design.x[(i, j)] } else { zb[(i, j - k)] }
    });
    let coef = pseudo_inverse(&w.tr_mul(&w), DEFAULT_RANK_TOL) * w.tr_mul(&design.y);
    Ok(NullFit {
        gamma: coef.rows(0, k).into_owned(),
        alpha: coef.rows(k, zb.ncols()).transpose(),
    })
}

/// Alternates the ridge Γ-step, least-squares α given β₀ and the graphical
/// lasso for Ω.
fn restricted_penalized(design: &VecmDesign, beta0: &DMatrix<f64>, cfg: &PenaltyConfig) -> Result<NullFit> {
    let q = design.nseries();
    let exempt = design.intercept && !cfg.penalize_intercept;
    let zb = &design.z * beta0;
    let zb_pinv = pseudo_inverse(&zb.tr_mul(&zb), DEFAULT_RANK_TOL);
    let mut omega = DMatrix::identity(q, q);
    let mut gamma = ridge_gamma(&design.x, &design.y, &omega, cfg.lambda2, exempt)?;
    let mut alpha = DMatrix::zeros(q, beta0.ncols());
    for _ in 0..cfg.max_outer_iter {
        let short = if design.x.ncols() == 0 { design.y.clone() } else { &design.y - &design.x * &gamma };
        let new_alpha = (&zb_pinv * zb.tr_mul(&short)).transpose();
        let target = &design.y - &zb * new_alpha.transpose();
        let new_gamma = ridge_gamma(&design.x, &target, &omega, cfg.lambda2, exempt)?;
        let resid = &target - &design.x * &new_gamma;
        omega = graphical_lasso(&(resid.tr_mul(&resid) / design.nobs() as f64), cfg.lambda3, GlassoOptions::default())?;
        let change = (&new_alpha - &alpha).amax().max((&new_gamma - &gamma).amax());
        alpha = new_alpha;
        gamma = new_gamma;
        if change < cfg.tol_inner {
            break;
        }
    }
    Ok(NullFit { alpha, gamma })
}

/// One recursive bootstrap sample of the same length as `series`.
fn bootstrap_sample(
    series: &TimeSeriesMatrix,
    p: usize,
    intercept: bool,
    pi: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    resid: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<TimeSeriesMatrix> {
    let (t_obs, q) = (series.nobs(), series.nseries());
    let n = resid.nrows();
    let mut y = DMatrix::zeros(t_obs, q);
    y.rows_mut(0, p).copy_from(&series.values().rows(0, p));
    let k = gamma.nrows();
    let mut x = RowDVector::zeros(k);
    for s in p..t_obs {
        for lag in 1..p {
            for j in 0..q {
                x[(lag - 1) * q + j] = y[(s - lag, j)] - y[(s - lag - 1, j)];
            }
        }
        if intercept {
            x[k - 1] = 1.0;
        }
        let prev = y.row(s - 1).into_owned();
        let mut dy = &prev * pi.transpose() + resid.row(rng.random_range(0..n));
        if k > 0 {
            dy += &x * gamma;
        }
        y.set_row(s, &(prev + dy));
    }
    TimeSeriesMatrix::new(y, series.labels().map(|l| l.to_vec()))
}
