//! Tuning-parameter selection: time-series cross-validation for λ₁ and λ₂ and
//! BIC for λ₃.

use nalgebra::{DMatrix, RowDVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{
    fit_sparse_vecm, fit_warm_start, fit_with_weights, johansen_ml, ridge_gamma, CointegrationFit,
    Method,
};
use crate::solvers::{
    graphical_lasso, lasso_multivariate, log_det_spd, GlassoOptions, LassoOptions, LassoWeights,
};
use crate::vecm::{BetaPenalty, PenaltyConfig, VecmDesign};

/// Which penalty a grid belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRole {
    BetaPenalty,
    GammaPenalty,
    OmegaPenalty,
}

/// Candidate tuning parameters, strictly positive and sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaGrid {
    values: Vec<f64>,
    role: GridRole,
}

/// Number of grid points in the default grids.
pub const GRID_SIZE: usize = 20;

impl LambdaGrid {
    pub fn new(mut values: Vec<f64>, role: GridRole) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("lambda grid is empty".into()));
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("lambda grid values must be positive and finite".into()));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        values.dedup();
        Ok(Self { values, role })
    }

    /// `count` log-spaced values from `max` down to `max · 10^{-decades}`.
    pub fn log_spaced(max: f64, decades: f64, count: usize, role: GridRole) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidInput("grid needs at least one value".into()));
        }
        let step = if count > 1 { decades / (count - 1) as f64 } else { 0.0 };
        let values = (0..count).map(|i| max * 10f64.powf(-step * i as f64)).collect();
        Self::new(values, role)
    }

    /// λ₂ grid: 10² down to 10⁻³.
    pub fn default_gamma() -> Self {
        Self::log_spaced(1e2, 5.0, GRID_SIZE, GridRole::GammaPenalty).expect("valid constants")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn role(&self) -> GridRole {
        self.role
    }
}

/// Outcome of a cross-validated grid search.
#[derive(Debug, Clone, Serialize)]
pub struct CvSelection {
    pub lambda: f64,
    /// Mean squared standardized forecast error per grid value (grid order);
    /// infinite where the fit failed.
    pub msfe: Vec<f64>,
}

/// Data visible to a model fit inside cross-validation: responses and
/// regressors up to the forecast origin, and the regressors of the next row.
pub struct CvWindow<'a> {
    pub z_train: &'a DMatrix<f64>,
    pub x_train: &'a DMatrix<f64>,
    pub x_next: &'a RowDVector<f64>,
}

/// Size of the first calibration sample: 80% of `n`.
pub fn calibration_size(n: usize) -> usize {
    (0.8 * n as f64).round() as usize
}

/// Expanding-window one-step cross-validation.
///
/// For every origin `t = S, …, n − 1` and grid value, `fit_fn` sees rows
/// `0..t` and the regressors of row `t` and returns a forecast of `z` at row
/// `t`. Forecast errors are scaled by the full-sample standard deviation of
/// each response; ties go to the larger λ.
pub fn cv_select_lambda<F>(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    grid: &LambdaGrid,
    fit_fn: F,
) -> Result<CvSelection>
where
    F: Fn(&CvWindow, f64) -> Result<RowDVector<f64>> + Sync,
{
    if grid.values.len() == 1 {
        return Ok(CvSelection {
            lambda: grid.values[0],
            msfe: vec![f64::NAN],
        });
    }
    let n = z.nrows();
    if x.nrows() != n {
        return Err(Error::InvalidInput("responses and regressors differ in length".into()));
    }
    let s = calibration_size(n);
    if s < 2 || s >= n {
        return Err(Error::TooShort {
            needed: 3,
            got: n,
        });
    }
    let scale: Vec<Option<f64>> = (0..z.ncols())
        .map(|j| {
            let sd = std_dev(z.column(j).iter().copied());
            if sd > 0.0 {
                Some(sd)
            } else {
                log::warn!("response {j} is constant; excluded from the forecast error");
                None
            }
        })
        .collect();
    let used = scale.iter().filter(|s| s.is_some()).count();
    if used == 0 {
        return Err(Error::InvalidInput("all responses are constant".into()));
    }

    let windows: Vec<(DMatrix<f64>, DMatrix<f64>, RowDVector<f64>)> = (s..n)
        .map(|t| {
            (
                z.rows(0, t).into_owned(),
                x.rows(0, t).into_owned(),
                x.row(t).into_owned(),
            )
        })
        .collect();

    let msfe: Vec<f64> = grid
        .values
        .par_iter()
        .map(|&lambda| {
            let mut acc = 0.0;
            for (i, (zt, xt, xn)) in windows.iter().enumerate() {
                let window = CvWindow {
                    z_train: zt,
                    x_train: xt,
                    x_next: xn,
                };
                let Ok(pred) = fit_fn(&window, lambda) else {
                    return f64::INFINITY;
                };
                let actual = z.row(s + i);
                for (j, sd) in scale.iter().enumerate() {
                    if let Some(sd) = sd {
                        let e = (actual[j] - pred[j]) / sd;
                        acc += e * e;
                    }
                }
            }
            let v = acc / (windows.len() * used) as f64;
            if v.is_finite() { v } else { f64::INFINITY }
        })
        .collect();

    let mut best = 0;
    for (i, &v) in msfe.iter().enumerate() {
        if v < msfe[best] {
            best = i;
        }
    }
    if !msfe[best].is_finite() {
        return Err(Error::Numerical("every grid value failed in cross-validation".into()));
    }
    Ok(CvSelection {
        lambda: grid.values[best],
        msfe,
    })
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// BIC-optimal λ₃ for the graphical lasso on the residual covariance.
///
/// `BIC = n[tr(SΩ) − log|Ω|] + log(n)·#{nonzero upper off-diagonal entries}`;
/// grid points where the graphical lasso fails are skipped.
pub fn bic_select_lambda3(residuals: &DMatrix<f64>, grid: &LambdaGrid) -> Result<f64> {
    let n = residuals.nrows();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    if grid.values.len() == 1 {
        return Ok(grid.values[0]);
    }
    let s = residuals.tr_mul(residuals) / n as f64;
    let nf = n as f64;
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &grid.values {
        let Ok(omega) = graphical_lasso(&s, lambda, GlassoOptions::default()) else {
            continue;
        };
        let Ok(logdet) = log_det_spd(&omega) else {
            continue;
        };
        let q = omega.nrows();
        let edges = (0..q)
            .flat_map(|i| (i + 1..q).map(move |j| (i, j)))
            .filter(|&(i, j)| omega[(i, j)] != 0.0)
            .count();
        let bic = nf * ((&s * &omega).trace() - logdet) + nf.ln() * edges as f64;
        if best.is_none_or(|(b, _)| bic < b) {
            best = Some((bic, lambda));
        }
    }
    best.map(|(_, l)| l)
        .ok_or_else(|| Error::Numerical("graphical lasso failed for every λ₃".into()))
}

/// Default λ₃ grid: max |off-diagonal of S| down three decades.
pub fn omega_grid(residuals: &DMatrix<f64>) -> Option<LambdaGrid> {
    let n = residuals.nrows().max(1) as f64;
    let s = residuals.tr_mul(residuals) / n;
    let q = s.nrows();
    let max = (0..q)
        .flat_map(|i| (0..q).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| s[(i, j)].abs())
        .fold(0.0, f64::max);
    (max > 0.0).then(|| LambdaGrid::log_spaced(max, 3.0, GRID_SIZE, GridRole::OmegaPenalty).expect("positive max"))
}

/// Default λ₁ grid for one response: the smallest λ that zeroes every
/// coefficient, down three decades.
pub fn beta_grid(z: &DMatrix<f64>, target: &[f64], weights: Option<&[f64]>) -> Option<LambdaGrid> {
    let n = z.nrows().max(1) as f64;
    let mut max: f64 = 0.0;
    for i in 0..z.ncols() {
        let w = weights.map_or(1.0, |w| w[i]);
        if !w.is_finite() {
            continue;
        }
        let c: f64 = z.column(i).iter().zip(target).map(|(a, b)| a * b).sum::<f64>() / n;
        if w > 0.0 {
            max = max.max(2.0 * c.abs() / w);
        }
    }
    (max > 0.0 && max.is_finite())
        .then(|| LambdaGrid::log_spaced(max, 3.0, GRID_SIZE, GridRole::BetaPenalty).expect("positive max"))
}

/// A fit with tuning parameters chosen from the data.
#[derive(Debug, Clone, Serialize)]
pub struct TunedFit {
    pub fit: CointegrationFit,
    pub lambda1: Vec<f64>,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda1_msfe: Vec<Vec<f64>>,
    pub lambda2_msfe: Vec<f64>,
}

/// Selects λ₂ and λ₃ once from a pilot fit, λ₁ per cointegrating vector by
/// cross-validation, then fits with the selected values.
///
/// The pilot is the ridge warm-start fit with the penalties in `base`. For
/// the adaptive lasso, λ₁ is tuned for the plain lasso first; the resulting
/// fit supplies the weights and λ₁ is tuned again with those weights.
pub fn fit_tuned(design: &VecmDesign, r: usize, base: &PenaltyConfig) -> Result<TunedFit> {
    let pilot = pilot_fit(design, r, base)?;
    let exempt = design.intercept && !base.penalize_intercept;

    // λ₂ on z = Y − ZΠ̂'
    let (lambda2, lambda2_msfe) = if design.n_short_run() == 0 {
        (0.0, Vec::new())
    } else {
        let z_resp = &design.y - &design.z * pilot.pi().transpose();
        let omega = pilot.omega.clone();
        let sel = cv_select_lambda(&z_resp, &design.x, &LambdaGrid::default_gamma(), |w, l| {
            let g = ridge_gamma(w.x_train, w.z_train, &omega, l, exempt)?;
            Ok(w.x_next * g)
        })?;
        (sel.lambda, sel.msfe)
    };

    let resid = pilot.residuals(design);
    let lambda3 = match omega_grid(&resid) {
        Some(grid) => bic_select_lambda3(&resid, &grid)?,
        None => 0.0,
    };

    let tuned = PenaltyConfig {
        lambda2,
        lambda3,
        ..base.clone()
    };
    let (lambda1, lambda1_msfe) = tune_lambda1(design, &pilot, None)?;
    let lasso_cfg = PenaltyConfig {
        lambda1: lambda1.clone(),
        beta_penalty: BetaPenalty::Lasso,
        ..tuned.clone()
    };
    let (fit, lambda1, lambda1_msfe) = match base.beta_penalty {
        BetaPenalty::Ridge => (fit_warm_start(design, r, &tuned)?, vec![0.0; r], Vec::new()),
        BetaPenalty::Lasso => (fit_sparse_vecm(design, r, &lasso_cfg)?, lambda1, lambda1_msfe),
        BetaPenalty::AdaptiveLasso => {
            let lasso = fit_sparse_vecm(design, r, &lasso_cfg)?;
            let weights = LassoWeights::adaptive(&lasso.beta);
            let (l1, msfe) = tune_lambda1(design, &lasso, Some(&weights))?;
            let cfg = PenaltyConfig {
                lambda1: l1.clone(),
                ..tuned.clone()
            };
            (fit_with_weights(design, r, &cfg, &weights)?, l1, msfe)
        }
    };
    let lambda1 = if fit.lambda1.len() == lambda1.len() && base.beta_penalty != BetaPenalty::Ridge {
        fit.lambda1.clone()
    } else {
        lambda1
    };
    Ok(TunedFit {
        lambda1,
        lambda2,
        lambda3,
        lambda1_msfe,
        lambda2_msfe,
        fit,
    })
}

/// Fits `method` at rank `r`; the sparse methods tune their penalties with
/// [`fit_tuned`] starting from `base`.
pub fn fit_method(design: &VecmDesign, r: usize, method: Method, base: &PenaltyConfig) -> Result<CointegrationFit> {
    match method.beta_penalty() {
        None => johansen_ml(design, r),
        Some(penalty) => {
            let cfg = PenaltyConfig {
                beta_penalty: penalty,
                ..base.clone()
            };
            Ok(fit_tuned(design, r, &cfg)?.fit)
        }
    }
}

/// Ridge warm-start fit; when the residual covariance is singular (more
/// series than residual degrees of freedom) a small λ₃ is used instead.
pub fn pilot_fit(design: &VecmDesign, r: usize, base: &PenaltyConfig) -> Result<CointegrationFit> {
    match fit_warm_start(design, r, base) {
        Err(e) if e.is_numerical() => {
            let var = design.y.column_iter().map(|c| std_dev(c.iter().copied()).powi(2)).sum::<f64>()
                / design.nseries() as f64;
            let cfg = PenaltyConfig {
                lambda3: base.lambda3.max(1e-2 * var),
                ..base.clone()
            };
            log::debug!("pilot fit retried with lambda3 = {}", cfg.lambda3);
            fit_warm_start(design, r, &cfg)
        }
        other => other,
    }
}

/// Per-vector λ₁ by cross-validating the β-step regression of each column
/// of `(Y − XΓ̂)Ω̂α̂` on Z.
fn tune_lambda1(
    design: &VecmDesign,
    fit: &CointegrationFit,
    weights: Option<&LassoWeights>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let y_tilde = if design.x.ncols() == 0 {
        design.y.clone()
    } else {
        &design.y - &design.x * &fit.gamma
    };
    let targets = y_tilde * &fit.omega * &fit.alpha;
    let mut lambdas = Vec::with_capacity(fit.rank);
    let mut curves = Vec::with_capacity(fit.rank);
    for j in 0..fit.rank {
        let target = targets.column(j).into_owned();
        let w_col = weights.map(|w| w.column(j));
        let Some(grid) = beta_grid(&design.z, target.as_slice(), w_col.as_deref()) else {
            lambdas.push(0.0);
            curves.push(Vec::new());
            continue;
        };
        let col_weights = w_col.map(|w| LassoWeights::new(DMatrix::from_column_slice(w.len(), 1, &w)))
            .transpose()?;
        let response = DMatrix::from_column_slice(target.len(), 1, target.as_slice());
        let sel = cv_select_lambda(&response, &design.z, &grid, |w, l| {
            let fit = lasso_multivariate(w.x_train, w.z_train, &[l], col_weights.as_ref(), None, LassoOptions::default())?;
            Ok(w.x_next * fit.coef)
        })?;
        lambdas.push(sel.lambda);
        curves.push(sel.msfe);
    }
    Ok((lambdas, curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{design, generate_sample, rng_for};
    use crate::vecm::build_design;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn grid_validation_and_order() {
        let g = LambdaGrid::new(vec![0.1, 1.0, 0.5], GridRole::BetaPenalty).unwrap();
        assert_eq!(g.values(), &[1.0, 0.5, 0.1]);
        assert!(LambdaGrid::new(vec![], GridRole::BetaPenalty).is_err());
        assert!(LambdaGrid::new(vec![0.0], GridRole::BetaPenalty).is_err());
        let d = LambdaGrid::default_gamma();
        assert_eq!(d.values().len(), 20);
        assert!((d.values()[0] - 100.0).abs() < 1e-12);
        assert!((d.values()[19] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn calibration_size_is_eighty_percent() {
        assert_eq!(calibration_size(100), 80);
        assert_eq!(calibration_size(48), 38);
    }

    #[test]
    fn single_value_grid_is_returned() {
        let g = LambdaGrid::new(vec![0.3], GridRole::GammaPenalty).unwrap();
        let z = DMatrix::zeros(10, 1);
        let sel = cv_select_lambda(&z, &z, &g, |_, _| unreachable!()).unwrap();
        assert_eq!(sel.lambda, 0.3);
        let r = DMatrix::from_fn(30, 2, |i, j| ((i * 7 + j * 3) % 5) as f64);
        assert_eq!(bic_select_lambda3(&r, &g).unwrap(), 0.3);
    }

    #[test]
    fn no_look_ahead() {
        let n = 50;
        let z = DMatrix::from_fn(n, 1, |i, _| i as f64 + (i as f64 * 0.7).sin());
        let x = DMatrix::from_fn(n, 2, |i, j| (i * 10 + j) as f64);
        let grid = LambdaGrid::new(vec![1.0, 0.1], GridRole::GammaPenalty).unwrap();
        let calls = AtomicUsize::new(0);
        cv_select_lambda(&z, &x, &grid, |w, _| {
            calls.fetch_add(1, Ordering::Relaxed);
            let t = w.z_train.nrows();
            assert_eq!(w.x_train.nrows(), t);
            assert_eq!(w.z_train[(t - 1, 0)], z[(t - 1, 0)]);
            // the only post-origin information is the next regressor row
            assert_eq!(w.x_next[0], (t * 10) as f64);
            Ok(RowDVector::from_element(1, w.z_train[(t - 1, 0)]))
        })
        .unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 2 * (n - calibration_size(n)));
    }

    #[test]
    fn constant_response_is_excluded() {
        let mut rng = rng_for(1, 0);
        let mut z = randn(&mut rng, 40, 2);
        z.column_mut(1).fill(3.0);
        let x = randn(&mut rng, 40, 2);
        let grid = LambdaGrid::new(vec![1.0, 0.1], GridRole::BetaPenalty).unwrap();
        let sel = cv_select_lambda(&z, &x, &grid, |_, _| Ok(RowDVector::from_vec(vec![0.0, f64::NAN]))).unwrap();
        assert!(sel.msfe.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn noise_response_prefers_large_penalty() {
        let mut upper = 0;
        for run in 0..100 {
            let mut rng = rng_for(3, run);
            let x = randn(&mut rng, 100, 5);
            let z = randn(&mut rng, 100, 1);
            let grid = beta_grid(&x, z.as_slice(), None).unwrap();
            let sel = cv_select_lambda(&z, &x, &grid, |w, l| {
                let f = lasso_multivariate(w.x_train, w.z_train, &[l], None, None, LassoOptions::default())?;
                Ok(w.x_next * f.coef)
            })
            .unwrap();
            let idx = grid.values().iter().position(|&v| v == sel.lambda).unwrap();
            upper += (idx < grid.values().len() / 2) as usize;
        }
        assert!(upper >= 80, "{upper}/100");
    }

    fn gaussian_with_precision(rng: &mut ChaCha8Rng, n: usize, omega: &DMatrix<f64>) -> DMatrix<f64> {
        let sigma = omega.clone().try_inverse().unwrap();
        let l = sigma.cholesky().unwrap().l();
        randn(rng, n, omega.nrows()) * l.transpose()
    }

    #[test]
    fn bic_keeps_diagonal_truth_sparse() {
        let q = 5;
        let mut zero_share = 0.0;
        for run in 0..100 {
            let mut rng = rng_for(4, run);
            let r = randn(&mut rng, 500, q);
            let grid = omega_grid(&r).unwrap();
            let l = bic_select_lambda3(&r, &grid).unwrap();
            let s = r.tr_mul(&r) / 500.0;
            let om = graphical_lasso(&s, l, GlassoOptions::default()).unwrap();
            let zeros = (0..q).flat_map(|i| (0..q).map(move |j| (i, j))).filter(|&(i, j)| i != j && om[(i, j)] == 0.0).count();
            zero_share += zeros as f64 / (q * (q - 1)) as f64;
        }
        assert!(zero_share / 100.0 >= 0.9, "{}", zero_share / 100.0);
    }

    #[test]
    fn bic_keeps_tridiagonal_edges() {
        // the shrunken likelihood favours small λ₃, so BIC over-selects edges;
        // true edges are always kept and most null pairs stay zero
        let q = 4;
        let omega = DMatrix::from_fn(q, q, |i, j| match i.abs_diff(j) {
            0 => 1.0,
            1 => 0.4,
            _ => 0.0,
        });
        let (mut kept, mut spurious) = (0, 0);
        for run in 0..100 {
            let mut rng = rng_for(5, run);
            let r = gaussian_with_precision(&mut rng, 200, &omega);
            let l = bic_select_lambda3(&r, &omega_grid(&r).unwrap()).unwrap();
            let om = graphical_lasso(&(r.tr_mul(&r) / 200.0), l, GlassoOptions::default()).unwrap();
            kept += (0..q - 1).all(|i| om[(i, i + 1)] != 0.0) as usize;
            spurious += [(0, 2), (0, 3), (1, 3)].iter().filter(|&&(i, j)| om[(i, j)] != 0.0).count();
        }
        assert!(kept >= 95, "{kept}/100");
        assert!(spurious < 150, "{spurious}/300");
    }

    #[test]
    fn tuned_fit_has_one_lambda_per_vector() {
        let sim = design("low_sparse_r2", -0.6).unwrap();
        let d = build_design(&generate_sample(&sim, 8), 2, true).unwrap();
        for penalty in [BetaPenalty::Lasso, BetaPenalty::AdaptiveLasso] {
            let base = PenaltyConfig { beta_penalty: penalty, penalize_intercept: false, ..PenaltyConfig::default() };
            let t = fit_tuned(&d, 2, &base).unwrap();
            assert_eq!(t.lambda1.len(), 2);
            assert!(t.lambda1.iter().all(|&l| l > 0.0));
            assert!(t.lambda2 > 0.0);
            assert_eq!(t.fit.rank, 2);
            let angle = crate::estimator::subspace_angle(&t.fit.beta, &sim.beta_true).unwrap();
            assert!(angle < 0.1, "{angle}");
        }
    }

    #[test]
    fn tuned_fit_is_deterministic() {
        let sim = design("high_sparse_r1", -0.6).unwrap();
        let d = build_design(&generate_sample(&sim, 2), 2, true).unwrap();
        let base = PenaltyConfig { penalize_intercept: false, ..PenaltyConfig::default() };
        let a = fit_tuned(&d, 1, &base).unwrap();
        let b = fit_tuned(&d, 1, &base).unwrap();
        assert_eq!(a.fit.beta, b.fit.beta);
        assert_eq!(a.lambda1, b.lambda1);
    }
}
