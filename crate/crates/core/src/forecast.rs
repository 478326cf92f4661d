//! Rolling-window one-step-ahead forecasts, MAFE scoring and the
//! Diebold–Mariano comparison.

use nalgebra::{DMatrix, RowDVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimator::{short_run_at_rank, Method};
use crate::rank::select_rank;
use crate::tuning::fit_method;
use crate::vecm::{build_design, PenaltyConfig, TimeSeriesMatrix};

/// Cointegration rank used in every window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankChoice {
    Fixed(usize),
    /// Rank selection criterion on the full sample, or per window when
    /// [`ForecastOptions::reselect_rank`] is set.
    Auto,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastOptions {
    pub window: usize,
    pub lag: usize,
    pub rank: RankChoice,
    pub intercept: bool,
    pub reselect_rank: bool,
    /// Methods to run; DM tests compare the first two.
    pub methods: Vec<Method>,
    pub config: PenaltyConfig,
}

impl ForecastOptions {
    pub fn new(window: usize, lag: usize, rank: RankChoice, methods: Vec<Method>) -> Self {
        Self {
            window,
            lag,
            rank,
            intercept: true,
            reselect_rank: false,
            methods,
            config: PenaltyConfig {
                penalize_intercept: false,
                ..PenaltyConfig::default()
            },
        }
    }
}

/// Forecasts of one method.
#[derive(Debug, Clone, Serialize)]
pub struct MethodForecast {
    pub method: Method,
    /// Row i forecasts observation `window + i` (0-based).
    pub forecasts: DMatrix<f64>,
    pub errors: DMatrix<f64>,
    pub mafe: Vec<f64>,
    pub total_mafe: f64,
    /// Windows whose fit failed and fell back to `ŷ_{t+1} = y_t`.
    pub fallback: Vec<bool>,
    pub failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DmTest {
    pub stat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastReport {
    pub labels: Vec<String>,
    pub window: usize,
    pub lag: usize,
    /// Rank of the first window (all windows unless the rank is reselected).
    pub rank: usize,
    pub methods: Vec<MethodForecast>,
    /// Per-series DM test of the first method against the second.
    pub dm: Vec<DmTest>,
}

impl ForecastReport {
    pub fn method(&self, m: Method) -> Option<&MethodForecast> {
        self.methods.iter().find(|f| f.method == m)
    }

    /// Rows in the layout of a MAFE table: one per series, then `Total`.
    /// Columns are `series, <method MAFE>..., dm_p_value`.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["series".to_string()];
        header.extend(self.methods.iter().map(|m| m.method.name().to_string()));
        header.push("dm_p_value".into());
        let mut rows = Vec::new();
        for (i, label) in self.labels.iter().enumerate() {
            let mut row = vec![label.clone()];
            row.extend(self.methods.iter().map(|m| format!("{:.6}", m.mafe[i])));
            row.push(self.dm.get(i).map_or(String::new(), |d| format!("{:.6}", d.p_value)));
            rows.push(row);
        }
        let mut total = vec!["Total".to_string()];
        total.extend(self.methods.iter().map(|m| format!("{:.6}", m.total_mafe)));
        total.push(String::new());
        rows.push(total);
        (header, rows)
    }
}

/// Minimum window for a lag-p VECM in q series.
pub fn minimum_window(q: usize, p: usize) -> usize {
    // p presample rows, then more rows than regressors in the Johansen step
    p + q * p + 2
}

/// Refits every method on rolling windows and forecasts one step ahead.
///
/// For each `t = window − 1, …, T − 2` (0-based), the fit uses rows
/// `t − window + 1 ..= t` and forecasts `y_{t+1} = y_t + Δŷ_{t+1}` with
/// `Δŷ_{t+1} = Σ Γ̂_i Δy_{t+1−i} + Π̂ y_t (+ intercept)`.
pub fn rolling_forecast(series: &TimeSeriesMatrix, opts: &ForecastOptions) -> Result<ForecastReport> {
    let (t_obs, q) = (series.nobs(), series.nseries());
    if opts.window >= t_obs {
        return Err(Error::InvalidInput(format!(
            "window {} must be smaller than the sample size {t_obs}",
            opts.window
        )));
    }
    let min = minimum_window(q, opts.lag);
    if opts.window < min {
        return Err(Error::InvalidInput(format!(
            "window {} is below the minimum {min} for q = {q}, p = {}",
            opts.window, opts.lag
        )));
    }
    if opts.methods.is_empty() {
        return Err(Error::InvalidInput("no forecasting method given".into()));
    }
    let full_rank = match opts.rank {
        RankChoice::Fixed(r) if r <= q => r,
        RankChoice::Fixed(r) => {
            return Err(Error::InvalidInput(format!("rank {r} exceeds {q} series")));
        }
        RankChoice::Auto => {
            let d = build_design(series, opts.lag, opts.intercept)?;
            select_rank(&d, &opts.config)?.r_hat
        }
    };

    let ends: Vec<usize> = (opts.window - 1..t_obs - 1).collect();
    let mut methods = Vec::with_capacity(opts.methods.len());
    for &method in &opts.methods {
        let rows: Vec<(RowDVector<f64>, bool)> = ends
            .par_iter()
            .map(|&end| {
                let train = series.slice_rows(end + 1 - opts.window, end + 1);
                match forecast_next(&train, opts, method, full_rank) {
                    Ok(f) if f.iter().all(|v| v.is_finite()) => (f, false),
                    outcome => {
                        if let Err(e) = outcome {
                            log::warn!("{method} window ending at {end}: {e}; carrying the last value forward");
                        }
                        (series.values().row(end).into_owned(), true)
                    }
                }
            })
            .collect();
        let m = rows.len();
        let forecasts = DMatrix::from_fn(m, q, |i, j| rows[i].0[j]);
        let actual = series.values().rows(opts.window, m);
        let errors = &actual - &forecasts;
        let mafe: Vec<f64> = (0..q).map(|j| errors.column(j).abs().mean()).collect();
        let total_mafe = mafe.iter().sum::<f64>() / q as f64;
        let fallback: Vec<bool> = rows.iter().map(|r| r.1).collect();
        methods.push(MethodForecast {
            method,
            failures: fallback.iter().filter(|&&f| f).count(),
            forecasts,
            errors,
            mafe,
            total_mafe,
            fallback,
        });
    }

    let dm = if methods.len() >= 2 && methods[0].errors.nrows() >= 10 {
        (0..q)
            .map(|j| {
                let e1: Vec<f64> = methods[0].errors.column(j).iter().copied().collect();
                let e2: Vec<f64> = methods[1].errors.column(j).iter().copied().collect();
                diebold_mariano(&e1, &e2)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    Ok(ForecastReport {
        labels: series.labels_or_default(),
        window: opts.window,
        lag: opts.lag,
        rank: full_rank,
        methods,
        dm,
    })
}

/// One-step forecast of the observation after the last row of `train`.
fn forecast_next(
    train: &TimeSeriesMatrix,
    opts: &ForecastOptions,
    method: Method,
    full_rank: usize,
) -> Result<RowDVector<f64>> {
    let design = build_design(train, opts.lag, opts.intercept)?;
    let r = if opts.reselect_rank && opts.rank == RankChoice::Auto {
        select_rank(&design, &opts.config)?.r_hat
    } else {
        full_rank
    };
    let (gamma, pi) = if r == 0 {
        let q = train.nseries();
        (short_run_at_rank(&design, 0, &opts.config)?, DMatrix::zeros(q, q))
    } else {
        let fit = fit_method(&design, r, method, &opts.config)?;
        let pi = fit.pi();
        (fit.gamma, pi)
    };
    let v = train.values();
    let last = v.nrows() - 1;
    let x_next = RowDVector::from_fn(design.n_short_run(), |_, c| {
        let q = train.nseries();
        if c == q * (opts.lag - 1) {
            return 1.0;
        }
        let (lag, j) = (c / q + 1, c % q);
        let s = last + 1 - lag;
        v[(s, j)] - v[(s - 1, j)]
    });
    let y_last = v.row(last).into_owned();
    let delta = &x_next * gamma + &y_last * pi.transpose();
    Ok(y_last + delta)
}

/// Diebold–Mariano test of equal absolute forecast loss.
///
/// `d_t = |e1_t| − |e2_t|`; the statistic is `mean(d)/√(LRV/n)` with a
/// Newey–West (Bartlett) long-run variance at lag `⌊n^{1/3}⌋` and a two-sided
/// normal p-value. Positive values mean the first forecast is worse.
pub fn diebold_mariano(e1: &[f64], e2: &[f64]) -> Result<DmTest> {
    if e1.len() != e2.len() {
        return Err(Error::InvalidInput("error series must have equal length".into()));
    }
    let n = e1.len();
    if n < 10 {
        return Err(Error::InvalidInput(format!("need at least 10 forecast errors, got {n}")));
    }
    let d: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| a.abs() - b.abs()).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let autocov = |l: usize| (l..n).map(|t| (d[t] - mean) * (d[t - l] - mean)).sum::<f64>() / n as f64;
    let lags = (n as f64).cbrt().floor() as usize;
    let mut lrv = autocov(0);
    for l in 1..=lags {
        lrv += 2.0 * (1.0 - l as f64 / (lags as f64 + 1.0)) * autocov(l);
    }
    if !(lrv > 0.0) || lrv <= 1e-14 * d.iter().map(|v| v * v).sum::<f64>() / n as f64 {
        return Ok(DmTest { stat: 0.0, p_value: 1.0 });
    }
    let stat = mean / (lrv / n as f64).sqrt();
    let normal = Normal::standard();
    Ok(DmTest {
        stat,
        p_value: 2.0 * (1.0 - normal.cdf(stat.abs())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{design, generate_sample_scaled, rng_for};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            })
            .collect()
    }

    #[test]
    fn dm_identical_errors() {
        let e: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        assert_eq!(diebold_mariano(&e, &e).unwrap(), DmTest { stat: 0.0, p_value: 1.0 });
    }

    #[test]
    fn dm_sign_flip_and_antisymmetry() {
        let mut rng = rng_for(3, 0);
        let (a, b) = (randn(&mut rng, 60, 1.0), randn(&mut rng, 60, 1.5));
        let t = diebold_mariano(&a, &b).unwrap();
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        assert_eq!(diebold_mariano(&neg(&a), &neg(&b)).unwrap(), t);
        let s = diebold_mariano(&b, &a).unwrap();
        assert!((s.stat + t.stat).abs() < 1e-12 && (s.p_value - t.p_value).abs() < 1e-12);
    }

    #[test]
    fn dm_hand_computed() {
        // d = (1, 0, 1, 0, …): mean 1/2, n = 10, lag 2
        let e1: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 2.0 } else { 1.0 }).collect();
        let e2 = vec![1.0; 10];
        let g0: f64 = 0.25;
        let g1 = -0.25 * 9.0 / 10.0;
        let g2 = 0.25 * 8.0 / 10.0;
        let lrv = g0 + 2.0 * (2.0 / 3.0) * g1 + 2.0 * (1.0 / 3.0) * g2;
        let t = diebold_mariano(&e1, &e2).unwrap();
        assert!((t.stat - 0.5 / (lrv / 10.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dm_rejects_short_or_ragged() {
        assert!(diebold_mariano(&[1.0; 9], &[1.0; 9]).is_err());
        assert!(diebold_mariano(&[1.0; 12], &[1.0; 11]).is_err());
    }

    #[test]
    fn dm_has_power() {
        let mut hits = 0;
        for seed in 0..100 {
            let mut rng = rng_for(seed, 1);
            let (a, b) = (randn(&mut rng, 500, 1.0), randn(&mut rng, 500, 2.0));
            hits += (diebold_mariano(&a, &b).unwrap().p_value < 0.01) as usize;
        }
        assert!(hits >= 95, "{hits}/100");
    }

    fn sample(noise: f64, t: usize) -> TimeSeriesMatrix {
        let d = crate::simulation::SimDesign { t, ..design("low_sparse_r1", -0.4).unwrap() };
        let mut y = generate_sample_scaled(&d, &mut rng_for(4, 0), noise).values().clone();
        for (j, mut c) in y.column_iter_mut().enumerate() {
            c.add_scalar_mut(10.0 * (j + 1) as f64);
        }
        TimeSeriesMatrix::new(y, None).unwrap()
    }

    #[test]
    fn single_forecast_when_window_is_t_minus_one() {
        let y = sample(1.0, 60);
        let opts = ForecastOptions::new(59, 2, RankChoice::Fixed(1), vec![Method::Johansen]);
        let rep = rolling_forecast(&y, &opts).unwrap();
        let m = &rep.methods[0];
        assert_eq!(m.forecasts.nrows(), 1);
        for j in 0..4 {
            assert!((m.mafe[j] - (y.values()[(59, j)] - m.forecasts[(0, j)]).abs()).abs() < 1e-12);
        }
        assert!(rep.dm.is_empty());
    }

    #[test]
    fn mafe_vanishes_without_noise() {
        // noiseless levels are constant, so a correct VECM forecasts them exactly
        let mut prev = f64::INFINITY;
        for noise in [1e-1, 1e-3, 1e-5] {
            let y = sample(noise, 80);
            let opts = ForecastOptions::new(40, 2, RankChoice::Fixed(1), vec![Method::Johansen]);
            let total = rolling_forecast(&y, &opts).unwrap().methods[0].total_mafe;
            assert!(total < prev);
            prev = total;
        }
        assert!(prev < 1e-4, "{prev}");
    }

    #[test]
    fn future_rows_do_not_change_forecasts() {
        let y = sample(1.0, 70);
        let opts = ForecastOptions::new(40, 2, RankChoice::Fixed(1), vec![Method::Johansen]);
        let base = rolling_forecast(&y, &opts).unwrap();
        let mut v = y.values().clone();
        for i in 55..70 {
            for j in 0..4 {
                v[(i, j)] += 100.0 * ((i * 7 + j) as f64).sin();
            }
        }
        let changed = rolling_forecast(&TimeSeriesMatrix::new(v, None).unwrap(), &opts).unwrap();
        // forecast row i targets observation 40 + i and uses rows up to 39 + i
        let (a, b) = (&base.methods[0].forecasts, &changed.methods[0].forecasts);
        assert_eq!(a.rows(0, 16), b.rows(0, 16));
        assert_ne!(a.row(16), b.row(16));
    }

    #[test]
    fn failed_windows_carry_forward() {
        // a constant series makes every Johansen fit singular
        let mut v = sample(1.0, 50).values().clone();
        v.column_mut(3).fill(5.0);
        let y = TimeSeriesMatrix::new(v, None).unwrap();
        let opts = ForecastOptions::new(20, 2, RankChoice::Fixed(1), vec![Method::Johansen]);
        let m = &rolling_forecast(&y, &opts).unwrap().methods[0];
        assert_eq!(m.failures, 30);
        let v = y.values();
        assert_eq!(m.forecasts, v.rows(19, 30).into_owned());
        for j in 0..4 {
            let mad = (0..30).map(|i| (v[(20 + i, j)] - v[(19 + i, j)]).abs()).sum::<f64>() / 30.0;
            assert!((m.mafe[j] - mad).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_windows() {
        let y = sample(1.0, 50);
        let mk = |w| ForecastOptions::new(w, 2, RankChoice::Fixed(1), vec![Method::Johansen]);
        assert!(rolling_forecast(&y, &mk(50)).is_err());
        assert!(rolling_forecast(&y, &mk(5)).is_err());
        assert!(rolling_forecast(&y, &ForecastOptions { methods: vec![], ..mk(30) }).is_err());
    }

    #[test]
    fn report_table_layout() {
        let y = sample(1.0, 60);
        let opts = ForecastOptions::new(45, 2, RankChoice::Fixed(1), vec![Method::SparseLasso, Method::Johansen]);
        let rep = rolling_forecast(&y, &opts).unwrap();
        assert_eq!(rep.dm.len(), 4);
        let (header, rows) = rep.table();
        assert_eq!(header, ["series", "sparse_lasso", "johansen", "dm_p_value"]);
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[4][0], "Total");
        assert!(rep.methods.iter().all(|m| m.mafe.iter().all(|&v| v >= 0.0)));
    }
}
