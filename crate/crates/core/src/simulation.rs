//! Monte Carlo designs and studies for the sparse cointegration estimators.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::estimator::{subspace_angle, Method};
use crate::rank::select_rank;
use crate::tuning::fit_method;
use crate::vecm::{build_design, PenaltyConfig, TimeSeriesMatrix};

/// A data-generating process `Δy_t = aββ'y_{t−1} + γΔy_{t−1} + e_t`,
/// `e_t ~ N(0, I)`, started from `y_0 = Δy_0 = 0`.
#[derive(Debug, Clone, Serialize)]
pub struct SimDesign {
    pub name: String,
    pub q: usize,
    pub t: usize,
    pub beta_true: DMatrix<f64>,
    pub a: f64,
    pub gamma_coef: f64,
    pub r_true: usize,
}

impl SimDesign {
    pub fn new(name: &str, t: usize, beta_true: DMatrix<f64>, a: f64, gamma_coef: f64) -> Self {
        Self {
            name: name.to_string(),
            q: beta_true.nrows(),
            t,
            r_true: beta_true.ncols(),
            beta_true,
            a,
            gamma_coef,
        }
    }

    /// `α = aβ`.
    pub fn alpha(&self) -> DMatrix<f64> {
        &self.beta_true * self.a
    }

    pub fn pi(&self) -> DMatrix<f64> {
        self.alpha() * self.beta_true.transpose()
    }

    /// Whether the design belongs to the small-q, long-sample group.
    pub fn is_low_dimensional(&self) -> bool {
        self.q <= 4
    }
}

/// Adjustment scalars crossed with every base design.
pub const ADJUSTMENTS: [f64; 4] = [-0.2, -0.4, -0.6, -0.8];

/// The six base designs (with `a` unset, see [`design_catalog`]).
pub fn base_designs() -> Vec<SimDesign> {
    let e = |q: usize, idx: &[usize]| {
        let mut m = DMatrix::zeros(q, idx.len());
        for (j, &i) in idx.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        m
    };
    let b1 = e(4, &[0]);
    let b2 = e(4, &[0, 1]);
    let b3 = DMatrix::from_column_slice(4, 1, &[1.0, 0.5, 0.5, 0.5]);
    let mut b4 = DMatrix::zeros(11, 1);
    b4.rows_mut(0, 3).fill(1.0);
    let mut b5 = DMatrix::zeros(11, 4);
    for j in 0..4 {
        let len = if j == 3 { 2 } else { 3 };
        b5.view_mut((3 * j, j), (len, 1)).fill(1.0);
    }
    let mut b6 = DMatrix::from_element(11, 1, 0.1);
    b6.rows_mut(0, 3).fill(1.0);
    vec![
        SimDesign::new("low_sparse_r1", 500, b1, f64::NAN, 0.1),
        SimDesign::new("low_sparse_r2", 500, b2, f64::NAN, 0.1),
        SimDesign::new("low_dense_r1", 500, b3, f64::NAN, 0.1),
        SimDesign::new("high_sparse_r1", 50, b4, f64::NAN, 0.4),
        SimDesign::new("high_sparse_r4", 50, b5, f64::NAN, 0.4),
        SimDesign::new("high_dense_r1", 50, b6, f64::NAN, 0.4),
    ]
}

/// Every base design crossed with every adjustment scalar (24 designs).
pub fn design_catalog() -> Vec<SimDesign> {
    base_designs()
        .into_iter()
        .flat_map(|d| {
            ADJUSTMENTS.iter().map(move |&a| SimDesign { a, ..d.clone() })
        })
        .collect()
}

/// Looks up a base design by name and sets its adjustment scalar.
pub fn design(name: &str, a: f64) -> Option<SimDesign> {
    base_designs()
        .into_iter()
        .find(|d| d.name == name)
        .map(|d| SimDesign { a, ..d })
}

/// Synthetic eight-series system with one sparse cointegrating vector
/// `β = (1, −1, 0, …, 0)'`, used as a bundled stand-in for empirical data.
pub fn fixture_design() -> SimDesign {
    let mut beta = DMatrix::zeros(8, 1);
    beta[(0, 0)] = 1.0;
    beta[(1, 0)] = -1.0;
    SimDesign::new("fixture", 500, beta, -0.8, 0.0)
}

/// A fixture sample with series labelled `s1, …, s8`.
pub fn fixture_sample(seed: u64) -> TimeSeriesMatrix {
    let d = fixture_design();
    let y = generate_sample_scaled(&d, &mut rng_for(seed, 0), 1.0);
    let labels = (1..=d.q).map(|i| format!("s{i}")).collect();
    TimeSeriesMatrix::new(y.values().clone(), Some(labels)).expect("labels match columns")
}

/// Deterministic generator for run `stream` under master `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `T` observations of the design.
pub fn generate_sample(design: &SimDesign, seed: u64) -> TimeSeriesMatrix {
    generate_sample_scaled(design, &mut ChaCha8Rng::seed_from_u64(seed), 1.0)
}

/// Draws `T` observations with errors scaled by `noise`.
pub fn generate_sample_scaled(design: &SimDesign, rng: &mut ChaCha8Rng, noise: f64) -> TimeSeriesMatrix {
    let q = design.q;
    let pi = design.pi();
    let mut y = DMatrix::zeros(design.t, q);
    let mut y_prev = DVector::zeros(q);
    let mut dy_prev = DVector::zeros(q);
    for t in 0..design.t {
        let e = DVector::from_fn(q, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            noise * z
        });
        let dy = &pi * &y_prev + &dy_prev * design.gamma_coef + e;
        y_prev += &dy;
        y.set_row(t, &y_prev.transpose());
        dy_prev = dy;
    }
    TimeSeriesMatrix::new(y, None).expect("simulated data are finite")
}

/// Fitting choices shared by the Monte Carlo studies.
#[derive(Debug, Clone, Serialize)]
pub struct StudyOptions {
    pub lag: usize,
    pub intercept: bool,
    /// Starting penalties and tolerances for the sparse methods.
    pub config: PenaltyConfig,
    /// Scale of the simulated errors.
    pub noise: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            lag: 2,
            intercept: true,
            config: PenaltyConfig {
                penalize_intercept: false,
                ..PenaltyConfig::default()
            },
            noise: 1.0,
        }
    }
}

impl StudyOptions {
    /// Rank selection runs on the model without a constant.
    pub fn rank_study() -> Self {
        Self {
            intercept: false,
            ..Self::default()
        }
    }
}

/// One line of a study report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub design: String,
    pub method: String,
    pub a: f64,
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

/// Average angle of one method on one design.
#[derive(Debug, Clone, Serialize)]
pub struct AngleSummary {
    pub design: String,
    pub a: f64,
    pub method: Method,
    pub mean: f64,
    pub stderr: f64,
    /// Per-run angles in run order; failed runs are excluded.
    pub angles: Vec<f64>,
    pub failures: usize,
    /// Two-sided paired t-test against Johansen on the runs where both fits
    /// succeeded; absent for Johansen itself.
    pub paired_p: Option<f64>,
}

/// Rank-selection frequencies on one design.
#[derive(Debug, Clone, Serialize)]
pub struct RankSummary {
    pub design: String,
    pub a: f64,
    pub r_true: usize,
    /// Share of runs selecting r̂ = 0, …, q.
    pub frequencies: Vec<f64>,
    pub failures: usize,
}

impl RankSummary {
    pub fn correct(&self) -> f64 {
        self.frequencies[self.r_true]
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StudyReport {
    pub m: usize,
    pub angles: Vec<AngleSummary>,
    pub ranks: Vec<RankSummary>,
}

impl StudyReport {
    pub fn angle(&self, design: &str, a: f64, method: Method) -> Option<&AngleSummary> {
        self.angles.iter().find(|s| s.design == design && s.a == a && s.method == method)
    }

    pub fn rank(&self, design: &str, a: f64) -> Option<&RankSummary> {
        self.ranks.iter().find(|s| s.design == design && s.a == a)
    }

    /// Flat rows `design, method, a, metric, value, stderr`.
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        let m = self.m as f64;
        for s in &self.angles {
            let row = |metric: &str, value: f64, stderr: Option<f64>| ReportRow {
                design: s.design.clone(),
                method: s.method.name().to_string(),
                a: s.a,
                metric: metric.to_string(),
                value,
                stderr,
            };
            rows.push(row("angle", s.mean, Some(s.stderr)));
            if let Some(p) = s.paired_p {
                rows.push(row("paired_p", p, None));
            }
            rows.push(row("failures", s.failures as f64, None));
        }
        for s in &self.ranks {
            for (r, &f) in s.frequencies.iter().enumerate() {
                rows.push(ReportRow {
                    design: s.design.clone(),
                    method: "rsc".to_string(),
                    a: s.a,
                    metric: format!("freq_r{r}"),
                    value: f,
                    stderr: Some((f * (1.0 - f) / m).sqrt()),
                });
            }
        }
        rows
    }
}

/// Mean and Monte Carlo standard error.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Two-sided paired t-test p-value for `mean(x − y) = 0`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> f64 {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len();
    if n < 2 {
        return f64::NAN;
    }
    let (mean, se) = mean_stderr(&d);
    if se == 0.0 {
        return if mean == 0.0 { 1.0 } else { 0.0 };
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

fn run_stream(design_index: usize, run: usize) -> u64 {
    ((design_index as u64) << 32) | run as u64
}

/// Average angle between estimated and true cointegration spaces, fitting
/// every method at the true rank on the same `m` samples per design.
pub fn run_angle_study(
    designs: &[SimDesign],
    methods: &[Method],
    m: usize,
    seed: u64,
    opts: &StudyOptions,
) -> Result<StudyReport> {
    if m < 2 {
        return Err(Error::InvalidInput("a study needs at least two runs".into()));
    }
    let mut angles = Vec::new();
    for (di, design) in designs.iter().enumerate() {
        let runs: Vec<Vec<Option<f64>>> = (0..m)
            .into_par_iter()
            .map(|run| {
                let y = generate_sample_scaled(design, &mut rng_for(seed, run_stream(di, run)), opts.noise);
                let Ok(d) = build_design(&y, opts.lag, opts.intercept) else {
                    return vec![None; methods.len()];
                };
                methods
                    .iter()
                    .map(|&method| {
                        fit_method(&d, design.r_true, method, &opts.config)
                            .and_then(|f| subspace_angle(&f.beta, &design.beta_true))
                            .map_err(|e| log::debug!("{} run {run} {method}: {e}", design.name))
                            .ok()
                    })
                    .collect()
            })
            .collect();
        let reference = methods.iter().position(|&mm| mm == Method::Johansen);
        for (mi, &method) in methods.iter().enumerate() {
            let values: Vec<f64> = runs.iter().filter_map(|r| r[mi]).collect();
            let (mean, stderr) = mean_stderr(&values);
            let paired_p = match reference {
                Some(ji) if ji != mi => {
                    let (x, y): (Vec<f64>, Vec<f64>) = runs
                        .iter()
                        .filter_map(|r| Some((r[mi]?, r[ji]?)))
                        .unzip();
                    Some(paired_t_test(&x, &y))
                }
                _ => None,
            };
            angles.push(AngleSummary {
                design: design.name.clone(),
                a: design.a,
                method,
                mean,
                stderr,
                failures: m - values.len(),
                angles: values,
                paired_p,
            });
        }
    }
    Ok(StudyReport {
        m,
        angles,
        ranks: Vec::new(),
    })
}

/// Frequencies of the rank selected by the rank selection criterion.
pub fn run_rank_study(designs: &[SimDesign], m: usize, seed: u64, opts: &StudyOptions) -> Result<StudyReport> {
    if m < 2 {
        return Err(Error::InvalidInput("a study needs at least two runs".into()));
    }
    let mut ranks = Vec::new();
    for (di, design) in designs.iter().enumerate() {
        let picks: Vec<Option<usize>> = (0..m)
            .into_par_iter()
            .map(|run| {
                let y = generate_sample_scaled(design, &mut rng_for(seed, run_stream(di, run)), opts.noise);
                build_design(&y, opts.lag, opts.intercept)
                    .and_then(|d| select_rank(&d, &opts.config))
                    .map(|e| e.r_hat)
                    .map_err(|e| log::debug!("{} run {run}: {e}", design.name))
                    .ok()
            })
            .collect();
        let ok: Vec<usize> = picks.iter().flatten().copied().collect();
        let mut frequencies = vec![0.0; design.q + 1];
        for &r in &ok {
            frequencies[r] += 1.0;
        }
        if !ok.is_empty() {
            frequencies.iter_mut().for_each(|f| *f /= ok.len() as f64);
        }
        ranks.push(RankSummary {
            design: design.name.clone(),
            a: design.a,
            r_true: design.r_true,
            frequencies,
            failures: m - ok.len(),
        });
    }
    Ok(StudyReport {
        m,
        angles: Vec::new(),
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_has_every_cell() {
        let cat = design_catalog();
        assert_eq!(cat.len(), 24);
        assert!(cat.iter().all(|d| d.a.is_finite() && d.beta_true.ncols() == d.r_true));
        let b5 = design("high_sparse_r4", -0.2).unwrap().beta_true;
        assert_eq!(b5.column(3).iter().filter(|&&v| v != 0.0).count(), 2);
        assert_eq!((b5[(9, 3)], b5[(10, 3)]), (1.0, 1.0));
        let b3 = design("low_dense_r1", -0.2).unwrap().beta_true;
        assert!(b3.iter().all(|&v| v != 0.0));
    }

    #[test]
    fn sample_is_reproducible() {
        let d = design("low_sparse_r2", -0.4).unwrap();
        assert_eq!(generate_sample(&d, 3), generate_sample(&d, 3));
        assert_ne!(generate_sample(&d, 3), generate_sample(&d, 4));
        assert_eq!(generate_sample(&d, 3).nobs(), 500);
    }

    #[test]
    fn first_observation_is_the_first_shock() {
        let d = design("high_sparse_r1", -0.6).unwrap();
        let mut rng = rng_for(1, 0);
        let shock: Vec<f64> = (0..d.q).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = generate_sample_scaled(&d, &mut rng_for(1, 0), 1.0);
        for (j, s) in shock.iter().enumerate() {
            assert_eq!(y.values()[(0, j)], *s);
        }
    }

    #[test]
    fn cointegrating_relation_is_stationary() {
        // β'y_t is an AR process with root 1 + a·β'β, while the free series wander
        let d = design("low_sparse_r1", -0.8).unwrap();
        let y = generate_sample_scaled(&d, &mut rng_for(8, 0), 1.0);
        let spread = y.values() * &d.beta_true;
        let free = y.values().column(3).into_owned();
        let var = |v: &DVector<f64>| v.variance();
        assert!(var(&spread.column(0).into_owned()) < 3.0);
        assert!(var(&free) > 10.0 * var(&spread.column(0).into_owned()));
    }

    #[test]
    fn noiseless_sample_is_zero() {
        let d = design("low_sparse_r1", -0.2).unwrap();
        let y = generate_sample_scaled(&d, &mut rng_for(0, 0), 0.0);
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_stderr(&[0.3, 0.3]), (0.3, 0.0));
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-15 && (se - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
        assert_eq!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(paired_t_test(&[1.0, 2.0], &[0.0, 1.0]), 0.0);
        // d = (1, 2, 3): t = 2/(1/√3) with 2 df, p = 1 − t/√(t² + 2) in closed form
        let t = 2.0 * 3.0f64.sqrt();
        let expected = 1.0 - t / (t * t + 2.0).sqrt();
        assert!((paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]) - expected).abs() < 1e-10);
    }

    #[test]
    fn angle_study_is_deterministic() {
        let d = vec![SimDesign { t: 120, ..design("low_sparse_r1", -0.6).unwrap() }];
        let methods = [Method::Johansen, Method::SparseLasso];
        let opts = StudyOptions::default();
        let a = run_angle_study(&d, &methods, 4, 11, &opts).unwrap();
        let b = run_angle_study(&d, &methods, 4, 11, &opts).unwrap();
        assert_eq!(a.rows(), b.rows());
        let j = a.angle("low_sparse_r1", -0.6, Method::Johansen).unwrap();
        assert_eq!(j.angles.len() + j.failures, 4);
        assert!(j.paired_p.is_none());
        assert!(a.angle("low_sparse_r1", -0.6, Method::SparseLasso).unwrap().paired_p.is_some());
        assert!(run_angle_study(&d, &methods, 1, 11, &opts).is_err());
    }

    #[test]
    fn rank_frequencies_sum_to_one() {
        let d = vec![SimDesign { t: 150, ..design("low_sparse_r2", -0.8).unwrap() }];
        let rep = run_rank_study(&d, 6, 2, &StudyOptions::rank_study()).unwrap();
        let s = rep.rank("low_sparse_r2", -0.8).unwrap();
        assert_eq!(s.frequencies.len(), 5);
        assert!((s.frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let rows = rep.rows();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.method == "rsc" && r.metric.starts_with("freq_r")));
    }

    #[test]
    fn fixture_is_labelled_and_seeded() {
        let y = fixture_sample(0);
        assert_eq!((y.nobs(), y.nseries()), (500, 8));
        assert_eq!(y.labels().unwrap()[7], "s8");
        assert_eq!(y, fixture_sample(0));
        assert_ne!(y, fixture_sample(1));
        let d = fixture_design();
        assert_eq!(d.beta_true.iter().filter(|&&v| v != 0.0).count(), 2);
        // spread root 1 + a·β'β must lie inside the unit circle
        let root = 1.0 + d.a * d.beta_true.norm_squared();
        assert!(root.abs() < 1.0);
    }
}
