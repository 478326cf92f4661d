use crate::config::{CommandKind, RunConfig, Study};
use crate::report::{self, rows, FitResult, ForecastResult, Outcome, Penalties, RankResult, ZeroSumResult};
use crate::{parse_csv, CliError};
use nalgebra::DMatrix;
use sparsecoint::estimator::{fit_sparse_vecm, johansen_ml, short_run_at_rank, CointegrationFit, Method};
use sparsecoint::forecast::{rolling_forecast, ForecastOptions, RankChoice};
use sparsecoint::inference::{bootstrap_zero_sum_test, BootstrapOptions};
use sparsecoint::rank::select_rank;
use sparsecoint::simulation::{design, run_angle_study, run_rank_study, StudyOptions};
use sparsecoint::tuning::fit_tuned;
use sparsecoint::{build_design, PenaltyConfig, TimeSeriesMatrix, VecmDesign};
use std::io::Write;

/// Runs the command and writes its report; returns the process exit code
/// (0 success, 1 data or usage error, 2 numerical failure).
pub fn run(config: &RunConfig) -> i32 {
    let result = execute(config).and_then(|outcome| {
        let bytes = report::render(config, &outcome)?;
        match &config.output_path {
            Some(path) => report::write_atomic(path, &bytes),
            None => std::io::stdout()
                .lock()
                .write_all(&bytes)
                .map_err(|e| CliError::io("<stdout>", e)),
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs the command without writing anything.
pub fn execute(config: &RunConfig) -> Result<Outcome, CliError> {
    match config.command {
        CommandKind::Fit => fit(config).map(|f| Outcome::Fit(Box::new(f))),
        CommandKind::Rank => {
            let series = load(config)?;
            let design = build_design(&series, config.lag, config.intercept)?;
            let estimate = select_rank(&design, &config.base_penalty())?;
            log::info!(
                "rank selection: r = {} after {} iterations (mu = {:.4})",
                estimate.r_hat,
                estimate.iterations,
                estimate.mu
            );
            Ok(Outcome::Rank(RankResult {
                labels: series.labels_or_default(),
                estimate,
            }))
        }
        CommandKind::Simulate => simulate(config).map(Outcome::Simulate),
        CommandKind::TestZerosum => zero_sum(config).map(Outcome::ZeroSum),
        CommandKind::Forecast => {
            let series = load(config)?;
            let rank = config.rank.unwrap_or(RankChoice::Auto);
            if let RankChoice::Fixed(r) = rank {
                check_rank(r, series.nseries())?;
            }
            let window = config.window.unwrap_or_default();
            let mut opts = ForecastOptions::new(window, config.lag, rank, config.methods.clone());
            opts.intercept = config.intercept;
            opts.config = config.base_penalty();
            let report = rolling_forecast(&series, &opts)?;
            for m in &report.methods {
                if m.failures > 0 {
                    log::warn!("{}: {} windows fell back to a random walk", m.method, m.failures);
                }
            }
            Ok(Outcome::Forecast(ForecastResult::from(report)))
        }
    }
}

fn load(config: &RunConfig) -> Result<TimeSeriesMatrix, CliError> {
    let path = config
        .input_path
        .as_deref()
        .ok_or_else(|| CliError::Usage("an input file is required".into()))?;
    let series = parse_csv(path)?;
    if series.nseries() < 2 {
        return Err(CliError::Usage(format!(
            "{}: cointegration needs at least 2 series, found {}",
            path.display(),
            series.nseries()
        )));
    }
    Ok(series)
}

fn check_rank(r: usize, q: usize) -> Result<(), CliError> {
    if r > q {
        return Err(CliError::Usage(format!("rank {r} exceeds the number of series {q}")));
    }
    Ok(())
}

fn fit(config: &RunConfig) -> Result<FitResult, CliError> {
    let series = load(config)?;
    let q = series.nseries();
    let design = build_design(&series, config.lag, config.intercept)?;
    let base = config.base_penalty();
    let (r, rank_selection) = match config.rank.unwrap_or(RankChoice::Auto) {
        RankChoice::Fixed(r) => {
            check_rank(r, q)?;
            (r, None)
        }
        RankChoice::Auto => {
            let est = select_rank(&design, &base)?;
            log::info!("selected rank {}", est.r_hat);
            (est.r_hat, Some(est))
        }
    };
    let method = config.methods[0];
    let labels = series.labels_or_default();
    if r == 0 {
        log::warn!("rank 0: no cointegration, reporting the VAR in differences");
        return rank_zero(&design, &base, method, labels, rank_selection);
    }

    let (fit, tuned) = match method.beta_penalty() {
        None => (johansen_ml(&design, r)?, false),
        Some(penalty) if config.penalties.any() => {
            let p = &config.penalties;
            let cfg = PenaltyConfig {
                lambda1: p.lambda1.clone().unwrap_or_else(|| vec![0.0]),
                lambda2: p.lambda2.unwrap_or(0.0),
                lambda3: p.lambda3.unwrap_or(0.0),
                beta_penalty: penalty,
                ..base
            };
            cfg.validate()?;
            (fit_sparse_vecm(&design, r, &cfg)?, false)
        }
        Some(penalty) => {
            let cfg = PenaltyConfig {
                beta_penalty: penalty,
                ..base
            };
            (fit_tuned(&design, r, &cfg)?.fit, true)
        }
    };
    if fit.converged {
        log::info!("{method} converged after {} iterations", fit.iterations);
    } else {
        log::warn!("{method} stopped at the iteration limit ({}) without converging", fit.iterations);
    }
    Ok(fit_result(fit, &design, method, labels, rank_selection, tuned))
}

fn gamma_terms(design: &VecmDesign, labels: &[String]) -> Vec<String> {
    let mut terms: Vec<String> = (1..design.lag)
        .flat_map(|k| labels.iter().map(move |l| format!("d.{l}.lag{k}")))
        .collect();
    if design.intercept {
        terms.push("const".into());
    }
    terms
}

fn support(beta: &DMatrix<f64>, labels: &[String]) -> Vec<Vec<String>> {
    beta.column_iter()
        .map(|c| {
            c.iter()
                .zip(labels)
                .filter(|(v, _)| **v != 0.0)
                .map(|(_, l)| l.clone())
                .collect()
        })
        .collect()
}

fn fit_result(
    fit: CointegrationFit,
    design: &VecmDesign,
    method: Method,
    labels: Vec<String>,
    rank_selection: Option<sparsecoint::rank::RankEstimate>,
    tuned: bool,
) -> FitResult {
    let (alpha, beta) = fit.normalized();
    FitResult {
        method,
        rank: fit.rank,
        rank_selection,
        beta_support: support(&beta, &labels),
        gamma_terms: gamma_terms(design, &labels),
        labels,
        beta: rows(&beta),
        alpha: rows(&alpha),
        pi: rows(&fit.pi()),
        gamma: rows(&fit.gamma),
        omega: rows(&fit.omega),
        objective: Some(fit.objective),
        iterations: fit.iterations,
        converged: fit.converged,
        degenerate: fit.degenerate,
        penalties: Penalties {
            lambda1: fit.lambda1,
            lambda2: fit.lambda2,
            lambda3: fit.lambda3,
            tuned,
        },
    }
}

/// Γ by least squares with Π = 0 and Ω the inverse residual covariance.
fn rank_zero(
    design: &VecmDesign,
    base: &PenaltyConfig,
    method: Method,
    labels: Vec<String>,
    rank_selection: Option<sparsecoint::rank::RankEstimate>,
) -> Result<FitResult, CliError> {
    let q = design.nseries();
    let gamma = short_run_at_rank(design, 0, base)?;
    let resid = &design.y - &design.x * &gamma;
    let sigma = resid.tr_mul(&resid) / design.nobs() as f64;
    let omega = sigma
        .try_inverse()
        .ok_or_else(|| sparsecoint::Error::Singular("residual covariance at rank 0".into()))?;
    Ok(FitResult {
        method,
        rank: 0,
        rank_selection,
        gamma_terms: gamma_terms(design, &labels),
        beta: vec![Vec::new(); q],
        beta_support: Vec::new(),
        alpha: vec![Vec::new(); q],
        pi: rows(&DMatrix::zeros(q, q)),
        gamma: rows(&gamma),
        omega: rows(&omega),
        labels,
        objective: None,
        iterations: 0,
        converged: true,
        degenerate: false,
        penalties: Penalties {
            lambda1: Vec::new(),
            lambda2: 0.0,
            lambda3: 0.0,
            tuned: false,
        },
    })
}

fn simulate(config: &RunConfig) -> Result<sparsecoint::simulation::StudyReport, CliError> {
    let study = config.study.unwrap_or(Study::Angle);
    let mut opts = match study {
        Study::Angle => StudyOptions::default(),
        Study::Rank => StudyOptions::rank_study(),
    };
    opts.lag = config.lag;
    opts.intercept = config.intercept;
    opts.config = config.base_penalty();
    let designs: Vec<_> = config
        .designs
        .iter()
        .flat_map(|name| config.adjustments.iter().filter_map(move |&a| design(name, a)))
        .collect();
    let m = config.runs.unwrap_or(100);
    log::info!("{} designs, {m} runs each", designs.len());
    let report = match study {
        Study::Angle => run_angle_study(&designs, &config.methods, m, config.seed, &opts)?,
        Study::Rank => run_rank_study(&designs, m, config.seed, &opts)?,
    };
    Ok(report)
}

fn zero_sum(config: &RunConfig) -> Result<ZeroSumResult, CliError> {
    let series = load(config)?;
    let opts = BootstrapOptions {
        lag: config.lag,
        intercept: config.intercept,
        method: config.methods[0],
        replications: config.replications.unwrap_or(999),
        eta: config.eta.unwrap_or(0.05),
        seed: config.seed,
        config: config.base_penalty(),
    };
    let res = bootstrap_zero_sum_test(&series, &opts)?;
    if res.retries > 0 {
        log::warn!("{} bootstrap samples were redrawn after failed fits", res.retries);
    }
    Ok(ZeroSumResult {
        method: opts.method,
        labels: series.labels_or_default(),
        beta: rows(&res.beta),
        sums: res.theta_hat,
        q_stat: res.q_stat,
        p_value: res.p_value,
        eta: res.eta,
        reject: res.reject,
        replications: res.replications,
        regularized: res.regularized,
        retries: res.retries,
        q_boot: res.q_boot,
    })
}
