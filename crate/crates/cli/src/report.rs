//! Report payloads, their CSV layouts and atomic output.

use crate::config::{RunConfig, Study};
use crate::CliError;
use nalgebra::DMatrix;
use serde::Serialize;
use sparsecoint::estimator::Method;
use sparsecoint::forecast::{DmTest, ForecastReport};
use sparsecoint::rank::RankEstimate;
use sparsecoint::simulation::StudyReport;
use std::io::Write;
use std::path::Path;

/// Bumped whenever a field of a JSON report changes meaning or disappears.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct Report<'a> {
    pub schema_version: u32,
    pub command: &'static str,
    pub config: &'a RunConfig,
    pub result: &'a Outcome,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Outcome {
    Fit(Box<FitResult>),
    Rank(RankResult),
    Simulate(StudyReport),
    ZeroSum(ZeroSumResult),
    Forecast(ForecastResult),
}

/// Matrices are reported row by row.
pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Penalties {
    pub lambda1: Vec<f64>,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Chosen by cross-validation and BIC rather than fixed.
    pub tuned: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub method: Method,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_selection: Option<RankEstimate>,
    pub labels: Vec<String>,
    /// q×r, first nonzero entry of each column equal to one.
    pub beta: Rows,
    /// Labels with a nonzero coefficient, per cointegrating vector.
    pub beta_support: Vec<Vec<String>>,
    /// q×r, matching `beta` so that `Π = αβ'`.
    pub alpha: Rows,
    pub pi: Rows,
    /// Regressor names of the rows of `gamma`.
    pub gamma_terms: Vec<String>,
    pub gamma: Rows,
    pub omega: Rows,
    /// Penalized negative log-likelihood; absent at rank zero.
    pub objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
    pub penalties: Penalties,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankResult {
    pub labels: Vec<String>,
    #[serde(flatten)]
    pub estimate: RankEstimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZeroSumResult {
    pub method: Method,
    pub labels: Vec<String>,
    /// Estimate on the data, q×(q−1), leading-one normalization.
    pub beta: Rows,
    /// Column sums of `beta`.
    pub sums: Vec<f64>,
    pub q_stat: f64,
    pub p_value: f64,
    pub eta: f64,
    pub reject: bool,
    pub replications: usize,
    pub regularized: bool,
    pub retries: usize,
    pub q_boot: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodForecastResult {
    pub method: Method,
    pub mafe: Vec<f64>,
    pub total_mafe: f64,
    pub failures: usize,
    /// Row i forecasts observation `window + i` (0-based).
    pub forecasts: Rows,
    pub errors: Rows,
    pub fallback: Vec<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastResult {
    pub labels: Vec<String>,
    pub window: usize,
    pub lag: usize,
    pub rank: usize,
    pub methods: Vec<MethodForecastResult>,
    pub dm: Vec<DmTest>,
    #[serde(skip)]
    table: (Vec<String>, Vec<Vec<String>>),
}

impl From<ForecastReport> for ForecastResult {
    fn from(r: ForecastReport) -> Self {
        let table = r.table();
        Self {
            methods: r
                .methods
                .into_iter()
                .map(|m| MethodForecastResult {
                    method: m.method,
                    mafe: m.mafe,
                    total_mafe: m.total_mafe,
                    failures: m.failures,
                    forecasts: rows(&m.forecasts),
                    errors: rows(&m.errors),
                    fallback: m.fallback,
                })
                .collect(),
            labels: r.labels,
            window: r.window,
            lag: r.lag,
            rank: r.rank,
            dm: r.dm,
            table,
        }
    }
}

/// Zero prints as `0` so that the sparsity pattern stands out.
fn num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".into()
    }
}

fn beta_header(r: usize) -> impl Iterator<Item = String> {
    (1..=r).map(|k| format!("beta_{k}"))
}

impl Outcome {
    /// Header and rows of the CSV report.
    pub fn table(&self, config: &RunConfig) -> (Vec<String>, Vec<Vec<String>>) {
        match self {
            Outcome::Fit(f) => {
                let mut header = vec!["variable".to_string()];
                header.extend(beta_header(f.rank));
                let body = f
                    .labels
                    .iter()
                    .zip(&f.beta)
                    .map(|(l, b)| std::iter::once(l.clone()).chain(b.iter().map(|&v| num(v))).collect())
                    .collect();
                (header, body)
            }
            Outcome::Rank(r) => {
                let header = ["component", "eigenvalue", "mu", "above_mu"].map(String::from).to_vec();
                let body = r
                    .estimate
                    .eigenvalues
                    .iter()
                    .enumerate()
                    .map(|(k, &ev)| {
                        vec![
                            (k + 1).to_string(),
                            num(ev),
                            num(r.estimate.mu),
                            (k < r.estimate.r_hat).to_string(),
                        ]
                    })
                    .collect();
                (header, body)
            }
            Outcome::Simulate(s) => match config.study {
                Some(Study::Rank) => rank_study_table(s),
                _ => angle_study_table(s, &config.adjustments),
            },
            Outcome::ZeroSum(z) => {
                let r = z.sums.len();
                let mut header = vec!["method".to_string(), "variable".to_string()];
                header.extend(beta_header(r));
                let name = z.method.name().to_string();
                let line = |label: &str, vals: &[f64]| {
                    let mut row = vec![name.clone(), label.to_string()];
                    row.extend(vals.iter().map(|&v| num(v)));
                    row
                };
                let mut body: Vec<Vec<String>> =
                    z.labels.iter().zip(&z.beta).map(|(l, b)| line(l, b)).collect();
                body.push(line("sum", &z.sums));
                let mut p = vec![name.clone(), "p_value".into(), format!("{:.6}", z.p_value)];
                p.resize(r + 2, String::new());
                body.push(p);
                (header, body)
            }
            Outcome::Forecast(f) => f.table.clone(),
        }
    }
}

/// One row per design and method, columns per adjustment scalar; the
/// standard error and paired p-value against Johansen follow the mean.
fn angle_study_table(s: &StudyReport, adjustments: &[f64]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["design".to_string(), "method".to_string(), "statistic".to_string()];
    header.extend(adjustments.iter().map(|a| format!("a={a}")));
    let mut keys: Vec<(&str, Method)> = Vec::new();
    for a in &s.angles {
        if !keys.contains(&(a.design.as_str(), a.method)) {
            keys.push((a.design.as_str(), a.method));
        }
    }
    let mut body = Vec::new();
    for (design, method) in keys {
        let cells = |f: &dyn Fn(&sparsecoint::simulation::AngleSummary) -> String| -> Vec<String> {
            adjustments
                .iter()
                .map(|&a| s.angle(design, a, method).map_or(String::new(), f))
                .collect()
        };
        let stats: [(&str, Vec<String>); 4] = [
            ("angle", cells(&|x| format!("{:.4}", x.mean))),
            ("stderr", cells(&|x| format!("{:.4}", x.stderr))),
            ("paired_p", cells(&|x| x.paired_p.map_or(String::new(), |p| format!("{p:.4}")))),
            ("failures", cells(&|x| x.failures.to_string())),
        ];
        for (stat, values) in stats {
            if stat == "paired_p" && method == Method::Johansen {
                continue;
            }
            let mut row = vec![design.to_string(), method.name().to_string(), stat.to_string()];
            row.extend(values);
            body.push(row);
        }
    }
    (header, body)
}

/// One row per design and adjustment scalar with the frequency of each rank.
fn rank_study_table(s: &StudyReport) -> (Vec<String>, Vec<Vec<String>>) {
    let width = s.ranks.iter().map(|r| r.frequencies.len()).max().unwrap_or(0);
    let mut header = ["design", "a", "r_true"].map(String::from).to_vec();
    header.extend((0..width).map(|r| format!("r={r}")));
    header.push("failures".into());
    let body = s
        .ranks
        .iter()
        .map(|r| {
            let mut row = vec![r.design.clone(), r.a.to_string(), r.r_true.to_string()];
            row.extend((0..width).map(|k| r.frequencies.get(k).map_or(String::new(), |f| format!("{f:.2}"))));
            row.push(r.failures.to_string());
            row
        })
        .collect();
    (header, body)
}

/// Serialized report in the configured format.
pub fn render(config: &RunConfig, outcome: &Outcome) -> Result<Vec<u8>, CliError> {
    match config.output_format {
        crate::OutputFormat::Json => {
            let report = Report {
                schema_version: SCHEMA_VERSION,
                command: config.command.name(),
                config,
                result: outcome,
            };
            let mut out = serde_json::to_vec_pretty(&report)
                .map_err(|e| CliError::Usage(format!("cannot serialize report: {e}")))?;
            out.push(b'\n');
            Ok(out)
        }
        crate::OutputFormat::Csv => {
            let (header, body) = outcome.table(config);
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| CliError::Usage(format!("cannot write CSV: {e}"));
            w.write_record(&header).map_err(csv_err)?;
            for row in body {
                w.write_record(&row).map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| CliError::Usage(format!("cannot write CSV: {e}")))
        }
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial report.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let perms = std::fs::Permissions::from_mode(0o644);
        std::fs::set_permissions(tmp.path(), perms).map_err(|e| CliError::io(tmp.path(), e))?;
    }
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}
