//! Command-line options and their resolution into a [`RunConfig`].
//!
//! A `--config FILE` JSON object supplies option values by flag name
//! (`{"rank": 1, "methods": ["johansen", "sparse-lasso"]}`). Its entries are
//! placed before the command-line flags, so flags given on the command line
//! win.

use crate::CliError;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use sparsecoint::estimator::Method;
use sparsecoint::forecast::RankChoice;
use sparsecoint::simulation::{base_designs, ADJUSTMENTS};
use sparsecoint::PenaltyConfig;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

/// Master seed used unless `--seed` says otherwise.
pub const DEFAULT_SEED: u64 = 20_160_913;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// Average angle between estimated and true cointegration spaces
    Angle,
    /// Frequencies of the selected cointegration rank
    Rank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Fit,
    Rank,
    Simulate,
    TestZerosum,
    Forecast,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Fit => "fit",
            CommandKind::Rank => "rank",
            CommandKind::Simulate => "simulate",
            CommandKind::TestZerosum => "test-zerosum",
            CommandKind::Forecast => "forecast",
        }
    }
}

/// Fixed penalties for `fit`; any value given switches tuning off.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PenaltyOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda3: Option<f64>,
}

impl PenaltyOverrides {
    pub fn any(&self) -> bool {
        self.lambda1.is_some() || self.lambda2.is_some() || self.lambda3.is_some()
    }
}

/// Fully resolved options of one invocation; embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_path: Option<PathBuf>,
    pub lag: usize,
    pub intercept: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<RankChoice>,
    /// One method for `fit` and `test-zerosum`, several for the others.
    pub methods: Vec<Method>,
    pub penalties: PenaltyOverrides,
    pub tol_outer: f64,
    pub max_outer_iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study: Option<Study>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub designs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub adjustments: Vec<f64>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    pub output_format: OutputFormat,
}

impl RunConfig {
    /// Starting penalty configuration with the tolerance overrides applied.
    /// The intercept is never penalized.
    pub fn base_penalty(&self) -> PenaltyConfig {
        PenaltyConfig {
            tol_outer: self.tol_outer,
            max_outer_iter: self.max_outer_iter,
            penalize_intercept: false,
            ..PenaltyConfig::default()
        }
    }
}

/// Result of argument resolution.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: RunConfig,
    /// Count of `-v` flags.
    pub verbosity: u8,
}

#[derive(Debug, Parser)]
#[command(name = "sparsecoint", version, about = "Sparse cointegration analysis of multivariate time series")]
struct Cli {
    /// Log more on standard error (-v info, -vv debug)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Debug, Subcommand)]
enum Commands {
    /// Estimate cointegrating vectors, loadings and short-run dynamics
    #[command(args_override_self = true)]
    Fit(FitArgs),
    /// Select the cointegration rank
    #[command(args_override_self = true)]
    Rank(RankArgs),
    /// Run a Monte Carlo study on the built-in designs
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Bootstrap test that every cointegrating vector sums to zero
    #[command(name = "test-zerosum", args_override_self = true)]
    TestZerosum(ZeroSumArgs),
    /// Rolling one-step-ahead forecasts with Diebold-Mariano comparisons
    #[command(args_override_self = true)]
    Forecast(ForecastArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON object of option values; command-line flags take precedence
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed, or `random` to draw one (the drawn value is reported)
    #[arg(long, default_value = "default", value_parser = parse_seed)]
    seed: SeedArg,

    /// Report file, written atomically; standard output when omitted
    #[arg(short, long, value_name = "PATH")]
    output: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,

    /// Outer convergence tolerance of the sparse estimator
    #[arg(long)]
    tol: Option<f64>,

    /// Outer iteration limit of the sparse estimator
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// CSV with a header row, an optional leading date column and numeric series
    #[arg(short, long, value_name = "CSV")]
    input: PathBuf,

    /// Lag order of the VECM in levels
    #[arg(long = "p", visible_alias = "lag", value_name = "P", default_value_t = 1)]
    lag: usize,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    common: CommonArgs,

    /// Cointegration rank, or `auto` for the rank selection criterion
    #[arg(long, default_value = "auto", value_parser = parse_rank)]
    rank: RankChoice,

    #[arg(long, default_value = "sparse-lasso", value_parser = parse_method)]
    method: Method,

    /// Include an unpenalized constant
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    intercept: bool,

    /// Fixed λ₁, one value or one per vector (disables tuning)
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', num_args = 1)]
    lambda1: Option<Vec<f64>>,

    /// Fixed ridge penalty on Γ (disables tuning)
    #[arg(long)]
    lambda2: Option<f64>,

    /// Fixed graphical lasso penalty on Ω (disables tuning)
    #[arg(long)]
    lambda3: Option<f64>,
}

#[derive(Debug, Args)]
struct RankArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    common: CommonArgs,

    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    intercept: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,

    #[arg(long, value_enum, default_value_t = Study::Angle)]
    study: Study,

    /// `low`, `high`, `all` or design names
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', num_args = 1, default_value = "all")]
    designs: Vec<String>,

    /// Adjustment scalars a
    #[arg(long = "a", action = ArgAction::Set, value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
    adjustments: Option<Vec<f64>>,

    /// Methods compared in the angle study
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', num_args = 1,
          default_value = "johansen,sparse-lasso,sparse-adaptive-lasso", value_parser = parse_method)]
    methods: Vec<Method>,

    /// Monte Carlo runs per design
    #[arg(long = "M", visible_alias = "runs", value_name = "M", default_value_t = 100)]
    runs: usize,

    /// Lag order of the fitted VECM
    #[arg(long = "p", visible_alias = "lag", value_name = "P")]
    lag: Option<usize>,

    /// Fit a constant (default: yes for the angle study, no for the rank study)
    #[arg(long, action = ArgAction::Set)]
    intercept: Option<bool>,
}

#[derive(Debug, Args)]
struct ZeroSumArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    common: CommonArgs,

    #[arg(long, default_value = "johansen", value_parser = parse_method)]
    method: Method,

    /// Bootstrap replications
    #[arg(long = "B", visible_alias = "replications", value_name = "B", default_value_t = 999)]
    replications: usize,

    /// Significance level
    #[arg(long, default_value_t = 0.05)]
    eta: f64,

    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    intercept: bool,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    common: CommonArgs,

    /// Estimation window length
    #[arg(long)]
    window: usize,

    #[arg(long, default_value = "auto", value_parser = parse_rank)]
    rank: RankChoice,

    /// Methods to compare; the Diebold-Mariano tests use the first two
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', num_args = 1,
          default_value = "sparse-lasso,johansen", value_parser = parse_method)]
    methods: Vec<Method>,

    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    intercept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SeedArg {
    Fixed(u64),
    Random,
}

fn parse_seed(s: &str) -> Result<SeedArg, String> {
    match s {
        "default" => Ok(SeedArg::Fixed(DEFAULT_SEED)),
        "random" => Ok(SeedArg::Random),
        _ => s
            .parse()
            .map(SeedArg::Fixed)
            .map_err(|_| format!("expected a non-negative integer or `random`, got '{s}'")),
    }
}

fn parse_rank(s: &str) -> Result<RankChoice, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(RankChoice::Auto);
    }
    s.parse()
        .map(RankChoice::Fixed)
        .map_err(|_| format!("expected a rank or `auto`, got '{s}'"))
}

/// Accepts `johansen`, `sparse-lasso` and `sparse-adaptive-lasso`, with
/// underscores or without the `sparse` prefix.
pub fn parse_method(s: &str) -> Result<Method, String> {
    let key = s.trim().to_ascii_lowercase().replace('_', "-");
    match key.trim_start_matches("sparse-") {
        "johansen" => Ok(Method::Johansen),
        "lasso" => Ok(Method::SparseLasso),
        "adaptive-lasso" => Ok(Method::SparseAdaptiveLasso),
        _ => Err(format!(
            "unknown method '{s}' (expected johansen, sparse-lasso or sparse-adaptive-lasso)"
        )),
    }
}

/// Parses `args` (program name first), merging a `--config` file.
pub fn resolve<I, T>(args: I) -> Result<Invocation, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if let Some(path) = config_path(&args) {
        let extra = config_file_args(&path)?;
        if let Some(at) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) {
            args.splice(at + 2..at + 2, extra);
        }
    }
    let cli = Cli::try_parse_from(args)?;
    let config = match cli.command {
        Commands::Fit(a) => {
            let mut c = base(CommandKind::Fit, Some(a.input), &a.common)?;
            c.intercept = a.intercept;
            c.rank = Some(a.rank);
            c.methods = vec![a.method];
            c.penalties = PenaltyOverrides {
                lambda1: a.lambda1,
                lambda2: a.lambda2,
                lambda3: a.lambda3,
            };
            c
        }
        Commands::Rank(a) => {
            let mut c = base(CommandKind::Rank, Some(a.input), &a.common)?;
            c.intercept = a.intercept;
            c
        }
        Commands::Simulate(a) => {
            let mut c = base(CommandKind::Simulate, None, &a.common)?;
            c.study = Some(a.study);
            c.lag = a.lag.unwrap_or(2);
            c.intercept = a.intercept.unwrap_or(a.study == Study::Angle);
            c.designs = expand_designs(&a.designs)?;
            c.adjustments = a.adjustments.unwrap_or_else(|| ADJUSTMENTS.to_vec());
            if a.study == Study::Angle {
                c.methods = a.methods;
            }
            c.runs = Some(a.runs);
            c
        }
        Commands::TestZerosum(a) => {
            let mut c = base(CommandKind::TestZerosum, Some(a.input), &a.common)?;
            c.intercept = a.intercept;
            c.methods = vec![a.method];
            c.replications = Some(a.replications);
            c.eta = Some(a.eta);
            c
        }
        Commands::Forecast(a) => {
            let mut c = base(CommandKind::Forecast, Some(a.input), &a.common)?;
            c.intercept = a.intercept;
            c.rank = Some(a.rank);
            c.methods = a.methods;
            c.window = Some(a.window);
            c
        }
    };
    validate(&config)?;
    Ok(Invocation {
        config,
        verbosity: cli.verbose,
    })
}

fn base(command: CommandKind, input: Option<InputArgs>, common: &CommonArgs) -> Result<RunConfig, CliError> {
    let defaults = PenaltyConfig::default();
    let (input_path, lag) = match input {
        Some(i) => {
            if !i.input.is_file() {
                return Err(CliError::Usage(format!(
                    "input file {} does not exist",
                    i.input.display()
                )));
            }
            (Some(i.input), i.lag)
        }
        None => (None, 1),
    };
    Ok(RunConfig {
        command,
        input_path,
        lag,
        intercept: true,
        rank: None,
        methods: Vec::new(),
        penalties: PenaltyOverrides::default(),
        tol_outer: common.tol.unwrap_or(defaults.tol_outer),
        max_outer_iter: common.max_iter.unwrap_or(defaults.max_outer_iter),
        replications: None,
        eta: None,
        window: None,
        runs: None,
        study: None,
        designs: Vec::new(),
        adjustments: Vec::new(),
        seed: match common.seed {
            SeedArg::Fixed(s) => s,
            SeedArg::Random => rand::random(),
        },
        output_path: common.output.clone(),
        output_format: common.format,
    })
}

fn validate(c: &RunConfig) -> Result<(), CliError> {
    let usage = |m: String| Err(CliError::Usage(m));
    if c.lag == 0 {
        return usage("lag order p must be at least 1".into());
    }
    if !(c.tol_outer > 0.0 && c.tol_outer.is_finite()) || c.max_outer_iter == 0 {
        return usage("--tol must be positive and --max-iter at least 1".into());
    }
    if c.command != CommandKind::Rank && c.command != CommandKind::Simulate && c.methods.is_empty() {
        return usage("at least one method is required".into());
    }
    if c.command == CommandKind::Forecast && c.methods.len() > 1 && c.methods[0] == c.methods[1] {
        return usage("the first two forecast methods must differ".into());
    }
    if c.command == CommandKind::Fit && c.penalties.any() && c.methods[0] == Method::Johansen {
        return usage("penalty overrides apply to the sparse methods only".into());
    }
    let p = &c.penalties;
    let lambdas = p.lambda1.iter().flatten().chain(p.lambda2.iter()).chain(p.lambda3.iter());
    if lambdas.clone().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return usage("penalties must be finite and non-negative".into());
    }
    if let Some(eta) = c.eta {
        if !(eta > 0.0 && eta < 1.0) {
            return usage(format!("eta must lie in (0, 1), got {eta}"));
        }
    }
    if c.replications.is_some_and(|b| b < 2) {
        return usage("at least two bootstrap replications are needed".into());
    }
    if c.runs.is_some_and(|m| m < 2) {
        return usage("a study needs at least two runs".into());
    }
    if c.adjustments.iter().any(|a| !(-2.0..0.0).contains(a)) {
        return usage("adjustment scalars must lie in [-2, 0)".into());
    }
    Ok(())
}

/// Design names selected by `low`, `high`, `all` or explicit names.
fn expand_designs(keys: &[String]) -> Result<Vec<String>, CliError> {
    let names: Vec<String> = base_designs().into_iter().map(|d| d.name).collect();
    let mut out: Vec<String> = Vec::new();
    for key in keys {
        let picked: Vec<&String> = match key.as_str() {
            "all" => names.iter().collect(),
            "low" | "high" => names.iter().filter(|n| n.starts_with(&format!("{key}_"))).collect(),
            _ => names.iter().filter(|n| *n == key).collect(),
        };
        if picked.is_empty() {
            return Err(CliError::Usage(format!(
                "unknown design '{key}' (expected low, high, all or one of {})",
                names.join(", ")
            )));
        }
        for n in picked {
            if !out.contains(n) {
                out.push(n.clone());
            }
        }
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().map(|a| a.to_string_lossy().into_owned());
    let mut found = None;
    while let Some(a) = it.next() {
        if a == "--config" {
            found = it.next().map(PathBuf::from);
        } else if let Some(p) = a.strip_prefix("--config=") {
            found = Some(PathBuf::from(p));
        }
    }
    found
}

/// Flag arguments equivalent to the entries of a JSON config file.
fn config_file_args(path: &Path) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |m: String| CliError::Usage(format!("config file {}: {m}", path.display()));
    let doc: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let Value::Object(map) = doc else {
        return Err(bad("expected a JSON object".into()));
    };
    let mut out = Vec::new();
    for (key, value) in map {
        let flag = key.replace('_', "-");
        if matches!(flag.as_str(), "config" | "verbose") {
            return Err(bad(format!("'{key}' cannot be set from a config file")));
        }
        let text = match &value {
            Value::Null => continue,
            Value::Array(items) => items
                .iter()
                .map(scalar)
                .collect::<Option<Vec<_>>>()
                .map(|v| v.join(",")),
            v => scalar(v),
        }
        .ok_or_else(|| bad(format!("'{key}' must be a scalar or a list of scalars")))?;
        out.push(format!("--{flag}").into());
        out.push(text.into());
    }
    Ok(out)
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}
