//! `vpl`: run experiments and re-fit their output.
//!
//! ```text
//! vpl [--config FILE] [--set section.key=value]... [flags] <run|operator-test|linearized|fit>
//! ```
//!
//! Exit status: 0 when every built-in check passes, 1 when a check fails,
//! 2 on any error (reported as JSON on stderr).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vpl_core::config::{RunConfig, RunMode};
use vpl_core::diagnostics::{fit_decay, fit_decay_window, FitMode};
use vpl_core::experiments::run_experiment;
use vpl_core::{Error, Result};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "VPL_THREADS";

#[derive(Parser, Debug)]
#[command(name = "vpl", version, about = "Two-species Vlasov-Poisson-Landau experiments")]
struct Cli {
    /// TOML configuration file; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set time.dt=0.01`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(flatten)]
    flags: Flags,

    #[command(subcommand)]
    command: Command,
}

/// Shorthands for common keys. Applied after `--set`.
#[derive(Args, Debug, Default)]
struct Flags {
    #[arg(long, global = true, allow_hyphen_values = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    k: Option<f64>,
    #[arg(long, global = true)]
    dim_x: Option<usize>,
    #[arg(long, global = true)]
    n_x: Option<usize>,
    #[arg(long, global = true)]
    n_v: Option<usize>,
    /// Velocity box half-width `L`.
    #[arg(long, global = true)]
    cutoff: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    t_final: Option<f64>,
    /// strang_rk4, strang_rkc or picard_implicit.
    #[arg(long, global = true)]
    scheme: Option<String>,
    #[arg(long, global = true)]
    amplitude: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    restart: Option<PathBuf>,
}

impl Flags {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push(format!("{key}={v}"));
            }
        };
        let float = |v: Option<f64>| v.map(|x| format!("{x:?}"));
        let quoted = |v: Option<String>| v.map(|s| toml::Value::String(s).to_string());
        let path = |v: &Option<PathBuf>| quoted(v.as_ref().map(|p| p.display().to_string()));
        push("model.gamma", float(self.gamma));
        push("model.k", float(self.k));
        push("grid.dim_x", self.dim_x.map(|v| v.to_string()));
        push("grid.n_x", self.n_x.map(|v| v.to_string()));
        push("grid.n_v", self.n_v.map(|v| v.to_string()));
        push("grid.cutoff", float(self.cutoff));
        push("time.dt", float(self.dt));
        push("run.t_final", float(self.t_final));
        push("time.scheme", quoted(self.scheme.clone()));
        push("initial.amplitude", float(self.amplitude));
        push("initial.seed", self.seed.map(|v| v.to_string()));
        push("output.dir", path(&self.output_dir));
        push("run.restart", path(&self.restart));
        out
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Nonlinear evolution with diagnostics and decay fits.
    Run,
    /// Collision operator against the direct quadrature, weight and projection suites.
    OperatorTest,
    /// Linearized decay experiment.
    Linearized,
    /// Re-fit a decay law to a column of an existing diagnostics CSV.
    Fit(FitArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    csv: PathBuf,
    #[arg(long, default_value = "e_k")]
    column: String,
    #[arg(long, value_enum, default_value_t = FitKind::Exponential)]
    mode: FitKind,
    /// Fit window `[t_min, t_max]`; without it the leading transient share is dropped.
    #[arg(long, num_args = 2, value_names = ["T_MIN", "T_MAX"], allow_hyphen_values = true)]
    window: Option<Vec<f64>>,
    #[arg(long, default_value_t = vpl_core::diagnostics::DEFAULT_TRANSIENT)]
    transient: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FitKind {
    Exponential,
    Polynomial,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let report = json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    configure_threads()?;
    let mode = match &cli.command {
        Command::Fit(args) => return refit(args),
        Command::Run => RunMode::Nonlinear,
        Command::OperatorTest => RunMode::OperatorTest,
        Command::Linearized => RunMode::Linearized,
    };
    let text = match &cli.config {
        Some(path) => fs::read_to_string(path)?,
        None => String::new(),
    };
    let mode_name = toml::Value::try_from(mode).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let mut overrides = vec![format!("run.mode={mode_name}")];
    overrides.extend(cli.overrides.iter().cloned());
    overrides.extend(cli.flags.overrides());
    let config = RunConfig::parse_with_overrides(&text, &overrides)?;
    let summary = run_experiment(&config)?;
    for check in &summary.checks {
        log::info!(
            "{} {}: {:.6e} (threshold {:.3e})",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.value,
            check.threshold
        );
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(summary.pass)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("{THREADS_ENV}={value} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Parameter(e.to_string()))
}

fn refit(args: &FitArgs) -> Result<bool> {
    let mut reader = csv::Reader::from_path(&args.csv).map_err(|e| Error::Fit(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Fit(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Fit(format!("no column {name} in {}", args.csv.display())))
    };
    let (t_col, v_col) = (column("time")?, column(&args.column)?);
    let mut times = Vec::new();
    let mut values = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Fit(e.to_string()))?;
        let parse = |i: usize| {
            row[i]
                .parse::<f64>()
                .map_err(|e| Error::Fit(format!("row {:?}: {e}", row.position())))
        };
        times.push(parse(t_col)?);
        values.push(parse(v_col)?);
    }
    let mode = match args.mode {
        FitKind::Exponential => FitMode::Exponential,
        FitKind::Polynomial => FitMode::Polynomial,
    };
    let fit = match args.window.as_deref() {
        Some([t0, t1]) => fit_decay_window(&times, &values, mode, *t0, *t1)?,
        _ => fit_decay(&times, &values, mode, args.transient)?,
    };
    println!("{}", serde_json::to_string_pretty(&fit)?);
    Ok(true)
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Checkpoint(_) => "checkpoint",
        Error::Fit(_) => "fit",
        Error::NonFinite { .. } => "non_finite",
        Error::NonConvergence { .. } => "non_convergence",
        Error::InitialCondition(_) => "initial_condition",
        _ => "runtime",
    }
}
