//! Command-line surface.
//!
//! Subcommands: `simulate`, `fit`, `select`, `grid`, `laser`. Exit codes:
//! 0 success, 1 usage error, 2 data/ingestion error, 3 numerical failure;
//! every failure prints a final stderr line `ERROR <code>: <message>`.
//! Report-producing subcommands (`select`, `grid`, `laser`) write a run
//! manifest next to the report. The `MIXAR_THREADS` environment variable
//! caps worker concurrency (0 or unset picks the hardware default).

mod manifest;
mod model_io;

pub use manifest::{config_digest, manifest_path, read_manifest, write_manifest, RunManifest};
pub use model_io::{load_model, load_spec, save_model, ExpertFile, ExpertKind, ModelFile, SpecFile};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::em::{em_run, FitConfig};
use crate::error::Error;
use crate::experiments::{
    read_series_file, render_order_table, run_laser, run_linear_grid, GridConfig, LaserConfig,
    LaserOrderFit, ReportFormat,
};
use crate::model::ExpertSpec;
use crate::selection::{select_order, PenaltyMode, SelectionResult};
use crate::simulate::simulate;

/// CLI failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1: bad flags or flag combinations.
    Usage(String),
    /// Exit 2: unreadable, unparseable or invalid input data.
    Data(String),
    /// Exit 3: numerical failure during computation.
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let numeric = matches!(
            err.root(),
            Error::NonFinite(_) | Error::Diverged { .. } | Error::AllRestartsFailed { .. }
        );
        if numeric {
            CliError::Numeric(err.to_string())
        } else {
            CliError::Data(err.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "mixar",
    version,
    about = "Mixtures of autoregressive experts: simulate, fit by EM, and select the number of components"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a series from a generator spec file.
    Simulate {
        /// Generator spec (JSON: model plus optional burn_in/initial_window).
        #[arg(long)]
        spec: PathBuf,
        /// Number of samples recorded after burn-in.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Output series file, one value per line.
        #[arg(long)]
        out: PathBuf,
        /// Optional file receiving the realized regime path (1-based).
        #[arg(long)]
        hidden_out: Option<PathBuf>,
    },
    /// Fit a mixture with a fixed number of components.
    Fit {
        /// Input series file, one value per line.
        #[arg(long)]
        data: PathBuf,
        /// Number of components.
        #[arg(long)]
        p: usize,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 1)]
        lags: usize,
        /// Hidden units per expert (mlp kind only).
        #[arg(long, default_value_t = 0)]
        hidden: usize,
        #[command(flatten)]
        fit: FitFlags,
        /// Output model file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit every order up to a cap and select the criterion maximizer.
    Select {
        #[arg(long)]
        data: PathBuf,
        /// Largest candidate component count.
        #[arg(long)]
        pmax: usize,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 1)]
        lags: usize,
        #[arg(long, default_value_t = 0)]
        hidden: usize,
        #[arg(long, value_enum, default_value_t = PenaltyArg::PerParameter)]
        penalty: PenaltyArg,
        #[command(flatten)]
        fit: FitFlags,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
    /// Run the linear-mixture selection grid.
    Grid {
        /// Use every coefficient pair in {0.1, 0.5, 0.9}^2 instead of the
        /// desk-scale subset.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the replication count per cell.
        #[arg(long)]
        replications: Option<usize>,
        /// Override the sample sizes (comma-separated list).
        #[arg(long)]
        n_values: Option<String>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
    /// MLP-mixture order study on a laser-intensity style series file.
    Laser {
        #[arg(long)]
        data: PathBuf,
        /// Use the original study's restart budget (100 initializations).
        #[arg(long)]
        paper_scale: bool,
        /// Fit the raw series instead of standardizing it first.
        #[arg(long)]
        no_normalize: bool,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum KindArg {
    Linear,
    Mlp,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PenaltyArg {
    /// 0.5 * p * ln(n)
    PerComponent,
    /// 0.5 * (free parameter count) * ln(n)
    PerParameter,
}

impl From<PenaltyArg> for PenaltyMode {
    fn from(arg: PenaltyArg) -> Self {
        match arg {
            PenaltyArg::PerComponent => PenaltyMode::BicPerComponent,
            PenaltyArg::PerParameter => PenaltyMode::BicPerParameter,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FormatArg {
    Csv,
    Md,
}

impl From<FormatArg> for ReportFormat {
    fn from(arg: FormatArg) -> Self {
        match arg {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Md => ReportFormat::Markdown,
        }
    }
}

/// Fit-configuration flags shared by `fit` and `select`.
#[derive(Args, Debug, Clone)]
struct FitFlags {
    /// EM restarts per fit.
    #[arg(long)]
    restarts: Option<usize>,
    /// Cap on EM iterations per restart.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Relative log-likelihood improvement threshold.
    #[arg(long)]
    tol: Option<f64>,
    /// Mixing-weight floor.
    #[arg(long)]
    eta: Option<f64>,
    /// Cap on inner MLP optimizer iterations.
    #[arg(long)]
    inner_max_iter: Option<usize>,
    /// Inner MLP optimizer improvement threshold.
    #[arg(long)]
    inner_tol: Option<f64>,
    /// Master seed for restart initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl FitFlags {
    fn to_config(&self, p_max: usize) -> Result<FitConfig, CliError> {
        let defaults = FitConfig::default();
        let cfg = FitConfig {
            max_em_iterations: self.max_iter.unwrap_or(defaults.max_em_iterations),
            rel_tolerance: self.tol.unwrap_or(defaults.rel_tolerance),
            restarts: self.restarts.unwrap_or(defaults.restarts),
            eta: self.eta.unwrap_or(defaults.eta),
            inner_max_iterations: self.inner_max_iter.unwrap_or(defaults.inner_max_iterations),
            inner_tolerance: self.inner_tol.unwrap_or(defaults.inner_tolerance),
            master_seed: self.seed,
        };
        if cfg.max_em_iterations == 0 || cfg.restarts == 0 || cfg.inner_max_iterations == 0 {
            return Err(CliError::Usage(
                "iteration and restart counts must be positive".into(),
            ));
        }
        if !(cfg.rel_tolerance > 0.0) || !(cfg.inner_tolerance > 0.0) {
            return Err(CliError::Usage("tolerances must be positive".into()));
        }
        if !(cfg.eta > 0.0 && cfg.eta < 1.0 / p_max as f64) {
            return Err(CliError::Usage(format!(
                "eta must lie in (0, 1/{p_max})"
            )));
        }
        Ok(cfg)
    }

    fn digest_value(&self, cfg: &FitConfig) -> serde_json::Value {
        serde_json::json!({
            "max_em_iterations": cfg.max_em_iterations,
            "rel_tolerance": cfg.rel_tolerance,
            "restarts": cfg.restarts,
            "eta": cfg.eta,
            "inner_max_iterations": cfg.inner_max_iterations,
            "inner_tolerance": cfg.inner_tolerance,
            "master_seed": cfg.master_seed,
        })
    }
}

/// Parse arguments, dispatch, and translate failures to exit codes.
pub fn run() -> i32 {
    let _ = env_logger::try_init();
    init_thread_pool();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            eprintln!("ERROR 1: invalid usage");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("ERROR {}: {err}", err.code());
            err.code()
        }
    }
}

fn init_thread_pool() {
    if let Ok(raw) = std::env::var("MIXAR_THREADS") {
        if let Ok(threads) = raw.trim().parse::<usize>() {
            if threads > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn expert_spec(kind: KindArg, lags: usize, hidden: usize) -> Result<ExpertSpec, CliError> {
    if lags == 0 {
        return Err(CliError::Usage("lags must be positive".into()));
    }
    match kind {
        KindArg::Linear => {
            if hidden != 0 {
                return Err(CliError::Usage(
                    "--hidden only applies to --kind mlp".into(),
                ));
            }
            Ok(ExpertSpec::Linear { lags })
        }
        KindArg::Mlp => Ok(ExpertSpec::Mlp {
            lags,
            hidden_units: hidden,
        }),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn order_rows(selection: &SelectionResult) -> Vec<LaserOrderFit> {
    selection
        .per_p
        .iter()
        .map(|of| LaserOrderFit {
            p: of.p,
            loglik: of.loglik,
            penalty: of.penalty,
            criterion: of.criterion,
            weights: of.fit.model.canonicalized().weights().to_vec(),
        })
        .collect()
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate {
            spec,
            n,
            seed,
            out,
            hidden_out,
        } => {
            if n == 0 {
                return Err(CliError::Usage("n must be positive".into()));
            }
            let generative = load_spec(&spec)?;
            let output = simulate(&generative, n, seed)?;
            let mut text = String::with_capacity(output.series.len() * 12);
            for v in output.series.values() {
                text.push_str(&format!("{v}\n"));
            }
            write_text(&out, &text)?;
            if let Some(hidden_path) = hidden_out {
                let mut text = String::with_capacity(output.hidden_path.len() * 2);
                for regime in &output.hidden_path {
                    text.push_str(&format!("{}\n", regime + 1));
                }
                write_text(&hidden_path, &text)?;
            }
            println!("simulate: wrote {} samples to {}", n, out.display());
            Ok(())
        }

        Command::Fit {
            data,
            p,
            kind,
            lags,
            hidden,
            fit,
            out,
        } => {
            if p == 0 {
                return Err(CliError::Usage("p must be positive".into()));
            }
            let spec = expert_spec(kind, lags, hidden)?;
            let cfg = fit.to_config(p)?;
            let series = read_series_file(&data)?;
            let result = em_run(&series, p, spec, &cfg)?;
            save_model(&result.model.canonicalized(), &out)?;
            println!(
                "fit: p={} loglik={:.6} iterations={} converged={} best_restart={} model={}",
                p,
                result.loglik,
                result.em_iterations,
                result.converged,
                result.best_restart,
                out.display()
            );
            Ok(())
        }

        Command::Select {
            data,
            pmax,
            kind,
            lags,
            hidden,
            penalty,
            fit,
            report,
            format,
        } => {
            if pmax == 0 {
                return Err(CliError::Usage("pmax must be positive".into()));
            }
            let spec = expert_spec(kind, lags, hidden)?;
            let cfg = fit.to_config(pmax)?;
            let started = now_rfc3339();
            let series = read_series_file(&data)?;
            let selection = select_order(&series, pmax, spec, &cfg, penalty.into())?;
            let rows = order_rows(&selection);
            write_text(&report, &render_order_table(&rows, selection.chosen, format.into()))?;
            let digest = config_digest(&serde_json::json!({
                "command": "select",
                "data": data.display().to_string(),
                "pmax": pmax,
                "kind": format!("{kind:?}"),
                "lags": lags,
                "hidden": hidden,
                "penalty": format!("{penalty:?}"),
                "format": format!("{format:?}"),
                "fit": fit.digest_value(&cfg),
            }));
            write_manifest(
                &report,
                &RunManifest {
                    command: "select".into(),
                    config_digest: digest,
                    master_seed: cfg.master_seed,
                    tool_version: env!("CARGO_PKG_VERSION").into(),
                    started,
                    finished: now_rfc3339(),
                },
            )?;
            println!("select: chosen p = {}", selection.chosen);
            Ok(())
        }

        Command::Grid {
            full,
            seed,
            replications,
            n_values,
            report,
            format,
        } => {
            let mut cfg = if full {
                GridConfig::full_scale(seed)
            } else {
                GridConfig::desk_scale(seed)
            };
            if let Some(reps) = replications {
                if reps == 0 {
                    return Err(CliError::Usage("replications must be positive".into()));
                }
                cfg.replications = reps;
            }
            if let Some(raw) = &n_values {
                let parsed: Result<Vec<usize>, _> =
                    raw.split(',').map(|tok| tok.trim().parse::<usize>()).collect();
                match parsed {
                    Ok(values) if !values.is_empty() && values.iter().all(|&n| n >= 3) => {
                        cfg.n_values = values;
                    }
                    _ => {
                        return Err(CliError::Usage(format!(
                            "--n-values must be a comma-separated list of integers >= 3, got {raw:?}"
                        )))
                    }
                }
            }
            let started = now_rfc3339();
            let grid = run_linear_grid(&cfg);
            write_text(&report, &grid.render(format.into()))?;
            let digest = config_digest(&serde_json::json!({
                "command": "grid",
                "full": full,
                "pi1_values": cfg.pi1_values,
                "a_pairs": cfg.a_pairs.iter().map(|&(a, b)| vec![a, b]).collect::<Vec<_>>(),
                "b_pair": vec![cfg.b_pair.0, cfg.b_pair.1],
                "sigma": cfg.sigma,
                "n_values": cfg.n_values,
                "replications": cfg.replications,
                "p_max": cfg.p_max,
                "master_seed": cfg.master_seed,
                "format": format!("{format:?}"),
            }));
            write_manifest(
                &report,
                &RunManifest {
                    command: "grid".into(),
                    config_digest: digest,
                    master_seed: seed,
                    tool_version: env!("CARGO_PKG_VERSION").into(),
                    started,
                    finished: now_rfc3339(),
                },
            )?;
            println!("grid: wrote {} cells to {}", grid.cells.len(), report.display());
            Ok(())
        }

        Command::Laser {
            data,
            paper_scale,
            no_normalize,
            report,
            format,
        } => {
            let mut cfg = LaserConfig::new(&data);
            if paper_scale {
                cfg = cfg.paper_scale();
            }
            if no_normalize {
                cfg.standardize = false;
            }
            let started = now_rfc3339();
            let result = run_laser(&cfg)?;
            write_text(&report, &result.render(format.into()))?;
            let digest = config_digest(&serde_json::json!({
                "command": "laser",
                "data": data.display().to_string(),
                "lags": cfg.lags,
                "hidden_units": cfg.hidden_units,
                "p_max": cfg.p_max,
                "restarts": cfg.restarts,
                "standardize": cfg.standardize,
                "master_seed": cfg.master_seed,
                "format": format!("{format:?}"),
            }));
            write_manifest(
                &report,
                &RunManifest {
                    command: "laser".into(),
                    config_digest: digest,
                    master_seed: cfg.master_seed,
                    tool_version: env!("CARGO_PKG_VERSION").into(),
                    started,
                    finished: now_rfc3339(),
                },
            )?;
            println!(
                "laser: n={} chosen p = {} (standardized: {})",
                result.n, result.chosen, result.standardized
            );
            Ok(())
        }
    }
}
