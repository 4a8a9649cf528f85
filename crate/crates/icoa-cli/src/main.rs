//! Experiment harness CLI. Three commands, all driven by a JSON experiment
//! config: `run` (replications of one configured cell), `sweep` (the full
//! protection grid over α and δ), and `bound` (worst-case bound versus
//! realized test error at δ_opt(α)).
//!
//! Exit codes: 0 success, 2 config error (unreadable/invalid config, bad
//! grid, bad ICOA_SEED), 3 runtime failure (training breakdown, unwritable
//! output). The ICOA_SEED environment variable overrides the config's root
//! seed; data seeds still derive from problem.seed.

mod output;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use icoa::grid::{run_bound, run_grid, run_replications, Experiment};
use icoa::trainer::DeltaSetting;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "icoa",
    version,
    about = "Covariance-optimized ensemble experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment; writes trace.csv per replication and
    /// summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the protection grid; writes matrix.csv (δ rows × α columns),
    /// cells.csv, and summary.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        deltas: Vec<f64>,
    },
    /// Compare the initialization-time worst-case bound against realized
    /// test error at δ_opt(α); writes bound.csv and summary.json.
    Bound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
    },
}

enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

type CliResult<T> = Result<T, CliError>;

fn config_err<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Config(e.into())
}

fn runtime_err<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run { config, out } => cmd_run(&config, &out),
        Command::Sweep {
            config,
            out,
            alphas,
            deltas,
        } => cmd_sweep(&config, &out, &alphas, &deltas),
        Command::Bound {
            config,
            out,
            alphas,
        } => cmd_bound(&config, &out, &alphas),
    }
}

/// Reads and validates the experiment config, applying the ICOA_SEED
/// override when the variable is set.
fn load_config(path: &Path) -> CliResult<Experiment> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    let mut exp: Experiment = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(config_err)?;
    if let Ok(raw) = std::env::var("ICOA_SEED") {
        let seed: u64 = raw.trim().parse().map_err(|_| {
            config_err(anyhow!(
                "ICOA_SEED must be a nonnegative integer, got {raw:?}"
            ))
        })?;
        exp.seed = seed;
    }
    exp.validate().map_err(config_err)?;
    Ok(exp)
}

fn ensure_out_dir(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
        .map_err(runtime_err)
}

fn cmd_run(config: &Path, out: &Path) -> CliResult<()> {
    let exp = load_config(config)?;
    ensure_out_dir(out)?;
    let cell = run_replications(&exp).map_err(runtime_err)?;
    for rep in &cell.reps {
        let name = if rep.replication == 0 {
            "trace.csv".to_string()
        } else {
            format!("trace_rep{}.csv", rep.replication)
        };
        output::write_trace(&out.join(name), &rep.result.trace).map_err(runtime_err)?;
    }
    output::write_run_summary(&out.join("summary.json"), &exp, &cell).map_err(runtime_err)?;
    match cell.mean_final_test_mse() {
        Some(m) => println!(
            "{} replications, mean final test MSE {m:.6}, wrote {}",
            cell.reps.len(),
            out.display()
        ),
        None => println!(
            "{} replications, all diverged, wrote {}",
            cell.reps.len(),
            out.display()
        ),
    }
    Ok(())
}

fn cmd_sweep(config: &Path, out: &Path, alphas: &[f64], deltas: &[f64]) -> CliResult<()> {
    let exp = load_config(config)?;
    validate_cells(
        &exp,
        alphas,
        &deltas.iter().map(|&d| Some(d)).collect::<Vec<_>>(),
    )?;
    ensure_out_dir(out)?;
    let cells = run_grid(&exp, alphas, deltas).map_err(runtime_err)?;
    output::write_matrix(&out.join("matrix.csv"), &cells, alphas, deltas).map_err(runtime_err)?;
    output::write_cells(&out.join("cells.csv"), &cells).map_err(runtime_err)?;
    output::write_sweep_summary(&out.join("summary.json"), &exp, &cells).map_err(runtime_err)?;
    println!(
        "{} cells x {} replications, wrote {}",
        cells.len(),
        exp.replications,
        out.display()
    );
    Ok(())
}

fn cmd_bound(config: &Path, out: &Path, alphas: &[f64]) -> CliResult<()> {
    let exp = load_config(config)?;
    validate_cells(&exp, alphas, &[None])?;
    ensure_out_dir(out)?;
    let rows = run_bound(&exp, alphas).map_err(runtime_err)?;
    output::write_bound(&out.join("bound.csv"), &rows).map_err(runtime_err)?;
    output::write_bound_summary(&out.join("summary.json"), &exp, &rows).map_err(runtime_err)?;
    println!(
        "{} alphas x {} replications, wrote {}",
        rows.len(),
        exp.replications,
        out.display()
    );
    Ok(())
}

/// Pre-flight validation of every grid cell so bad α/δ lists exit as config
/// errors before any training starts. A None delta stands for "auto".
fn validate_cells(exp: &Experiment, alphas: &[f64], deltas: &[Option<f64>]) -> CliResult<()> {
    if alphas.is_empty() || deltas.is_empty() {
        return Err(config_err(anyhow!(
            "alpha and delta lists must be nonempty"
        )));
    }
    let mut probe = exp.clone();
    probe.method = icoa::grid::Method::Icoa;
    for &a in alphas {
        for &d in deltas {
            probe.trainer.alpha = a;
            probe.trainer.delta = match d {
                Some(v) => DeltaSetting::Fixed(v),
                None => DeltaSetting::Auto,
            };
            probe.trainer.minimax_enabled = true;
            probe
                .validate()
                .with_context(|| format!("grid cell alpha={a}, delta={d:?}"))
                .map_err(config_err)?;
        }
    }
    if exp.method != icoa::grid::Method::Icoa {
        return Err(config_err(anyhow!(
            "sweep and bound commands require method \"icoa\""
        )));
    }
    Ok(())
}
