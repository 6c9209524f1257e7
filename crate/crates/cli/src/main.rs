//! `twofluid`: closure solves, Littlewood-Paley checks, symbol analysis,
//! simulations and decay fits from one configuration file.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use twofluid::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "twofluid", version, about = "Two-fluid mixture simulator and frequency-analysis toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for random initial data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration entry, e.g. `--set integrator.dt=0.25`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the pressure closure at (closure.r_plus, closure.r_minus).
    Closure,
    /// Check the dyadic partition, block reconstruction and Bernstein ratios on the configured grid.
    LpCheck,
    /// Symbol analysis of the linearised system.
    Linsym {
        #[command(subcommand)]
        action: LinsymAction,
    },
    /// Run the decay experiment: generate data, integrate, record diagnostics, fit exponents.
    Simulate {
        /// Continue from a checkpoint instead of generating data.
        #[arg(long)]
        restart: Option<PathBuf>,
    },
    /// Fit decay exponents to a recorded CSV series.
    DecayFit {
        #[arg(long)]
        series: PathBuf,
        /// Fit window `a,b` (defaults to diagnostics.fit_window).
        #[arg(long, value_parser = parse_window)]
        window: Option<[f64; 2]>,
    },
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum LinsymAction {
    /// Spectral-abscissa scan and Lyapunov-form checks over the wavenumber samples.
    Scan,
    /// Linear Besov decay table by quadrature, plus per-block rate certificates.
    Decay,
}

fn parse_window(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected a,b")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if !(a > 0.0 && b > a && b.is_finite()) {
        return Err(format!("window must satisfy 0 < a < b (got {a},{b})"));
    }
    Ok([a, b])
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

fn effective_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut overrides = global.overrides.clone();
    if let Some(seed) = global.seed {
        overrides.push(format!("data.seed={seed}"));
    }
    if let Some(t) = global.threads {
        overrides.push(format!("run.threads={t}"));
    }
    if let Some(dir) = &global.output_dir {
        overrides.push(format!("run.output_dir={:?}", dir.display().to_string()));
    }
    Ok(RunConfig::load(global.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli.global)?;
    if cfg.run.threads > 0 {
        // only the first call in a process can size the global pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.threads).build_global();
    }
    commands::dispatch(&cli.command, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_parsing() {
        assert_eq!(parse_window("10,500").unwrap(), [10.0, 500.0]);
        assert_eq!(parse_window(" 1.5 , 2e3").unwrap(), [1.5, 2000.0]);
        assert!(parse_window("5,1").is_err());
        assert!(parse_window("5").is_err());
        assert!(parse_window("a,b").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_become_overrides() {
        let cli = Cli::try_parse_from(["twofluid", "--seed", "9", "closure", "--set", "closure.r_plus=2"]).unwrap();
        let cfg = effective_config(&cli.global).unwrap();
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.closure.r_plus, 2.0);
        let cli = Cli::try_parse_from(["twofluid", "closure", "--output-dir", "/tmp/x y", "--threads", "3"]).unwrap();
        let cfg = effective_config(&cli.global).unwrap();
        assert_eq!(cfg.run.output_dir, "/tmp/x y");
        assert_eq!(cfg.run.threads, 3);
    }
}
