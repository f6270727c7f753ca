use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qnd_cli::{run, sweep, CliError, ExperimentConfig, SweepParam};
use qnd_core::{oracle_cross_checks, OracleSettings};

/// Simulates diffusive QND measurements under feedback and checks the
/// ensemble against its Lyapunov decay certificate.
#[derive(Parser)]
#[command(name = "qnd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs one ensemble and writes ensemble.csv and verdict.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Exit with status 2 when the certificate check fails.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write figure.svg.
        #[arg(long)]
        svg: bool,
        /// Also write trajectories.csv.
        #[arg(long)]
        trajectories: bool,
    },
    /// Runs the config once per value of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-checks the closed-form generators against finite differences
    /// and Monte Carlo estimates.
    CheckGenerator {
        /// Finite-difference points per check.
        #[arg(long, default_value_t = 1000)]
        points: usize,
        /// States per Monte Carlo check; 0 skips them.
        #[arg(long, default_value_t = 20)]
        mc_states: usize,
        #[arg(long, default_value_t = 20_000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    let mut c = ExperimentConfig::from_path(config)?;
    if seed.is_some() {
        c.params.seed = seed;
    }
    if let Some(out) = out {
        c.output_dir = out;
    }
    Ok(c)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            config,
            strict,
            seed,
            out,
            svg,
            trajectories,
        } => {
            let mut c = load(&config, seed, out)?;
            c.emit_svg |= svg;
            c.emit_trajectories |= trajectories;
            let exp = c.resolve()?;
            let report = run(&exp)?;
            match &report.verdict {
                Some(v) => println!(
                    "{}: rate {:.4}, worst margin {:+.3e} at t = {:.3} ({})",
                    if v.pass { "pass" } else { "FAIL" },
                    v.rate,
                    v.worst_margin,
                    v.worst_time,
                    exp.output_dir.display()
                ),
                None => println!("no certificate applies ({})", exp.output_dir.display()),
            }
            if strict && !report.passed() {
                return Err(CliError::Verdict(format!("{} bound violated", report.scenario)));
            }
        }
        Command::Sweep {
            config,
            param,
            values,
            strict,
            seed,
            out,
        } => {
            let c = load(&config, seed, out)?;
            let rows = sweep(&c, param, &values)?;
            for r in &rows {
                println!(
                    "{} = {}: fitted rate {}, certified {}",
                    param.name(),
                    r.value,
                    r.fitted_rate.map_or("-".into(), |v| format!("{v:.4}")),
                    r.certified_rate.map_or("-".into(), |v| format!("{v:.4}")),
                );
            }
            if strict && rows.iter().any(|r| !r.report.passed()) {
                return Err(CliError::Verdict(format!("{} sweep has failing runs", param.name())));
            }
        }
        Command::CheckGenerator {
            points,
            mc_states,
            mc_samples,
            eta,
            seed,
        } => {
            let settings = OracleSettings {
                fd_points: points,
                mc_states,
                mc_samples,
                eta,
                seed,
            };
            let checks = oracle_cross_checks(&settings).map_err(|e| CliError::Config(e.to_string()))?;
            for c in &checks {
                println!(
                    "{} {}: worst {:.3e} over {} points",
                    if c.pass { "ok  " } else { "FAIL" },
                    c.name,
                    c.worst,
                    c.points
                );
            }
            if checks.iter().any(|c| !c.pass) {
                return Err(CliError::Verdict("generator cross-checks failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
