use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfde_lyap::functionals::builtin_functionals;
use rfde_lyap::harness::{
    exit_code_for, replay, run_scenario, scenario_from_arg, summary_text, write_outputs, RunOptions, ScenarioReport,
    BUNDLED, EXIT_CONFIG, EXIT_FAIL, EXIT_PASS,
};
use rfde_lyap::system::builtin_systems;
use rfde_lyap::Error;

/// Sampling-based Lyapunov certification for retarded functional
/// differential equations with disturbances.
#[derive(Parser)]
#[command(name = "rfde-lyap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or a bundled scenario by name.
    Run {
        scenario: String,
        /// Output directory for report.json, summary.txt and CSV artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the seed of every check.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace the grid step of every check.
        #[arg(long)]
        grid_step: Option<f64>,
        /// Print nothing on success.
        #[arg(long)]
        quiet: bool,
    },
    /// Re-evaluate a failure witness recorded in a report.
    Replay {
        scenario: String,
        #[arg(long)]
        report: PathBuf,
        /// Index of the scenario check.
        #[arg(long)]
        check: usize,
        /// Result name within the check.
        #[arg(long)]
        name: String,
    },
    /// List built-in systems.
    ListSystems,
    /// List built-in functionals.
    ListFunctionals,
    /// List bundled scenarios.
    ListScenarios,
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            grid_step,
            quiet,
        } => {
            let sc = scenario_from_arg(&scenario)?;
            let outcome = run_scenario(&sc, &RunOptions { out: out.clone(), seed, grid_step })?;
            let summary = match &out {
                Some(dir) => write_outputs(&outcome, dir, &scenario)?,
                None => summary_text(&outcome.report, &scenario, "report.json"),
            };
            if out.is_none() && !quiet {
                print!("{}", outcome.report.to_json()?);
            }
            let code = outcome.exit_code();
            if !quiet || code != EXIT_PASS {
                eprint!("{summary}");
            }
            Ok(code)
        }
        Command::Replay {
            scenario,
            report,
            check,
            name,
        } => {
            let sc = scenario_from_arg(&scenario)?;
            let text = std::fs::read_to_string(&report).map_err(|e| Error::Config(format!("{}: {e}", report.display())))?;
            let rep = ScenarioReport::from_json(&text)?;
            let out = replay(&sc, &rep, check, &name)?;
            println!("recorded: lhs={:e} rhs={:e}", out.recorded.lhs, out.recorded.rhs);
            println!("replayed: lhs={:e} rhs={:e}", out.lhs, out.rhs);
            println!("slack: {:e}", out.lhs - out.rhs);
            if out.identical() {
                println!("identical");
                Ok(EXIT_PASS)
            } else {
                println!("differs");
                Ok(EXIT_FAIL)
            }
        }
        Command::ListSystems => {
            for (n, d) in builtin_systems() {
                println!("{n:20} {d}");
            }
            Ok(EXIT_PASS)
        }
        Command::ListFunctionals => {
            for (n, d) in builtin_functionals() {
                println!("{n:20} {d}");
            }
            Ok(EXIT_PASS)
        }
        Command::ListScenarios => {
            for (n, _) in BUNDLED {
                println!("{n}");
            }
            Ok(EXIT_PASS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code_for(&e);
            ExitCode::from(if code == EXIT_FAIL { EXIT_FAIL } else { EXIT_CONFIG } as u8)
        }
    }
}
