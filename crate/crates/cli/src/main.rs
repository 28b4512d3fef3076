use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use es_adapt::scenario::{resolve_config, ScenarioPreset};
use es_adapt::validation::run_validation;
use es_adapt_cli::{help_epilogue, output_root, plan_sweep, resolve, run_command, run_sweep, CliError, OUT_ENV};

/// Extremum-seeking adaptive control simulator for the two-link manipulator.
#[derive(Parser, Debug)]
#[command(name = "es-adapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write iterations.csv, trace_first.csv, trace_last.csv and manifest.
    Run {
        /// Preset name (see the list below).
        #[arg(long)]
        scenario: String,
        /// Override sim.iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Output root; files go to <root>/<scenario>.
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        /// TOML document merged onto the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, e.g. --set sim.dt=5e-4 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the invariant suite and print a per-check table.
    Validate {
        /// Override gains or plant parameters under test, e.g. --set gains.k=[[-1,1],[1,1]].
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run every [[run]] of a sweep file concurrently, each in its own subdirectory.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output root; overrides `out` in the sweep file.
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
}

fn read(path: &PathBuf) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            scenario,
            iterations,
            out,
            config,
            set,
        } => {
            let document = config.as_ref().map(read).transpose()?;
            let (preset, cfg) = resolve(&scenario, document.as_deref(), &set, iterations)?;
            let dir = output_root(out.as_deref()).join(preset.name());
            let manifest = run_command(preset.name(), &cfg, &dir)?;
            println!(
                "{}: {} iterations in {:.2} s, final J = {:.6e} -> {}",
                preset,
                manifest.iterations,
                manifest.duration.as_secs_f64(),
                manifest.final_j,
                dir.display()
            );
            Ok(())
        }
        Command::Validate { set } => {
            let cfg = resolve_config(ScenarioPreset::Nominal, None, &set)?;
            let report = run_validation(&cfg.gains.k, &cfg.plant);
            println!("{report}");
            if report.all_passed() {
                Ok(())
            } else {
                let names: Vec<_> = report.failures().map(|c| c.name).collect();
                Err(CliError::Usage(format!("failed checks: {}", names.join(", "))))
            }
        }
        Command::Sweep { config, out } => {
            let (file_out, runs) = plan_sweep(&read(&config)?)?;
            let root = out.or(file_out).unwrap_or_else(|| output_root(None));
            let results = run_sweep(&root, &runs);
            let mut failed = 0;
            for (name, result) in &results {
                match result {
                    Ok(m) => println!("{name}: ok, final J = {:.6e}", m.final_j),
                    Err(e) => {
                        failed += 1;
                        eprintln!("{name}: {e}");
                    }
                }
            }
            if failed > 0 {
                return Err(CliError::SweepFailed {
                    failed,
                    total: results.len(),
                });
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let epilogue = help_epilogue();
    let command = Cli::command()
        .after_help(epilogue.clone())
        .mut_subcommand("run", |c| c.after_help(epilogue.clone()))
        .mut_subcommand("sweep", |c| c.after_help(epilogue.clone()));
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
