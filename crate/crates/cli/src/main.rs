use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splitsim::config::{apply_override, ExperimentConfig, SweepSpec};
use splitsim::experiment::{self, summary_line};
use splitsim::Error;

#[derive(Parser)]
#[command(name = "splitsim", version, about = "Single-GPU split-phase LLM serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its reports.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Override a config field, e.g. `--set gpu.compute_capacity=2e6`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
        /// Also write events.csv.
        #[arg(long)]
        emit_events: bool,
    },
    /// Run a parameter sweep and write sweep.csv.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        /// Override a field of the base config.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
        /// Parallel sub-runs; 0 uses every core.
        #[arg(short, long, default_value_t = 0)]
        jobs: usize,
    },
    /// Check a run or sweep config without running it.
    Validate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
    },
    /// Rebuild a report from an event log.
    Replay {
        events: PathBuf,
        /// Write the rebuilt report.json here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Run {
            config,
            set,
            emit_events,
        } => {
            let mut cfg = ExperimentConfig::load(&config, &set)?;
            cfg.emit_event_log |= emit_events;
            let (report, dir) = experiment::run_experiment(&cfg)?;
            println!("{}", summary_line(&report));
            eprintln!("wrote {}", dir.display());
            Ok(0)
        }
        Command::Sweep { config, set, jobs } => {
            let mut spec = SweepSpec::load(&config)?;
            for s in &set {
                apply_override(&mut spec.base, s)?;
            }
            spec.validate()?;
            let base: ExperimentConfig = splitsim::config::from_value(spec.base.clone())?;
            let dir = base.resolved_output_dir()?;
            let outcome = experiment::run_sweep(&spec, &dir, jobs)?;
            for row in &outcome.rows {
                match &row.outcome {
                    Ok(s) => println!(
                        "{} {}={}: makespan_s={:.6}, tokens_per_s={:.3}, mean_ttft_s={:.6}",
                        row.variant, spec.axis, row.value, s.makespan_s, s.tokens_per_s, s.mean_ttft_s
                    ),
                    Err((_, msg)) => println!("{} {}={}: FAILED {msg}", row.variant, spec.axis, row.value),
                }
            }
            eprintln!("wrote {}", outcome.csv_path.display());
            Ok(outcome.failure_code().map_or(0, |c| c as u8))
        }
        Command::Validate { config, set } => {
            validate(&config, &set)?;
            println!("ok");
            Ok(0)
        }
        Command::Replay { events, out } => {
            let report = experiment::replay_file(&events)?;
            println!("{}", summary_line(&report));
            if let Some(path) = out {
                experiment::write_atomic(&path, experiment::report_json(&report).as_bytes())?;
            }
            Ok(0)
        }
    }
}

/// Sweep files are recognised by their `base` key.
fn validate(path: &Path, set: &[String]) -> Result<(), Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_sweep = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .is_some_and(|v| v.get("base").is_some());
    if is_sweep {
        let mut spec = SweepSpec::load(path)?;
        for s in set {
            apply_override(&mut spec.base, s)?;
        }
        spec.validate()?;
        if let Some(bad) = spec.points().into_iter().find_map(|p| p.config.err()) {
            return Err(Error::Validation(bad));
        }
    } else {
        ExperimentConfig::load(path, set)?.validate()?;
    }
    Ok(())
}
