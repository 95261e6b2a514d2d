use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use situated::kernel::trace_hash;
use situated::scenario::config::{load_config, ConfigError, Loaded};
use situated::scenario::run_scenario;

const CONFIG_ERROR: u8 = 1;
const INVARIANT_VIOLATION: u8 = 2;
const IO_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "situated", version, about = "Run situated multi-agent scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and report its metrics.
    Run {
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured run length in ticks.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Metrics go to stdout when omitted.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Load and check a configuration.
    Validate { config: PathBuf },
    /// Print the digest of a trace file.
    TraceHash { trace: PathBuf },
}

fn load(path: &Path) -> Result<Loaded, ExitCode> {
    load_config(path).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            ConfigError::Io(..) => ExitCode::from(IO_ERROR),
            _ => ExitCode::from(CONFIG_ERROR),
        }
    })
}

fn write(path: &Path, text: &str) -> Result<(), ExitCode> {
    fs::write(path, text).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        ExitCode::from(IO_ERROR)
    })
}

fn run(cmd: Command) -> Result<(), ExitCode> {
    match cmd {
        Command::Run { config, seed, steps, trace_out, metrics_out } => {
            let loaded = load(&config)?;
            let outcome = run_scenario(&loaded, seed, steps).map_err(|e| {
                eprintln!("error: {e}");
                ExitCode::from(CONFIG_ERROR)
            })?;
            if let Some(p) = trace_out {
                write(&p, &outcome.trace)?;
            }
            match metrics_out {
                Some(p) => write(&p, &outcome.metrics.to_text())?,
                None => print!("{}", outcome.metrics),
            }
            if !outcome.violations.is_empty() {
                for v in &outcome.violations {
                    eprintln!("violation: {v}");
                }
                return Err(ExitCode::from(INVARIANT_VIOLATION));
            }
            Ok(())
        }
        Command::Validate { config } => {
            let loaded = load(&config)?;
            println!(
                "ok: {} nodes, {} segments, {} agents",
                loaded.graph.node_count(),
                loaded.graph.edge_count(),
                loaded.config.agents.len()
            );
            Ok(())
        }
        Command::TraceHash { trace } => {
            let text = fs::read_to_string(&trace).map_err(|e| {
                eprintln!("error: cannot read {}: {e}", trace.display());
                ExitCode::from(IO_ERROR)
            })?;
            println!("{:016x}", trace_hash(&text));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
