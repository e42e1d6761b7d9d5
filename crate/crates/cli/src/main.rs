//! `cloudhealth` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "cloudhealth",
    version,
    about = "Goal-driven health monitoring for simulated cloud services"
)]
struct Cli {
    #[command(flatten)]
    inputs: Inputs,
    #[command(subcommand)]
    command: Command,
}

/// Model and probe catalog; the built-in ones when omitted.
#[derive(Debug, Args)]
struct Inputs {
    /// Monitoring model document (JSON).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Probe catalog (JSON array of probe specs).
    #[arg(long, global = true)]
    catalog: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP API over a simulated cloud.
    Serve(ServeArgs),
    /// Print the metrics and probe assignments a selection needs.
    Resolve(ResolveArgs),
    /// Recompute a health snapshot from a recorded trace.
    Snapshot(SnapshotArgs),
    /// Check a model document.
    Validate,
    /// Run a scenario with a selection and write every sample as NDJSON.
    Record(RecordArgs),
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Scenario file; the built-in demo scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Simulated milliseconds per wall-clock millisecond.
    #[arg(long, default_value_t = 10.0)]
    speed: f64,
    /// Run the simulation at wall-clock pace (same as `--speed 1`).
    #[arg(long, conflicts_with = "speed")]
    realtime: bool,
    /// Where actors, selections and the model are kept across restarts.
    #[arg(long)]
    state_file: Option<PathBuf>,
    /// Append every acked sample to this NDJSON file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ResolveArgs {
    /// Comma-separated node ids.
    #[arg(long, value_delimiter = ',', required = true)]
    goals: Vec<String>,
    /// Comma-separated `id[:layer]`. Ids found in the scenario take its
    /// layer; others default to VM. Every scenario service when omitted.
    #[arg(long, value_delimiter = ',')]
    services: Vec<String>,
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SnapshotArgs {
    /// NDJSON trace as written by `record` or `serve --trace`.
    #[arg(long)]
    replay: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    goals: Vec<String>,
    /// `from,to` in milliseconds; the whole trace when omitted.
    #[arg(long)]
    window: Option<String>,
    /// Comma-separated service ids; every service in the trace when omitted.
    #[arg(long, value_delimiter = ',')]
    services: Vec<String>,
}

#[derive(Debug, Args)]
struct RecordArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "Reliability,Performance")]
    goals: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    services: Vec<String>,
    /// Simulated milliseconds to run; the scenario duration when omitted.
    #[arg(long)]
    duration: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();

    let cli = match Cli::try_parse() {
        Ok(v) => v,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let inputs = cli.inputs;
    let result = match cli.command {
        Command::Serve(args) => commands::serve(&inputs, args),
        Command::Resolve(args) => commands::resolve(&inputs, args),
        Command::Snapshot(args) => commands::snapshot(&inputs, args),
        Command::Validate => commands::validate(&inputs),
        Command::Record(args) => commands::record(&inputs, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
