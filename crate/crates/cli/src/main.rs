//! `nsagent`: ingest documentation, run the pipeline once, benchmark
//! scenarios, or serve the HTTP API.
//!
//! Exit codes: 0 success or converged, 2 bad input or configuration,
//! 3 the session or benchmark failed, 4 the session paused for human input.

mod commands;
mod config;

use std::io::{IsTerminal, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{CliConfig, OutputFormat};

#[derive(Debug, Parser)]
#[command(name = "nsagent", version, about = "Turn 5G/6G scenario descriptions into validated ns-3 simulations")]
struct Cli {
    /// Config file; defaults to ./nsagent.toml, then ~/.nsagent.toml.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output format. `json` prints exactly one document on standard output.
    #[arg(long, global = true, value_enum)]
    output: Option<OutputFormat>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Chunk, embed and index the .txt/.md files below a directory.
    Ingest(IngestArgs),
    /// Run the pipeline once on a requirement text and print the report.
    Run(RunArgs),
    /// Run a benchmark scenario n times and print the metrics table.
    Eval(EvalArgs),
    /// Serve the HTTP API until SIGTERM or Ctrl-C.
    Serve(ServeArgs),
}

/// Where replies and simulator runs come from.
#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Replay LLM replies from a transcript file instead of calling a provider.
    #[arg(long, value_name = "FILE")]
    pub transcript: Option<PathBuf>,
    /// Use the built-in fake simulator instead of compiling and running ns-3.
    #[arg(long)]
    pub fake_sim: bool,
    /// Knowledge store index used for retrieval.
    #[arg(long, value_name = "PATH")]
    pub store: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory with the documentation to index.
    pub dir: PathBuf,
    /// Index file to write; replaced if it exists.
    #[arg(long, value_name = "PATH")]
    pub store: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Requirement text. Use --file to read it from a file instead.
    #[arg(required_unless_present = "file", conflicts_with = "file")]
    pub requirements: Option<String>,
    #[arg(long, short = 'f', value_name = "FILE")]
    pub file: Option<PathBuf>,
    /// Chunks retrieved per query.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<u32>,
    /// Model for every LLM request of this run.
    #[arg(long)]
    pub model: Option<String>,
    /// Generate a Python payload instead of C++.
    #[arg(long, value_parser = ["cpp", "python"])]
    pub payload: Option<String>,
    /// Stop after each iteration for human review (exits with code 4).
    #[arg(long)]
    pub pause: bool,
    /// Persist the session under this directory.
    #[arg(long, value_name = "DIR")]
    pub state_dir: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Scenario TOML file.
    pub scenario: PathBuf,
    /// Samples to run; defaults to the scenario's value.
    #[arg(long)]
    pub n: Option<u64>,
    /// k of pass@k; defaults to the scenario's value.
    #[arg(long)]
    pub k: Option<u64>,
    #[arg(long)]
    pub model: Option<String>,
    /// Append each finished sample to this JSONL file.
    #[arg(long, value_name = "FILE")]
    pub record: Option<PathBuf>,
    /// Run samples one after another.
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Address to bind; defaults to the config value or 127.0.0.1.
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub state_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_workers: Option<usize>,
    #[arg(long)]
    pub max_sessions: Option<usize>,
    /// Origin allowed to call the API from a browser; repeatable.
    #[arg(long = "cors-origin", value_name = "ORIGIN")]
    pub cors_origins: Vec<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Usage = 2,
    Failed = 3,
    AwaitingHuman = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { exit: Exit::Usage, message: message.into() }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self { exit: Exit::Failed, message: message.into() }
    }
}

/// What a command prints on success. A null `json` prints nothing, for
/// commands that already wrote their document.
pub struct Outcome {
    pub exit: Exit,
    pub human: String,
    pub json: Value,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("NSAGENT_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    let cwd = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
    let home = std::env::var_os("HOME").map(PathBuf::from);
    let config = CliConfig::discover(cli.config.as_deref(), &cwd, home.as_deref());
    let format = cli.output.or_else(|| config.as_ref().ok().and_then(|c| c.output)).unwrap_or_default();

    let result = config.map_err(CliError::usage).and_then(|config| match cli.command {
        Command::Ingest(a) => commands::ingest(&config, a),
        Command::Run(a) => commands::run(&config, a),
        Command::Eval(a) => commands::eval(&config, a),
        Command::Serve(a) => commands::serve(&config, a, format),
    });
    let exit = match result {
        Ok(out) => {
            // A closed pipe downstream is not our failure.
            let mut stdout = std::io::stdout().lock();
            let _ = match format {
                OutputFormat::Human if !out.human.is_empty() => writeln!(stdout, "{}", out.human.trim_end()),
                OutputFormat::Json if !out.json.is_null() => writeln!(stdout, "{}", out.json),
                _ => Ok(()),
            };
            out.exit
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            if format == OutputFormat::Json {
                let doc = json!({ "error": { "message": e.message, "exit_code": e.exit as u8 } });
                let _ = writeln!(std::io::stdout(), "{doc}");
            }
            e.exit
        }
    };
    ExitCode::from(exit as u8)
}
