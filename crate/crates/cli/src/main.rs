use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mateloc_cli::commands::dispatch;
use mateloc_cli::{parse_config, CliError, Command, OUTPUT_DIR_ENV};

/// Analogical-learning localization from CSI.
///
/// Every subcommand reads a JSON run manifest (`--config`). Outputs go to
/// the manifest's `output_dir`, which `--out` or the MATELOC_OUTPUT_DIR
/// environment variable override. Each run writes `effective_config.json`
/// with every default filled in; it can be passed back as `--config`.
///
/// Exit status: 0 on success, 1 on a runtime error, 2 on a usage or
/// manifest error.
#[derive(Parser, Debug)]
#[command(name = "mateloc", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Run manifest (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory, overriding the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write procedural scenario specs (`generate.ids`, seeded by `seed + id`).
    GenScenario(Common),
    /// Generate training and test datasets for each spec in `scenarios`.
    GenDataset(Common),
    /// Train `model` on `datasets.train` and write a checkpoint and metric log.
    Train(Common),
    /// Evaluate `eval.checkpoint` on `datasets.test` with `datasets.train` as references.
    Eval(Common),
    /// Run an experiment protocol and write its result table.
    Experiment {
        /// single-scenario, cross-scenario, transfer, joint, neighbor-sweep,
        /// noise-sweep, initial-error-sweep or sampling-modes.
        name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients (64-bit).
    Gradcheck(Common),
}

fn run(cli: Cli) -> Result<String, CliError> {
    let (command, name, common) = match cli.command {
        Cmd::GenScenario(c) => (Command::GenScenario, None, c),
        Cmd::GenDataset(c) => (Command::GenDataset, None, c),
        Cmd::Train(c) => (Command::Train, None, c),
        Cmd::Eval(c) => (Command::Eval, None, c),
        Cmd::Experiment { name, common } => (Command::Experiment, Some(name), common),
        Cmd::Gradcheck(c) => (Command::Gradcheck, None, c),
    };
    let mut manifest = parse_config(&common.config)?;
    if let Some(out) = common.out.or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from)) {
        manifest.output_dir = out;
    }
    dispatch(command, name.as_deref(), &manifest)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
