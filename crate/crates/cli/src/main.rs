//! `steerlab`: one binary with a subcommand per pipeline stage.
//!
//! Settings come from defaults, then `--config FILE` (`key = value` text or a run
//! manifest), then `STEERLAB_SEED`, then trailing `--key value` flags.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or validation error,
//! 3 numeric divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use steerlab::run::{load_config_file, run_stage, RunConfig, Stage};
use steerlab::Error;

#[derive(Parser)]
#[command(name = "steerlab", version, about = "Steerable idea proposer pipeline", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted quality markers.
    Synth(StageArgs),
    /// Validate and filter externally supplied records into a corpus.
    Ingest(StageArgs),
    /// Supervised fine-tuning of the proposer.
    Sft(StageArgs),
    /// Train the novelty, feasibility and effectiveness reward models.
    TrainRewards(StageArgs),
    /// PPO training of the steering adapters.
    Rl(StageArgs),
    /// Generate ideas with static or predicted steering gains.
    Decode(StageArgs),
    /// Novelty-gain sweep.
    Sweep(StageArgs),
    /// Reward fidelity and per-position profile.
    Eval(StageArgs),
    /// Re-emit report tables from an earlier output directory.
    Report(StageArgs),
    /// Per-idea and per-sentence reward scores of every corpus idea.
    Score(StageArgs),
    /// Print every configuration key with its default and description.
    Defaults,
}

#[derive(Args)]
struct StageArgs {
    /// `key = value` file or run manifest.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// `--key value` or `--key=value` for any configuration key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const DIVERGENCE: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    if e.is_divergence() {
        DIVERGENCE
    } else if matches!(e, Error::Config { .. }) {
        USAGE
    } else {
        DATA
    }
}

/// Pulls `--config FILE` out of the trailing overrides, where clap leaves it once
/// an override precedes it.
fn split_config(args: &mut StageArgs) -> Result<(), Error> {
    let mut rest = Vec::new();
    let mut it = std::mem::take(&mut args.overrides).into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let v = it.next().ok_or_else(|| Error::Config {
                key: "config".into(),
                msg: "missing value".into(),
            })?;
            args.config = Some(v.into());
        } else if let Some(v) = a.strip_prefix("--config=") {
            args.config = Some(v.into());
        } else {
            rest.push(a);
        }
    }
    args.overrides = rest;
    Ok(())
}

fn build_config(mut args: StageArgs) -> Result<RunConfig, Error> {
    split_config(&mut args)?;
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        load_config_file(path, &mut cfg)?;
    }
    if let Ok(seed) = std::env::var("STEERLAB_SEED") {
        cfg.set("seed", &seed).map_err(|e| Error::Config {
            key: "STEERLAB_SEED".into(),
            msg: e.to_string(),
        })?;
    }
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let (stage, args) = match cli.command {
        Command::Synth(a) => (Stage::Synth, a),
        Command::Ingest(a) => (Stage::Ingest, a),
        Command::Sft(a) => (Stage::Sft, a),
        Command::TrainRewards(a) => (Stage::TrainRewards, a),
        Command::Rl(a) => (Stage::Rl, a),
        Command::Decode(a) => (Stage::Decode, a),
        Command::Sweep(a) => (Stage::Sweep, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::Report(a) => (Stage::Report, a),
        Command::Score(a) => (Stage::Score, a),
        Command::Defaults => {
            for (key, default, doc) in RunConfig::documentation() {
                if !doc.is_empty() {
                    println!("# {doc}");
                }
                println!("{key} = {default}");
            }
            return ExitCode::SUCCESS;
        }
    };
    let cfg = match build_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE);
        }
    };
    match run_stage(stage, &cfg) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("manifest: {}", outcome.out.join(steerlab::run::RUN_MANIFEST).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
