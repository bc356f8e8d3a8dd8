//! `ohio` command-line pipeline: collect | relabel | train | eval | check.
//!
//! Flags mirror config keys with dotted names (`--env.kind linear`,
//! `--relabel.method Cem`, `--learn.lr 0.001`); they override the config
//! file, and the OHIO_SEED environment variable overrides the file seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ohio_cli::acceptance::run_criteria;
use ohio_cli::commands::{cmd_collect, cmd_eval, cmd_relabel, cmd_train};
use ohio_cli::config::RunConfig;
use ohio_cli::{env_seed_override, CliError};

#[derive(Parser)]
#[command(name = "ohio", about = "Recover high-level actions from low-level logs and train on them")]
struct Cli {
    /// JSON config file; dotted flags override individual keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Explicit key=value overrides (equivalent to dotted flags).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll the configured behavior policy and write a raw JSONL dataset.
    Collect {
        #[arg(long, default_value = "dataset.jsonl")]
        out: PathBuf,
    },
    /// Invert a raw dataset into high-level (s, u, r, s') records.
    Relabel {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "relabeled.jsonl")]
        out: PathBuf,
    },
    /// Train an offline policy on a relabeled dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint in the configured environment.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "results.json")]
        out: PathBuf,
    },
    /// Run the acceptance suite (one pass/fail line per criterion).
    Check {
        #[arg(long, default_value = "check-artifacts")]
        out: PathBuf,
        /// Comma-separated criterion ids (default: all).
        #[arg(long)]
        criteria: Option<String>,
    },
}

/// Rewrite `--dotted.key value` pairs into `--set dotted.key=value` so the
/// spec'd flag style and clap coexist.
fn preprocess_args() -> Vec<String> {
    let mut out = Vec::new();
    let mut args = std::env::args().peekable();
    while let Some(arg) = args.next() {
        let is_dotted = arg.starts_with("--")
            && arg[2..].contains('.')
            && !arg[2..].starts_with('.')
            && arg != "--set";
        if is_dotted {
            let key = arg[2..].to_string();
            if let Some((k, v)) = key.split_once('=') {
                out.push("--set".into());
                out.push(format!("{k}={v}"));
            } else if let Some(value) = args.next() {
                out.push("--set".into());
                out.push(format!("{key}={value}"));
            } else {
                out.push(arg); // let clap report the missing value
            }
        } else {
            out.push(arg);
        }
    }
    out
}

fn run() -> Result<(), CliError> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::try_parse_from(preprocess_args())
        .map_err(|e| match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                print!("{e}");
                std::process::exit(0);
            }
            _ => CliError::Usage(e.to_string()),
        })?;

    let overrides: Vec<(String, String)> = cli
        .set
        .iter()
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CliError::Usage(format!("override '{pair}' is not KEY=VALUE")))
        })
        .collect::<Result<_, _>>()?;
    let config = RunConfig::resolve(cli.config.as_deref(), env_seed_override()?, &overrides)?;

    match cli.command {
        Command::Collect { out } => {
            let manifest = cmd_collect(&config, &out)?;
            println!("wrote {} transitions to {}", manifest.count, out.display());
        }
        Command::Relabel { input, out } => {
            let report = cmd_relabel(&config, &input, &out)?;
            println!(
                "relabeled {} -> {} ({} windows, retention {:.1}%, mean loss {:.3e})",
                input.display(),
                out.display(),
                report.windows,
                100.0 * report.retention_rate,
                report.mean_inv_loss
            );
        }
        Command::Train { dataset, out } => {
            cmd_train(&config, &dataset, &out)?;
            println!("trained model written to {}", out.display());
        }
        Command::Eval { model, out } => {
            let results = cmd_eval(&config, &model, &out)?;
            match results.normalized_score {
                Some(score) => println!(
                    "mean return {:.4} +/- {:.4}, normalized {:.1}",
                    results.mean_return, results.std_return, score
                ),
                None => println!(
                    "mean return {:.4} +/- {:.4}",
                    results.mean_return, results.std_return
                ),
            }
        }
        Command::Check { out, criteria } => {
            let ids: Vec<usize> = match criteria {
                Some(list) => list
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| CliError::Usage(format!("bad criterion id '{s}'")))
                    })
                    .collect::<Result<_, _>>()?,
                None => (1..=9).collect(),
            };
            let results = run_criteria(&ids, &out);
            let mut failed = 0;
            for result in &results {
                println!("{}", result.line());
                if !result.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(CliError::Numeric(format!("{failed} criteria failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
