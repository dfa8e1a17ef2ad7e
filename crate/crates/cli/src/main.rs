//! `uio <command> [--config PATH] [--key=value ...]`
//!
//! Commands: train, verify-equivalence, verify-unbiased,
//! verify-retention, ratio-stats, bench, autoencode. Verify commands
//! judge their own thresholds and exit nonzero on failure.

mod checkpoint;
mod commands;
mod config;
mod out;

use std::process::ExitCode;

use anyhow::{bail, Result};

use config::ExperimentConfig;

const USAGE: &str = "usage: uio <command> [--config PATH] [--key=value ...]

commands:
  train                train a toy model with the configured scheduler
  verify-equivalence   incremental vs truncated gradients on random runs
  verify-unbiased      stochastic gradient mean vs full-chain oracle
  verify-retention     reservoir retention frequencies vs min(1, S/(t-1))
  ratio-stats          truncated/full gradient-norm ratio statistics
  bench                step-time and live-node comparison across windows
  autoencode           train segment compression and report reconstruction

common keys: model S T l k_mem d_model layers heads vocab ffn_mult
             lora_rank seed n_trials lr steps iterations batch mode
             output_path
";

fn parse_args(args: &[String]) -> Result<(String, Option<String>, Vec<(String, String)>)> {
    if args.is_empty() {
        bail!("missing command\n\n{USAGE}");
    }
    let command = args[0].clone();
    let mut config_path = None;
    let mut overrides = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        if let Some(path) = arg.strip_prefix("--config=") {
            config_path = Some(path.to_string());
        } else if arg == "--config" {
            i += 1;
            let Some(path) = args.get(i) else {
                bail!("--config requires a path");
            };
            config_path = Some(path.clone());
        } else if let Some(rest) = arg.strip_prefix("--") {
            let Some((key, value)) = rest.split_once('=') else {
                bail!("expected --key=value, got `{arg}`");
            };
            overrides.push((key.to_string(), value.to_string()));
        } else {
            bail!("unexpected argument `{arg}`\n\n{USAGE}");
        }
        i += 1;
    }
    Ok((command, config_path, overrides))
}

fn run() -> Result<bool> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--help" || a == "-h") {
        print!("{USAGE}");
        return Ok(true);
    }
    let (command, config_path, overrides) = parse_args(&args)?;
    let cfg = ExperimentConfig::resolve(config_path.as_deref(), &overrides)?;
    match command.as_str() {
        "train" => commands::train(&cfg),
        "verify-equivalence" => commands::verify_equivalence(&cfg),
        "verify-unbiased" => commands::verify_unbiased(&cfg),
        "verify-retention" => commands::verify_retention(&cfg),
        "ratio-stats" => commands::ratio_stats(&cfg),
        "bench" => commands::bench(&cfg),
        "autoencode" => commands::autoencode(&cfg),
        other => bail!("unknown command `{other}`\n\n{USAGE}"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
