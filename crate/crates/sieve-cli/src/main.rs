//! `sieve` — single-binary front end for the noise-map pipeline.
//!
//! Usage: sieve <subcommand> [--config <path>] [--out <dir>] [--seed <u64>]
//!        [--<section>.<key> <value> ...]
//!
//! Flags mirroring config keys override the file. Every run writes a
//! `run.meta` snapshot (config + seed + version) into the output directory;
//! re-running the same subcommand with `--config run.meta` reproduces the
//! outputs bit for bit.

mod commands;
mod config;

use commands::{AppError, Context};
use config::Config;
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "\
sieve — learn per-feature noise tolerance, suppress what the classifier
doesn't need, and evaluate utility, leakage, adversaries, and fairness.

USAGE:
    sieve <SUBCOMMAND> [--config <path>] [--out <dir>] [--seed <u64>]
                       [--<section>.<key> <value> ...]

SUBCOMMANDS:
    train-classifier   train a target/substitute/adversary classifier
    train-noise-map    learn per-feature noise scales against a frozen model
    train-suppression  threshold a noise map and train replacement constants
    sift               apply a sift plan to a tensor file
    evaluate           stochastic accuracy (and optional MI loss) of a plan
    sweep              privacy-accuracy sweep over a lambda grid
    adversary          adversary inference with and without retraining
    fairness           demographic parity / equalized odds before and after
    blackbox           white-box vs black-box (substitute model) comparison
    estimate-mi        KSG mutual information of a sample pair or fixture
    bound              analytic Gaussian-channel upper bound on MI

Config files are line-oriented: [section] headers, key = value, # comments.
Exit codes: 1 usage, 2 missing input file, 3 validation, 4 numeric failure.
";

fn parse_args(args: &[String]) -> Result<(String, Config, PathBuf, Option<u64>), AppError> {
    if args.is_empty() {
        return Err(AppError::Usage(USAGE.to_string()));
    }
    let subcommand = args[0].clone();
    let mut config_path: Option<PathBuf> = None;
    let mut out_dir = PathBuf::from("out");
    let mut seed: Option<u64> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let key = flag.strip_prefix("--").ok_or_else(|| {
            AppError::Usage(format!("expected a --flag, got '{flag}'\n\n{USAGE}"))
        })?;
        let value = args.get(i + 1).ok_or_else(|| {
            AppError::Usage(format!("flag --{key} needs a value\n\n{USAGE}"))
        })?;
        match key {
            "config" => config_path = Some(PathBuf::from(value)),
            "out" => out_dir = PathBuf::from(value),
            "seed" => {
                seed = Some(value.parse().map_err(|_| {
                    AppError::Usage(format!("--seed needs an unsigned integer, got '{value}'"))
                })?)
            }
            other => overrides.push((other.to_string(), value.clone())),
        }
        i += 2;
    }

    let mut config = match config_path {
        None => Config::default(),
        Some(path) => {
            if !path.exists() {
                return Err(AppError::MissingFile(path));
            }
            let text = std::fs::read_to_string(&path)
                .map_err(|e| AppError::Core(sieve_core::Error::Io(e)))?;
            Config::parse(&text)?
        }
    };
    for (key, value) in overrides {
        config.set(&key, &value);
    }
    Ok((subcommand, config, out_dir, seed))
}

fn run() -> Result<String, AppError> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (subcommand, config, out_dir, seed_flag) = parse_args(&args)?;

    // seed precedence: --seed flag, then the config snapshot, then 0
    let seed = match seed_flag {
        Some(s) => s,
        None => config
            .get_parsed::<u64>("run.seed", "integer")?
            .unwrap_or(0),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| AppError::Core(sieve_core::Error::Io(e)))?;
    let ctx = Context {
        config,
        out_dir,
        seed,
    };

    match subcommand.as_str() {
        "train-classifier" => commands::train_classifier_cmd(&ctx),
        "train-noise-map" => commands::train_noise_map_cmd(&ctx),
        "train-suppression" => commands::train_suppression_cmd(&ctx),
        "sift" => commands::sift_cmd(&ctx),
        "evaluate" => commands::evaluate_cmd(&ctx),
        "sweep" => commands::sweep_cmd(&ctx),
        "adversary" => commands::adversary_cmd(&ctx),
        "fairness" => commands::fairness_cmd(&ctx),
        "blackbox" => commands::blackbox_cmd(&ctx),
        "estimate-mi" => commands::estimate_mi_cmd(&ctx),
        "bound" => commands::bound_cmd(&ctx),
        other => Err(AppError::Usage(format!(
            "unknown subcommand '{other}'\n\n{USAGE}"
        ))),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.message());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
