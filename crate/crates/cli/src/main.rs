//! `wpfs`: cross-validation, λ sweeps, embeddings, synthetic data and
//! importance reports for weight-predictor classifiers.
//!
//! Exit codes: 0 success, 2 bad input, 3 aborted run (outputs written so
//! far are kept and flagged in the manifest).

mod args;
mod experiment;
mod manifest;
mod output;
mod tools;

use std::fmt;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::Parser;

use args::{Cli, Command};

pub const SEED_ENV: &str = "WPFS_SEED";

/// A failure after inputs were accepted: divergence or an unwritable output.
#[derive(Debug)]
pub struct Abort(pub String);

impl fmt::Display for Abort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Abort {}

/// The explicit seed, else `WPFS_SEED`, else 0.
pub fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(seed) = explicit {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => match text.trim().parse() {
            Ok(seed) => Ok(seed),
            Err(_) => bail!("{SEED_ENV}='{text}' is not an unsigned integer"),
        },
        Err(_) => Ok(0),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let aborted = err.chain().any(|e| {
        e.is::<Abort>()
            || matches!(
                e.downcast_ref::<wpfs_core::Error>(),
                Some(wpfs_core::Error::Diverged { .. })
            )
    });
    if aborted {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Cv(a) => experiment::cmd_cv(a),
        Command::Sweep(a) => experiment::cmd_sweep(a),
        Command::Embed(a) => tools::cmd_embed(a),
        Command::Synth(a) => tools::cmd_synth(a),
        Command::Importance(a) => tools::cmd_importance(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
