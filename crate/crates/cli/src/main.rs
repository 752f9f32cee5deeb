//! `rail`: data generation, offline training, online runs, sweeps and the
//! verification suite.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rail_core::parallel::Parallelism;

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "rail", version, about = "Discriminator-weighted imitation from mixed-quality demonstrations")]
pub struct Cli {
    /// Worker threads; 1 runs every stage sequentially, 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    /// Root for default output locations.
    #[arg(long, global = true, env = "RAIL_OUT_ROOT", default_value = "runs")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a demonstration file for one tier or a named supplementary mix.
    GenData(commands::GenData),
    /// Roll the scripted expert and a uniform random policy for score anchors.
    RefReturns(commands::RefReturns),
    /// Fit densities, train the discriminator and the weighted policy.
    TrainOffline(commands::TrainOffline),
    /// Run trained artifacts online with optional shift-gated adaptation.
    RunOnline(commands::RunOnline),
    /// Sweep observation noise over trained policies.
    Evaluate(commands::Evaluate),
    /// Score each shift threshold 0.0..=1.0 in steps of 0.1.
    GridKth(commands::GridKth),
    /// Train and sweep once per supplementary mix.
    TierAblation(commands::TierAblation),
    /// Run the oracle suite.
    Verify(commands::Verify),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<rail_core::Error>() {
        Some(rail_core::Error::NumericAbort { .. } | rail_core::Error::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn configure_threads(jobs: usize) -> Parallelism {
    if jobs == 1 {
        Parallelism::set_current(Parallelism::Sequential);
        return Parallelism::Sequential;
    }
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    Parallelism::set_current(Parallelism::Rayon);
    Parallelism::current()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mode = configure_threads(cli.jobs);
    let args: Vec<String> = std::env::args().skip(1).collect();
    match commands::run(&cli, mode, &args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
