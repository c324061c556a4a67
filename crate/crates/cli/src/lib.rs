//! `modal-tune` command line: forward analysis, calibration, sensitivity,
//! noise sweeps, benchmarking and fixture generation.
//!
//! Exit status: 0 on success, 2 for usage errors, 1 for invalid input
//! (unreadable files, bad configuration, inconsistent model), 3 for
//! numerical failures (indefinite matrices, eigensolver breakdown).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<modal_tune::Error> for CliError {
    fn from(e: modal_tune::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "modal-tune", version, about = "Vibration-based finite element model updating")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output directory (overrides the config's `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Random seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for assembly and sweeps.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Also write the reduced stiffness and mass in Matrix Market format.
    #[arg(long, global = true)]
    pub export_matrices: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Smallest eigenpairs at the configured starting point.
    Forward(ConfigArg),
    /// Trust-region calibration against the target.
    Update(ConfigArg),
    /// Jacobian SVD and trust flags at the optimum (or a given point).
    Sensitivity(ConfigArg),
    /// Parameter error against frequency noise level.
    NoiseSweep(ConfigArg),
    /// Trust-region method against the black-box baseline.
    Benchmark(ConfigArg),
    /// Write a built-in fixture.
    MakeMesh {
        #[command(subcommand)]
        fixture: Fixture,
    },
}

#[derive(Debug, clap::Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Fixture {
    /// Arch on piers: mesh.json, target.json and config.json.
    Arch {
        #[arg(long, default_value_t = modal_tune::mesh::CANONICAL_REFINEMENT)]
        refinement: usize,
    },
}

fn load(cli: &Cli, path: &Path) -> Result<config::Run, CliError> {
    let mut run = config::load(path)?;
    if let Some(out) = &cli.out {
        run.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        run.config.seed = seed;
    }
    Ok(run)
}

fn finish<T>(out: commands::Output<T>) -> T {
    report::say(&out.summary);
    for f in &out.files {
        log::info!("wrote {}", f.display());
    }
    out.report
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Forward(a) => {
            finish(commands::forward(&load(cli, &a.config)?, cli.export_matrices)?);
        }
        Command::Update(a) => {
            finish(commands::update_cmd(&load(cli, &a.config)?)?);
        }
        Command::Sensitivity(a) => {
            finish(commands::sensitivity_cmd(&load(cli, &a.config)?)?);
        }
        Command::NoiseSweep(a) => {
            finish(commands::noise_sweep_cmd(&load(cli, &a.config)?)?);
        }
        Command::Benchmark(a) => {
            finish(commands::benchmark_cmd(&load(cli, &a.config)?)?);
        }
        Command::MakeMesh { fixture: Fixture::Arch { refinement } } => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let files = commands::make_mesh_arch(&dir, *refinement)?;
            let list: Vec<String> = files.iter().map(|f| f.display().to_string()).collect();
            report::say(&format!("wrote {}\n", list.join(", ")));
        }
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
