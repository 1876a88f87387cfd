//! `pollen-sim`: run and sweep placement-simulation experiments from TOML
//! configs, emitting CSV metrics and plain-text report tables.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use pollen_cli::config::{load_config, CliOverrides};
use pollen_cli::sweep::{load_sweep, run_sweep};
use pollen_cli::{run_single, validate_config};

#[derive(Parser)]
#[command(
    name = "pollen-sim",
    version,
    about = "Deterministic federated-learning placement simulator",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run(RunArgs),
    /// Run every (value, seed) cell of a sweep file.
    Sweep(RunArgs),
    /// Check a config file and print its fingerprint without running.
    Validate(RunArgs),
    /// List the built-in population and GPU presets.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment (run/validate) or sweep (sweep) TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to the config's out_dir, then
    /// $POLLEN_SIM_OUT, then ./pollen-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Placement policy override: rr, srr, bu, or lb.
    #[arg(long)]
    policy: Option<String>,
    /// Protocol mode override: push or pull.
    #[arg(long)]
    protocol: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> CliOverrides {
        CliOverrides {
            seed: self.seed,
            policy: self.policy.clone(),
            protocol: self.protocol.clone(),
            out_flag: self.out.clone(),
            out_env: std::env::var_os("POLLEN_SIM_OUT").map(PathBuf::from),
        }
    }
}

fn main() -> ExitCode {
    // Rust ignores SIGPIPE by default, turning `pollen-sim ... | head` into a
    // broken-pipe panic; die quietly like other line-oriented tools instead.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match try_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn try_main() -> Result<ExitCode, anyhow::Error> {
    match Cli::parse().command {
        Command::Run(args) => {
            let config = load_config(&args.config, &args.overrides())?;
            let cell = run_single(&config).context("experiment failed")?;
            let result = cell.result.as_ref().expect("successful run has a result");
            println!(
                "ran {} round(s), policy {}, seed {}: throughput {} cps, timedelta {} s",
                result.rounds.len(),
                config.spec.policy.name(),
                config.spec.seed,
                result.throughput_stats,
                result.timedelta_stats,
            );
            println!("reports in {}", config.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(args) => {
            let sweep = load_sweep(&args.config)?;
            let overrides = args.overrides();
            // Sweeps resolve the output directory like runs do, via a throwaway
            // resolution of the base config.
            let out_dir = sweep.base.resolve(&overrides)?.out_dir;
            let report = run_sweep(&sweep, &out_dir, &overrides)?;
            let total = report.cells.len();
            let failed: Vec<_> = report.failed().collect();
            println!(
                "sweep over {}: {}/{} cell(s) succeeded; reports in {}",
                sweep.axis.name(),
                total - failed.len(),
                total,
                out_dir.display()
            );
            for cell in &failed {
                eprintln!(
                    "cell {} failed: {}",
                    cell.dir,
                    cell.error.as_deref().unwrap_or("unknown error")
                );
            }
            Ok(if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Validate(args) => {
            let config = load_config(&args.config, &args.overrides())?;
            validate_config(&config)?;
            println!("ok: fingerprint {}", config.spec.fingerprint());
            Ok(ExitCode::SUCCESS)
        }
        Command::Presets => {
            println!("population presets:");
            for name in pollen_sim::population::PRESET_NAMES {
                let p = pollen_sim::population::preset(name).expect("built-in preset");
                println!(
                    "  {name:<18} {} clients, batch size {}, {:?}",
                    p.num_clients, p.batch_size, p.size_distribution
                );
            }
            println!("gpu presets:");
            for name in pollen_sim::cluster::GPU_PRESET_NAMES {
                let g = pollen_sim::cluster::gpu_preset(name).expect("built-in preset");
                println!(
                    "  {name:<18} t(m) = {}*m + {}*ln({}*m) + {}, up to {} worker(s)/gpu",
                    g.latency_linear,
                    g.latency_log_coeff,
                    g.latency_log_scale,
                    g.latency_offset,
                    g.max_workers
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
