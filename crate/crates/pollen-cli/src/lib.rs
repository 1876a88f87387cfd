//! Library backing the `pollen-sim` binary: config loading, sweep
//! orchestration, and report emission. Split from `main.rs` so integration
//! tests can drive everything without spawning processes.

pub mod config;
pub mod report;
pub mod sweep;

use std::path::Path;

use pollen_sim::engine::run_experiment;

use config::ExperimentConfig;
use report::CellReport;

/// Runs a single experiment and writes the full report layout (metrics,
/// summary, table, manifest, effective config) into the config's out_dir.
pub fn run_single(config: &ExperimentConfig) -> Result<CellReport, anyhow::Error> {
    let mut cell = CellReport {
        axis: "run".to_string(),
        value: config.spec.policy.name().to_string(),
        seed: config.spec.seed,
        dir: ".".to_string(),
        config_fingerprint: Some(config.spec.fingerprint()),
        error: None,
        result: None,
    };
    let result = run_experiment(&config.spec)?;
    report::write_cell_files(&config.out_dir, config.spec.policy.name(), &result)?;
    std::fs::write(config.out_dir.join("config.toml"), config.to_toml())?;
    cell.result = Some(result);
    let cells = std::slice::from_ref(&cell);
    report::write_report_files(&config.out_dir, "run", "run", cells)?;
    Ok(cell)
}

/// Structural dry-run used by the `validate` verb: checks everything that
/// can fail before simulation starts without generating a population.
pub fn validate_config(config: &ExperimentConfig) -> Result<(), anyhow::Error> {
    config.spec.validate()?;
    let workers = pollen_sim::cluster::allocate_workers(
        &config.spec.nodes,
        &config.spec.gpu_catalog,
        config.spec.workers_per_gpu_override.as_ref(),
    )?;
    anyhow::ensure!(!workers.is_empty(), "cluster allocates zero workers");
    anyhow::ensure!(
        config.spec.clients_per_round <= config.spec.population.num_clients,
        "clients_per_round ({}) exceeds the population size ({})",
        config.spec.clients_per_round,
        config.spec.population.num_clients
    );
    let _ = Path::new(&config.out_dir);
    Ok(())
}
