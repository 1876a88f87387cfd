//! Sweep orchestration: run one experiment per (axis value, seed) cell and
//! lay the results out as per-cell directories plus pooled reports.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::Deserialize;

use pollen_sim::engine::run_experiment;

use crate::config::{
    default_nodes, CliOverrides, ConfigError, ExperimentConfig, RawExperimentConfig,
};
use crate::report::{write_cell_files, write_report_files, CellReport};

/// Parameter a sweep varies, one cell per (value, seed).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    ClientsPerRound,
    Policy,
    /// Physical count of one GPU type (named by `gpu_type` in the file).
    GpuCount,
    Protocol,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ClientsPerRound => "clients_per_round",
            SweepAxis::Policy => "policy",
            SweepAxis::GpuCount => "gpu_count",
            SweepAxis::Protocol => "protocol",
        }
    }
}

/// One axis value. Integers and names are kept apart so cell directories and
/// table rows print exactly what the file declared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AxisValue {
    Count(u64),
    Name(String),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Count(n) => write!(f, "{n}"),
            AxisValue::Name(s) => f.write_str(s),
        }
    }
}

/// A validated sweep: the axis, its values, the seeds, and the base config
/// every cell is derived from.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
    pub seeds: Vec<u64>,
    /// GPU type scaled by the gpu_count axis.
    pub gpu_type: Option<String>,
    pub base: RawExperimentConfig,
}

/// File schema for a sweep.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    axis: String,
    values: Vec<toml::Value>,
    seeds: Vec<u64>,
    gpu_type: Option<String>,
    #[serde(default)]
    base: RawExperimentConfig,
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

pub fn parse_sweep_str(text: &str) -> Result<SweepSpec, ConfigError> {
    let raw: RawSweep = toml::from_str(text).map_err(|source| ConfigError::Parse {
        context: "inline sweep".to_string(),
        source: Box::new(source),
    })?;

    let axis = match raw.axis.as_str() {
        "clients_per_round" => SweepAxis::ClientsPerRound,
        "policy" => SweepAxis::Policy,
        "gpu_count" => SweepAxis::GpuCount,
        "protocol" => SweepAxis::Protocol,
        other => {
            return Err(invalid(
                "axis",
                format!("unknown axis `{other}` (expected clients_per_round, policy, gpu_count, or protocol)"),
            ))
        }
    };
    if raw.values.is_empty() {
        return Err(invalid("values", "must list at least one value"));
    }
    if raw.seeds.is_empty() {
        return Err(invalid("seeds", "must list at least one seed"));
    }
    if axis == SweepAxis::GpuCount && raw.gpu_type.is_none() {
        return Err(invalid("gpu_type", "required when axis = \"gpu_count\""));
    }

    let values = raw
        .values
        .iter()
        .map(|v| coerce_value(axis, v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepSpec {
        axis,
        values,
        seeds: raw.seeds,
        gpu_type: raw.gpu_type,
        base: raw.base,
    })
}

pub fn load_sweep(path: &Path) -> Result<SweepSpec, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_sweep_str(&text).map_err(|e| match e {
        // Re-anchor parse errors on the actual file path.
        ConfigError::Parse { source, .. } => ConfigError::Parse {
            context: format!("`{}`", path.display()),
            source,
        },
        other => other,
    })
}

/// Checks one raw value against the axis's domain.
fn coerce_value(axis: SweepAxis, value: &toml::Value) -> Result<AxisValue, ConfigError> {
    match axis {
        SweepAxis::ClientsPerRound | SweepAxis::GpuCount => match value.as_integer() {
            Some(n) if n >= 1 => Ok(AxisValue::Count(n as u64)),
            Some(n) => Err(invalid(
                "values",
                format!("{} must be ≥ 1, got {n}", axis.name()),
            )),
            None => Err(invalid(
                "values",
                format!("{} values must be integers", axis.name()),
            )),
        },
        SweepAxis::Policy => match value.as_str() {
            Some(name @ ("rr" | "srr" | "bu" | "lb")) => Ok(AxisValue::Name(name.to_string())),
            Some(other) => Err(invalid(
                "values",
                format!("unknown policy `{other}` (expected rr, srr, bu, or lb)"),
            )),
            None => Err(invalid("values", "policy values must be strings")),
        },
        SweepAxis::Protocol => match value.as_str() {
            Some(name @ ("push" | "pull")) => Ok(AxisValue::Name(name.to_string())),
            Some(other) => Err(invalid(
                "values",
                format!("unknown protocol `{other}` (expected push or pull)"),
            )),
            None => Err(invalid("values", "protocol values must be strings")),
        },
    }
}

/// Derives one cell's resolved config from the base: reseed, then bend the
/// swept field to `value`.
pub fn cell_config(
    sweep: &SweepSpec,
    value: &AxisValue,
    seed: u64,
    overrides: &CliOverrides,
) -> Result<ExperimentConfig, ConfigError> {
    let mut raw = sweep.base.clone();
    raw.apply_overrides(overrides);
    raw.seed = Some(seed);
    match (sweep.axis, value) {
        (SweepAxis::ClientsPerRound, AxisValue::Count(n)) => {
            raw.clients_per_round = Some(*n as usize);
        }
        (SweepAxis::Policy, AxisValue::Name(name)) => {
            raw.policy = Some(name.clone());
        }
        (SweepAxis::Protocol, AxisValue::Name(name)) => {
            let protocol = raw.protocol.get_or_insert_with(Default::default);
            protocol.mode = Some(name.clone());
        }
        (SweepAxis::GpuCount, AxisValue::Count(n)) => {
            let gpu_type = sweep.gpu_type.as_deref().expect("validated at parse");
            let cluster = raw.cluster.get_or_insert_with(Default::default);
            let nodes = cluster.nodes.get_or_insert_with(default_nodes);
            // Scale the first slot holding this type; add a node when the
            // base topology has none.
            match nodes
                .iter_mut()
                .flat_map(|node| node.gpus.iter_mut())
                .find(|(t, _)| t == gpu_type)
            {
                Some((_, count)) => *count = *n as u32,
                None => {
                    let node_id = nodes.iter().map(|node| node.node_id + 1).max().unwrap_or(0);
                    nodes.push(pollen_sim::cluster::NodeSpec {
                        node_id,
                        gpus: vec![(gpu_type.to_string(), *n as u32)],
                        cpu_cores: 16,
                    });
                }
            }
        }
        // Axis/value kinds are paired by construction in parse_sweep_str.
        _ => unreachable!("axis/value kind mismatch"),
    }
    // Seed/policy/protocol flags were already folded in above — strip them
    // so resolution cannot clobber the cell seed or the axis mutation.
    let cell_overrides = CliOverrides {
        seed: None,
        policy: None,
        protocol: None,
        out_flag: overrides.out_flag.clone(),
        out_env: overrides.out_env.clone(),
    };
    raw.resolve(&cell_overrides)
}

/// Directory name for one cell, e.g. `policy-rr-seed-3`.
pub fn cell_dir_name(axis: SweepAxis, value: &AxisValue, seed: u64) -> String {
    format!("{}-{}-seed-{}", axis.name(), value, seed)
}

/// The outcome of a whole sweep.
#[derive(Debug)]
pub struct SweepReport {
    pub cells: Vec<CellReport>,
}

impl SweepReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(CellReport::ok)
    }

    pub fn failed(&self) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(|c| !c.ok())
    }
}

/// Runs every cell (values outer, seeds inner), writing per-cell files as
/// results arrive and the pooled reports at the end. A failing cell is
/// recorded and the sweep continues; only I/O trouble aborts.
pub fn run_sweep(
    sweep: &SweepSpec,
    out_dir: &Path,
    overrides: &CliOverrides,
) -> Result<SweepReport, anyhow::Error> {
    let mut cells = Vec::with_capacity(sweep.values.len() * sweep.seeds.len());
    let mut seen_dirs = BTreeSet::new();
    for value in &sweep.values {
        for &seed in &sweep.seeds {
            let dir_name = cell_dir_name(sweep.axis, value, seed);
            if !seen_dirs.insert(dir_name.clone()) {
                anyhow::bail!("duplicate sweep cell `{dir_name}`: values or seeds repeat");
            }
            let mut cell = CellReport {
                axis: sweep.axis.name().to_string(),
                value: value.to_string(),
                seed,
                dir: dir_name.clone(),
                config_fingerprint: None,
                error: None,
                result: None,
            };
            match cell_config(sweep, value, seed, overrides) {
                Ok(config) => {
                    cell.config_fingerprint = Some(config.spec.fingerprint());
                    match run_experiment(&config.spec) {
                        Ok(result) => {
                            let cell_dir = out_dir.join(&dir_name);
                            write_cell_files(&cell_dir, config.spec.policy.name(), &result)?;
                            std::fs::write(cell_dir.join("config.toml"), config.to_toml())?;
                            cell.result = Some(result);
                        }
                        Err(e) => cell.error = Some(e.to_string()),
                    }
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cells.push(cell);
        }
    }
    write_report_files(out_dir, "sweep", sweep.axis.name(), &cells)?;
    Ok(SweepReport { cells })
}
