//! Experiment configuration: a TOML schema with defaults for every field, so
//! an empty file is already a runnable experiment.
//!
//! Loading happens in two stages. [`RawExperimentConfig`] mirrors the file —
//! everything optional — and [`RawExperimentConfig::resolve`] fills defaults,
//! applies CLI overrides, and lowers the result into the engine's
//! [`ExperimentSpec`]. Resolved configs serialize back into the same schema
//! (see [`ExperimentConfig::to_toml`]), so `resolve ∘ parse ∘ serialize` is
//! idempotent and a run directory can embed its exact effective config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use pollen_sim::cluster::{gpu_preset, ContentionModel, GpuModel, NodeSpec};
use pollen_sim::engine::{AggregationMode, ExperimentSpec, ProtocolConfig, ProtocolMode};
use pollen_sim::placement::Policy;
use pollen_sim::population::{preset as population_preset, PopulationSpec, SizeDistribution};

/// Fallback output directory when neither flag, config, nor environment
/// names one.
pub const DEFAULT_OUT_DIR: &str = "pollen-out";
/// Default master seed; any fixed value works, it just has to be documented.
pub const DEFAULT_SEED: u64 = 42;
const DEFAULT_CLIENTS_PER_ROUND: usize = 100;
const DEFAULT_NUM_ROUNDS: usize = 100;
const DEFAULT_MODEL_DIM: usize = 16;
const DEFAULT_UPDATE_MAGNITUDE: f64 = 0.1;
const DEFAULT_POPULATION_PRESET: &str = "openimage-like";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {context}: {source}")]
    Parse {
        context: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Values taken from the command line (and the `POLLEN_SIM_OUT` environment
/// variable) that override or default the file's fields.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    /// Policy name; validated during resolution so errors name the field.
    pub policy: Option<String>,
    /// Protocol mode name, same treatment as `policy`.
    pub protocol: Option<String>,
    /// `--out` flag: strongest output-directory source.
    pub out_flag: Option<PathBuf>,
    /// `POLLEN_SIM_OUT`: weakest source above the built-in default.
    pub out_env: Option<PathBuf>,
}

/// `[population]` section. A preset (or the openimage-like default) provides
/// the base values; any explicit field overrides the preset's. The seed
/// defaults to the experiment's master seed so one knob reseeds everything.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPopulation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_clients: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size_distribution: Option<SizeDistribution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// `[protocol]` section; defaults mirror [`ProtocolConfig::default`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProtocol {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_message_latency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result_payload_latency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_aggregation_time: Option<f64>,
}

/// `[cluster]` section. `gpu_models` extends (or overrides, by name) the
/// built-in GPU presets; `nodes` lists machines and their GPUs in worker-id
/// order; `workers_per_gpu` caps oversubscription below each model's
/// capacity. Default topology: one "a40-like" and one "rtx2080ti-like" node,
/// each GPU filled to capacity.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCluster {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<NodeSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpu_models: Option<Vec<GpuModel>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers_per_gpu: Option<BTreeMap<String, u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contention: Option<ContentionModel>,
}

/// The file schema: every field optional. Scalar fields must stay declared
/// before the table-valued sections or TOML serialization would interleave
/// keys after tables.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_clients: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_magnitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population: Option<RawPopulation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<RawProtocol>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster: Option<RawCluster>,
}

/// A fully resolved experiment: the engine spec plus where to write reports.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub spec: ExperimentSpec,
    pub out_dir: PathBuf,
}

pub fn parse_config_str(text: &str) -> Result<RawExperimentConfig, ConfigError> {
    toml::from_str(text).map_err(|source| ConfigError::Parse {
        context: "inline config".to_string(),
        source: Box::new(source),
    })
}

/// Reads, parses, resolves, and validates a config file in one step.
pub fn load_config(path: &Path, overrides: &CliOverrides) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: RawExperimentConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
        context: format!("`{}`", path.display()),
        source: Box::new(source),
    })?;
    raw.resolve(overrides)
}

fn parse_policy(name: &str) -> Result<Policy, ConfigError> {
    name.parse::<Policy>()
        .map_err(|e| invalid("policy", e.to_string()))
}

fn parse_protocol_mode(name: &str) -> Result<ProtocolMode, ConfigError> {
    name.parse::<ProtocolMode>()
        .map_err(|e| invalid("protocol.mode", e.to_string()))
}

fn parse_aggregation(name: &str) -> Result<AggregationMode, ConfigError> {
    match name {
        "incremental" => Ok(AggregationMode::Incremental),
        "running-sum" => Ok(AggregationMode::RunningSum),
        other => Err(invalid(
            "aggregation",
            format!("unknown mode `{other}` (expected incremental or running-sum)"),
        )),
    }
}

/// The out-of-the-box cluster: one node per built-in GPU preset.
pub fn default_nodes() -> Vec<NodeSpec> {
    vec![
        NodeSpec {
            node_id: 0,
            gpus: vec![("a40-like".into(), 1)],
            cpu_cores: 16,
        },
        NodeSpec {
            node_id: 1,
            gpus: vec![("rtx2080ti-like".into(), 1)],
            cpu_cores: 16,
        },
    ]
}

impl RawExperimentConfig {
    /// Overwrites the fields the CLI may override; the output directory is
    /// handled in [`resolve`](Self::resolve) because it merges three sources.
    pub fn apply_overrides(&mut self, overrides: &CliOverrides) {
        if let Some(seed) = overrides.seed {
            self.seed = Some(seed);
        }
        if let Some(policy) = &overrides.policy {
            self.policy = Some(policy.clone());
        }
        if let Some(mode) = &overrides.protocol {
            let protocol = self.protocol.get_or_insert_with(RawProtocol::default);
            protocol.mode = Some(mode.clone());
        }
    }

    /// Fills every default and lowers to an [`ExperimentConfig`]. Validation
    /// errors name the offending field.
    pub fn resolve(&self, overrides: &CliOverrides) -> Result<ExperimentConfig, ConfigError> {
        let mut raw = self.clone();
        raw.apply_overrides(overrides);

        let seed = raw.seed.unwrap_or(DEFAULT_SEED);
        let policy = parse_policy(raw.policy.as_deref().unwrap_or("rr"))?;
        let clients_per_round = raw.clients_per_round.unwrap_or(DEFAULT_CLIENTS_PER_ROUND);
        if clients_per_round == 0 {
            return Err(invalid("clients_per_round", "must be ≥ 1"));
        }
        // A fixed total amount of work trumps an explicit round count: the
        // round count becomes however many cohorts the budget fills.
        let num_rounds = match raw.total_clients {
            Some(0) => return Err(invalid("total_clients", "must be ≥ 1 when set")),
            Some(total) => total.div_ceil(clients_per_round as u64) as usize,
            None => raw.num_rounds.unwrap_or(DEFAULT_NUM_ROUNDS),
        };
        if num_rounds == 0 {
            return Err(invalid("num_rounds", "must be ≥ 1"));
        }

        let population = raw.population.clone().unwrap_or_default();
        let preset_name = population
            .preset
            .as_deref()
            .unwrap_or(DEFAULT_POPULATION_PRESET);
        let base = population_preset(preset_name).ok_or_else(|| {
            invalid(
                "population.preset",
                format!(
                    "unknown preset `{preset_name}` (expected one of {})",
                    pollen_sim::population::PRESET_NAMES.join(", ")
                ),
            )
        })?;
        let population = PopulationSpec {
            num_clients: population.num_clients.unwrap_or(base.num_clients),
            batch_size: population.batch_size.unwrap_or(base.batch_size),
            size_distribution: population
                .size_distribution
                .unwrap_or(base.size_distribution),
            // One master seed reseeds the whole experiment unless the
            // population is pinned separately (e.g. to vary placement seeds
            // over a fixed population).
            seed: population.seed.unwrap_or(seed),
        };

        let protocol_raw = raw.protocol.clone().unwrap_or_default();
        let defaults = ProtocolConfig::default();
        let protocol = ProtocolConfig {
            mode: parse_protocol_mode(protocol_raw.mode.as_deref().unwrap_or("push"))?,
            per_message_latency: protocol_raw
                .per_message_latency
                .unwrap_or(defaults.per_message_latency),
            result_payload_latency: protocol_raw
                .result_payload_latency
                .unwrap_or(defaults.result_payload_latency),
            final_aggregation_time: protocol_raw
                .final_aggregation_time
                .unwrap_or(defaults.final_aggregation_time),
        };

        let cluster = raw.cluster.clone().unwrap_or_default();
        let nodes = cluster.nodes.unwrap_or_else(default_nodes);
        // Catalog = built-in presets, overridden/extended by user models,
        // trimmed to the types the nodes actually reference.
        let mut catalog: BTreeMap<String, GpuModel> = pollen_sim::cluster::GPU_PRESET_NAMES
            .iter()
            .map(|name| (name.to_string(), gpu_preset(name).expect("built-in preset")))
            .collect();
        for model in cluster.gpu_models.unwrap_or_default() {
            catalog.insert(model.gpu_type.clone(), model);
        }
        let mut referenced: BTreeMap<String, GpuModel> = BTreeMap::new();
        for node in &nodes {
            for (gpu_type, _) in &node.gpus {
                let model = catalog.get(gpu_type).ok_or_else(|| {
                    invalid(
                        "cluster.nodes",
                        format!(
                            "gpu type `{gpu_type}` is neither a preset nor in cluster.gpu_models"
                        ),
                    )
                })?;
                referenced.insert(gpu_type.clone(), model.clone());
            }
        }

        let aggregation_mode = match raw.aggregation.as_deref() {
            None => AggregationMode::Incremental,
            Some(name) => parse_aggregation(name)?,
        };

        let spec = ExperimentSpec {
            population,
            nodes,
            gpu_catalog: referenced,
            workers_per_gpu_override: cluster.workers_per_gpu,
            contention: cluster.contention.unwrap_or_default(),
            policy,
            protocol,
            clients_per_round,
            num_rounds,
            total_clients: raw.total_clients,
            seed,
            model_dim: raw.model_dim.unwrap_or(DEFAULT_MODEL_DIM),
            update_magnitude: raw.update_magnitude.unwrap_or(DEFAULT_UPDATE_MAGNITUDE),
            aggregation_mode,
            fit_window: raw.fit_window,
        };
        spec.validate()
            .map_err(|e| invalid("experiment", e.to_string()))?;

        let out_dir = overrides
            .out_flag
            .clone()
            .or_else(|| raw.out_dir.as_ref().map(PathBuf::from))
            .or_else(|| overrides.out_env.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        Ok(ExperimentConfig { spec, out_dir })
    }
}

impl ExperimentConfig {
    /// Re-expands the resolved config into the raw schema. Parsing and
    /// resolving the output reproduces `self` exactly.
    pub fn to_raw(&self) -> RawExperimentConfig {
        let spec = &self.spec;
        RawExperimentConfig {
            seed: Some(spec.seed),
            policy: Some(spec.policy.name().to_string()),
            clients_per_round: Some(spec.clients_per_round),
            num_rounds: Some(spec.num_rounds),
            total_clients: spec.total_clients,
            model_dim: Some(spec.model_dim),
            update_magnitude: Some(spec.update_magnitude),
            aggregation: Some(
                match spec.aggregation_mode {
                    AggregationMode::Incremental => "incremental",
                    AggregationMode::RunningSum => "running-sum",
                }
                .to_string(),
            ),
            fit_window: spec.fit_window,
            out_dir: Some(self.out_dir.display().to_string()),
            population: Some(RawPopulation {
                preset: None,
                num_clients: Some(spec.population.num_clients),
                batch_size: Some(spec.population.batch_size),
                size_distribution: Some(spec.population.size_distribution.clone()),
                seed: Some(spec.population.seed),
            }),
            protocol: Some(RawProtocol {
                mode: Some(spec.protocol.mode.to_string()),
                per_message_latency: Some(spec.protocol.per_message_latency),
                result_payload_latency: Some(spec.protocol.result_payload_latency),
                final_aggregation_time: Some(spec.protocol.final_aggregation_time),
            }),
            cluster: Some(RawCluster {
                nodes: Some(spec.nodes.clone()),
                gpu_models: Some(spec.gpu_catalog.values().cloned().collect()),
                workers_per_gpu: spec.workers_per_gpu_override.clone(),
                contention: Some(spec.contention.clone()),
            }),
        }
    }

    /// The effective configuration as TOML, suitable for re-running.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.to_raw()).expect("resolved config serializes")
    }
}
