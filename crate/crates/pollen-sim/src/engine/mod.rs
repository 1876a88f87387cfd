//! Experiment execution: the round loop tying population, placement,
//! hardware models, and aggregation together under a single master seed.
//!
//! Simulation is virtual-time discrete-event — nothing sleeps, nothing
//! depends on the host — so any run is exactly reproducible from its spec.

mod metrics;
mod round;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregation::{final_aggregate, AggregationError, ModelParams};
use crate::cluster::{allocate_workers, ClusterError, ContentionModel, GpuModel, NodeSpec};
use crate::placement::{
    assign_batch_uniform, assign_learning_based, assign_round_robin, assign_sorted_round_robin,
    fit_time_model, FitError, PlacementError, Policy, TimeModelFit, TrainingRecord,
};
use crate::population::{generate_population, sample_cohort, PopulationError, PopulationSpec};
use crate::rng;

pub use metrics::{ExperimentResult, MeanStd, RoundFits, RoundMetrics};
pub use round::{run_round_pull, run_round_push, RoundContext, RoundOutcome, WorkerRuntime};

/// Which wire protocol the server and workers speak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolMode {
    Push,
    Pull,
}

impl std::fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProtocolMode::Push => "push",
            ProtocolMode::Pull => "pull",
        })
    }
}

impl std::str::FromStr for ProtocolMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "push" => Ok(ProtocolMode::Push),
            "pull" => Ok(ProtocolMode::Pull),
            other => Err(EngineError::InvalidParameter {
                field: "protocol.mode",
                reason: format!("unknown mode `{other}` (expected push or pull)"),
            }),
        }
    }
}

/// Protocol timing knobs. The defaults make a 100-client round's
/// communication a visible but not dominant share of round time; they are
/// free parameters, not measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    /// Seconds per control message (allocation, queue read, ping, reply).
    pub per_message_latency: f64,
    /// Seconds to ship one partial/result model.
    pub result_payload_latency: f64,
    /// Seconds the server spends folding partials after the last result.
    pub final_aggregation_time: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: ProtocolMode::Push,
            per_message_latency: 0.05,
            result_payload_latency: 0.2,
            final_aggregation_time: 0.5,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        for (field, v) in [
            ("protocol.per_message_latency", self.per_message_latency),
            (
                "protocol.result_payload_latency",
                self.result_payload_latency,
            ),
            (
                "protocol.final_aggregation_time",
                self.final_aggregation_time,
            ),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EngineError::InvalidParameter {
                    field,
                    reason: format!("must be ≥ 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// How workers accumulate client models: renormalize on every fold
/// (the definition, default) or keep weighted sums and divide once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    #[default]
    Incremental,
    RunningSum,
}

/// Complete description of one experiment. Everything an
/// [`ExperimentResult`] contains is a pure function of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub population: PopulationSpec,
    pub nodes: Vec<NodeSpec>,
    pub gpu_catalog: BTreeMap<String, GpuModel>,
    pub workers_per_gpu_override: Option<BTreeMap<String, u32>>,
    pub contention: ContentionModel,
    pub policy: Policy,
    pub protocol: ProtocolConfig,
    pub clients_per_round: usize,
    pub num_rounds: usize,
    /// When set, the last round shrinks so the experiment trains exactly
    /// this many clients in total.
    pub total_clients: Option<u64>,
    pub seed: u64,
    /// Model vector length used by the stand-in client updates.
    pub model_dim: usize,
    /// L2 bound on one client's perturbation of the global model.
    pub update_magnitude: f64,
    pub aggregation_mode: AggregationMode,
    /// Learning-based fits see only the last N rounds of records when set.
    pub fit_window: Option<usize>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("invalid engine parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("round {round}: placement plan does not cover the cohort")]
    PlanCohortMismatch { round: u64 },
    #[error("round {round}: client {client_id} missing from the population")]
    UnknownClient { round: u64, client_id: u64 },
    #[error("round {round}: plan references unknown worker {worker_id}")]
    UnknownWorker { round: u64, worker_id: u32 },
    #[error("protocol mode mismatch: this entry point requires {expected}")]
    ProtocolModeMismatch { expected: ProtocolMode },
    #[error("cluster allocates zero workers")]
    NoWorkers,
    #[error("round {round}: {source}")]
    InRound {
        round: u64,
        #[source]
        source: Box<EngineError>,
    },
}

impl EngineError {
    fn in_round(round: u64) -> impl FnOnce(EngineError) -> EngineError {
        move |source| EngineError::InRound {
            round,
            source: Box::new(source),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), EngineError> {
        let err = |field, reason: String| Err(EngineError::InvalidParameter { field, reason });
        if self.clients_per_round == 0 {
            return err("clients_per_round", "must be ≥ 1".into());
        }
        if self.num_rounds == 0 {
            return err("num_rounds", "must be ≥ 1".into());
        }
        if self.model_dim == 0 {
            return err("model_dim", "must be ≥ 1".into());
        }
        if !(self.update_magnitude.is_finite() && self.update_magnitude >= 0.0) {
            return err(
                "update_magnitude",
                format!("must be ≥ 0, got {}", self.update_magnitude),
            );
        }
        if self.total_clients == Some(0) {
            return err("total_clients", "must be ≥ 1 when set".into());
        }
        self.population.validate()?;
        self.protocol.validate()?;
        self.contention.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding; identifies a run's full
    /// configuration in manifests and reports.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The simulated local training step: optimization is out of scope, so a
/// client "trains" by nudging the global model with a seeded perturbation
/// unique to `(client_id, round)`. Each coordinate moves uniformly within
/// ±magnitude/√dim, bounding the whole update's L2 norm by `magnitude`.
/// Magnitude zero returns the global model bit-for-bit.
pub fn client_update(
    global: &ModelParams,
    client_id: u64,
    round_index: u64,
    magnitude: f64,
    master_seed: u64,
) -> ModelParams {
    if magnitude == 0.0 {
        return global.clone();
    }
    use rand::Rng;
    let mut rng = rng::substream(
        master_seed,
        rng::purpose::CLIENT_UPDATE,
        round_index,
        client_id,
    );
    let bound = magnitude / (global.dim() as f64).sqrt();
    let values = global
        .values()
        .iter()
        .map(|v| v + rng.random_range(-bound..=bound))
        .collect();
    ModelParams::new(values).expect("bounded perturbation keeps params finite")
}

/// Runs the full experiment: generate the population, allocate workers, then
/// loop sample → place → train → aggregate for every round. Deterministic in
/// `spec` — including across process runs — because every random draw comes
/// from a keyed substream of the master seed.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult, EngineError> {
    spec.validate()?;
    let population = generate_population(&spec.population)?;
    let workers = allocate_workers(
        &spec.nodes,
        &spec.gpu_catalog,
        spec.workers_per_gpu_override.as_ref(),
    )?;
    if workers.is_empty() {
        return Err(EngineError::NoWorkers);
    }

    // Workers sharing one physical GPU contend with each other; count them.
    let mut per_gpu: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for w in &workers {
        *per_gpu.entry((w.node_id, w.gpu_index)).or_default() += 1;
    }
    let runtimes: Vec<WorkerRuntime> = workers
        .iter()
        .map(|spec_w| WorkerRuntime {
            spec: spec_w,
            gpu: &spec.gpu_catalog[&spec_w.gpu_type],
            co_resident: per_gpu[&(spec_w.node_id, spec_w.gpu_index)],
        })
        .collect();
    let profiles: BTreeMap<u64, &crate::population::ClientProfile> =
        population.iter().map(|p| (p.client_id, p)).collect();

    let mut global_model = ModelParams::zeros(spec.model_dim);
    let mut records_by_type: BTreeMap<String, Vec<TrainingRecord>> = BTreeMap::new();
    let mut rounds = Vec::with_capacity(spec.num_rounds);
    let mut fits_per_round = Vec::new();
    let mut trained_total: u64 = 0;

    for round in 0..spec.num_rounds as u64 {
        let budget_left = spec
            .total_clients
            .map(|total| total.saturating_sub(trained_total))
            .unwrap_or(u64::MAX);
        if budget_left == 0 {
            break;
        }
        let cohort_size = (spec.clients_per_round as u64).min(budget_left) as usize;

        let mut cohort_rng = rng::substream(spec.seed, rng::purpose::COHORT, round, 0);
        let cohort = sample_cohort(&population, cohort_size, round, &mut cohort_rng)
            .map_err(EngineError::from)
            .map_err(EngineError::in_round(round))?;

        let ctx = RoundContext {
            workers: &runtimes,
            contention: &spec.contention,
            protocol: &spec.protocol,
            profiles: &profiles,
            global_model: &global_model,
            master_seed: spec.seed,
            update_magnitude: spec.update_magnitude,
            aggregation_mode: spec.aggregation_mode,
        };

        let outcome = match spec.protocol.mode {
            ProtocolMode::Push => {
                let plan = match spec.policy {
                    Policy::Rr => assign_round_robin(&cohort, &workers),
                    Policy::Srr => assign_sorted_round_robin(&cohort, &population, &workers),
                    Policy::Bu => assign_batch_uniform(&cohort, &population, &workers),
                    Policy::Lb => {
                        let fits = if round == 0 {
                            BTreeMap::new()
                        } else {
                            current_fits(&workers, &records_by_type, round, spec.fit_window)
                                .map_err(EngineError::in_round(round))?
                        };
                        if round > 0 {
                            fits_per_round.push(RoundFits {
                                round_index: round,
                                fits: fits.values().cloned().collect(),
                            });
                        }
                        assign_learning_based(&cohort, &population, &workers, &fits, round)
                    }
                }
                .map_err(EngineError::from)
                .map_err(EngineError::in_round(round))?;
                run_round_push(&cohort, &plan, &ctx).map_err(EngineError::in_round(round))?
            }
            // Pull mode has no placement step at all: the queue hands clients
            // to whichever worker idles first, so the policy field is unused.
            ProtocolMode::Pull => {
                run_round_pull(&cohort, &ctx).map_err(EngineError::in_round(round))?
            }
        };

        trained_total += outcome.metrics.clients_trained;
        global_model = final_aggregate(&outcome.partials)
            .map_err(EngineError::from)
            .map_err(EngineError::in_round(round))?;
        // Records feed the next round's fits, never the current one.
        for record in outcome.records {
            records_by_type
                .entry(record.gpu_type.clone())
                .or_default()
                .push(record);
        }
        rounds.push(outcome.metrics);
    }

    if let Some(total) = spec.total_clients {
        let expected = total.min(spec.num_rounds as u64 * spec.clients_per_round as u64);
        debug_assert_eq!(trained_total, expected, "work conservation");
    }

    let throughput: Vec<f64> = rounds.iter().map(|r| r.throughput).collect();
    let timedelta: Vec<f64> = rounds.iter().map(|r| r.timedelta_workers).collect();
    Ok(ExperimentResult {
        throughput_stats: MeanStd::from_values(&throughput),
        timedelta_stats: MeanStd::from_values(&timedelta),
        rounds,
        final_model: global_model,
        config_fingerprint: spec.fingerprint(),
        seed: spec.seed,
        fits_per_round,
    })
}

/// Fits the latency curve of every GPU type present among the workers from
/// the records gathered so far; types without enough data get the
/// batch-count proxy.
fn current_fits(
    workers: &[crate::cluster::WorkerSpec],
    records_by_type: &BTreeMap<String, Vec<TrainingRecord>>,
    round: u64,
    fit_window: Option<usize>,
) -> Result<BTreeMap<String, TimeModelFit>, EngineError> {
    let mut fits = BTreeMap::new();
    for worker in workers {
        if fits.contains_key(&worker.gpu_type) {
            continue;
        }
        let empty = Vec::new();
        let all = records_by_type.get(&worker.gpu_type).unwrap_or(&empty);
        let windowed: Vec<TrainingRecord> = match fit_window {
            Some(window) => {
                let oldest = round.saturating_sub(window as u64);
                all.iter()
                    .filter(|r| r.round_index >= oldest)
                    .cloned()
                    .collect()
            }
            None => all.clone(),
        };
        let fit = match fit_time_model(&windowed) {
            Ok(fit) => fit,
            Err(FitError::InsufficientData { got, .. }) => {
                TimeModelFit::batch_count_proxy(&worker.gpu_type, got)
            }
            Err(e) => return Err(e.into()),
        };
        fits.insert(worker.gpu_type.clone(), fit);
    }
    Ok(fits)
}
