//! Single-round execution under the push and pull protocols.
//!
//! Both protocols consume the same per-(round, client) training-time and
//! model-update random streams, so for a fixed seed a client costs exactly
//! the same seconds no matter which protocol, policy, or worker runs it.
//! Protocol and placement differences are therefore the *only* source of
//! metric differences between configurations sharing a seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use crate::aggregation::{fold_client, ModelParams, PartialAggregate, RunningSumAggregate};
use crate::cluster::{sample_training_time, ContentionModel, GpuModel, WorkerSpec};
use crate::placement::{PlacementPlan, TrainingRecord};
use crate::population::{ClientProfile, Cohort};
use crate::rng;

use super::metrics::RoundMetrics;
use super::{client_update, AggregationMode, EngineError, ProtocolConfig, ProtocolMode};

/// One worker as the round loop sees it: its spec, its GPU's ground truth,
/// and how many workers share that physical GPU.
#[derive(Debug, Clone)]
pub struct WorkerRuntime<'a> {
    pub spec: &'a WorkerSpec,
    pub gpu: &'a GpuModel,
    pub co_resident: u32,
}

/// Everything a round needs besides the cohort: workers, model ground truth,
/// protocol timings, and the experiment-wide constants.
pub struct RoundContext<'a> {
    pub workers: &'a [WorkerRuntime<'a>],
    pub contention: &'a ContentionModel,
    pub protocol: &'a ProtocolConfig,
    pub profiles: &'a BTreeMap<u64, &'a ClientProfile>,
    pub global_model: &'a ModelParams,
    pub master_seed: u64,
    pub update_magnitude: f64,
    pub aggregation_mode: AggregationMode,
}

/// What a round hands back to the experiment loop.
#[derive(Debug)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub records: Vec<TrainingRecord>,
    pub partials: Vec<PartialAggregate>,
}

/// Worker-local accumulator covering both aggregation modes.
enum WorkerAggregate {
    Incremental(PartialAggregate),
    RunningSum(RunningSumAggregate),
}

impl WorkerAggregate {
    fn new(mode: AggregationMode, dim: usize) -> Self {
        match mode {
            AggregationMode::Incremental => Self::Incremental(PartialAggregate::empty(dim)),
            AggregationMode::RunningSum => Self::RunningSum(RunningSumAggregate::empty(dim)),
        }
    }

    fn fold(
        &mut self,
        params: &ModelParams,
        n: u64,
    ) -> Result<(), crate::aggregation::AggregationError> {
        match self {
            Self::Incremental(agg) => {
                *agg = fold_client(agg, params, n)?;
                Ok(())
            }
            Self::RunningSum(agg) => agg.fold(params, n),
        }
    }

    fn finish(self) -> Result<PartialAggregate, crate::aggregation::AggregationError> {
        match self {
            Self::Incremental(agg) => Ok(agg),
            Self::RunningSum(agg) => agg.finish(),
        }
    }
}

fn profile_of<'a>(
    ctx: &RoundContext<'a>,
    round: u64,
    client_id: u64,
) -> Result<&'a ClientProfile, EngineError> {
    ctx.profiles
        .get(&client_id)
        .copied()
        .ok_or(EngineError::UnknownClient { round, client_id })
}

/// Trains one client on one worker: samples its wall-clock seconds and folds
/// its perturbed model into the worker's aggregate. Returns the seconds.
fn train_client(
    ctx: &RoundContext<'_>,
    round: u64,
    worker: &WorkerRuntime<'_>,
    client_id: u64,
    aggregate: &mut WorkerAggregate,
    records: &mut Vec<TrainingRecord>,
) -> Result<f64, EngineError> {
    let profile = profile_of(ctx, round, client_id)?;
    // Training time is keyed by (round, client) alone: a client's cost never
    // depends on where it lands, keeping policy comparisons apples-to-apples
    // and degenerate placements exactly equal across policies.
    let mut noise_rng = rng::substream(
        ctx.master_seed,
        rng::purpose::TRAINING_NOISE,
        round,
        client_id,
    );
    let seconds = sample_training_time(
        worker.gpu,
        profile.num_batches,
        worker.co_resident,
        ctx.contention,
        &mut noise_rng,
    )?;
    let update = client_update(
        ctx.global_model,
        client_id,
        round,
        ctx.update_magnitude,
        ctx.master_seed,
    );
    aggregate.fold(&update, profile.num_samples)?;
    records.push(TrainingRecord {
        client_id,
        m: profile.num_batches,
        observed_time: seconds,
        gpu_type: worker.spec.gpu_type.clone(),
        round_index: round,
    });
    Ok(seconds)
}

/// Push protocol: the server sends each non-empty worker its full client
/// list in one message; the worker trains sequentially, folds, and answers
/// with one result message. Two messages per active worker, total.
pub fn run_round_push(
    cohort: &Cohort,
    plan: &PlacementPlan,
    ctx: &RoundContext<'_>,
) -> Result<RoundOutcome, EngineError> {
    if ctx.protocol.mode != ProtocolMode::Push {
        return Err(EngineError::ProtocolModeMismatch {
            expected: ProtocolMode::Push,
        });
    }
    let round = cohort.round_index;
    if !plan.conserves(cohort) {
        return Err(EngineError::PlanCohortMismatch { round });
    }
    let by_id: BTreeMap<u32, &WorkerRuntime> =
        ctx.workers.iter().map(|w| (w.spec.worker_id, w)).collect();

    let mut finishes = BTreeMap::new();
    let mut records = Vec::with_capacity(cohort.client_ids.len());
    let mut partials = Vec::new();
    let dim = ctx.global_model.dim();

    for (worker_id, clients) in &plan.assignments {
        if clients.is_empty() {
            continue;
        }
        let worker = by_id.get(worker_id).ok_or(EngineError::UnknownWorker {
            round,
            worker_id: *worker_id,
        })?;
        let mut aggregate = WorkerAggregate::new(ctx.aggregation_mode, dim);
        // The allocation message lands first, then clients run back to back,
        // then the partial result goes out.
        let mut finish = ctx.protocol.per_message_latency;
        for &client_id in clients {
            finish += train_client(ctx, round, worker, client_id, &mut aggregate, &mut records)?;
        }
        finish += ctx.protocol.result_payload_latency;
        finishes.insert(*worker_id, finish);
        partials.push(aggregate.finish()?);
    }

    let messages_sent = 2 * finishes.len() as u64;
    let metrics = RoundMetrics::from_finishes(
        round,
        finishes,
        ctx.protocol.final_aggregation_time,
        messages_sent,
        cohort.client_ids.len() as u64,
    );
    Ok(RoundOutcome {
        metrics,
        records,
        partials,
    })
}

/// Min-heap entry ordered by availability time, ties to the lowest worker id.
struct IdleWorker {
    available_at: f64,
    worker_index: usize,
    worker_id: u32,
}

impl PartialEq for IdleWorker {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for IdleWorker {}
impl PartialOrd for IdleWorker {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for IdleWorker {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the earliest time out.
        other
            .available_at
            .total_cmp(&self.available_at)
            .then(other.worker_id.cmp(&self.worker_id))
    }
}

/// Pull protocol: clients wait in one shared FIFO queue and idle workers
/// repeatedly take the head. Each client costs four messages on the wire —
/// queue read, worker ping, server reply, result — so communication scales
/// with clients, not workers.
pub fn run_round_pull(
    cohort: &Cohort,
    ctx: &RoundContext<'_>,
) -> Result<RoundOutcome, EngineError> {
    if ctx.protocol.mode != ProtocolMode::Pull {
        return Err(EngineError::ProtocolModeMismatch {
            expected: ProtocolMode::Pull,
        });
    }
    let round = cohort.round_index;
    let dim = ctx.global_model.dim();
    let mut queue: VecDeque<u64> = cohort.client_ids.iter().copied().collect();

    let mut idle: BinaryHeap<IdleWorker> = ctx
        .workers
        .iter()
        .enumerate()
        .map(|(worker_index, w)| IdleWorker {
            available_at: 0.0,
            worker_index,
            worker_id: w.spec.worker_id,
        })
        .collect();
    if idle.is_empty() {
        return Err(EngineError::NoWorkers);
    }

    let mut aggregates: BTreeMap<u32, WorkerAggregate> = BTreeMap::new();
    let mut finishes: BTreeMap<u32, f64> = BTreeMap::new();
    let mut records = Vec::with_capacity(queue.len());
    let mut virtual_time = 0.0f64;

    while let Some(client_id) = queue.pop_front() {
        let next = idle.pop().expect("worker heap never empties");
        // Event order sanity: dequeues happen at nondecreasing virtual times.
        assert!(
            next.available_at >= virtual_time,
            "virtual time went backwards"
        );
        virtual_time = next.available_at;

        let worker = &ctx.workers[next.worker_index];
        let aggregate = aggregates
            .entry(next.worker_id)
            .or_insert_with(|| WorkerAggregate::new(ctx.aggregation_mode, dim));
        let seconds = train_client(ctx, round, worker, client_id, aggregate, &mut records)?;
        // Queue read + ping + server reply at flat message latency, plus the
        // result payload.
        let done = virtual_time
            + 3.0 * ctx.protocol.per_message_latency
            + seconds
            + ctx.protocol.result_payload_latency;
        finishes.insert(next.worker_id, done);
        idle.push(IdleWorker {
            available_at: done,
            ..next
        });
    }

    let messages_sent = 4 * cohort.client_ids.len() as u64;
    let mut partials = Vec::with_capacity(aggregates.len());
    for (_, aggregate) in aggregates {
        partials.push(aggregate.finish()?);
    }
    let metrics = RoundMetrics::from_finishes(
        round,
        finishes,
        ctx.protocol.final_aggregation_time,
        messages_sent,
        cohort.client_ids.len() as u64,
    );
    Ok(RoundOutcome {
        metrics,
        records,
        partials,
    })
}
