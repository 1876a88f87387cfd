//! Per-round and per-experiment result types.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::ModelParams;
use crate::placement::TimeModelFit;

/// Everything measured about one round. Construct via [`RoundMetrics::from_finishes`]
/// so the derived fields and their internal relations are enforced in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round_index: u64,
    /// Seconds from round start until the final aggregate is ready.
    pub round_duration: f64,
    /// clients_trained / round_duration.
    pub throughput: f64,
    /// Finish-time gap between the slowest and fastest *active* worker: the
    /// straggler metric, a proxy for time wasted by bad placement.
    pub timedelta_workers: f64,
    /// Finish times of workers that trained at least one client.
    pub per_worker_finish: BTreeMap<u32, f64>,
    pub messages_sent: u64,
    pub clients_trained: u64,
}

impl RoundMetrics {
    /// Derives duration, throughput, and timedelta from per-worker finish
    /// times. `per_worker_finish` must hold only workers that trained ≥ 1
    /// client, and at least one of them.
    pub fn from_finishes(
        round_index: u64,
        per_worker_finish: BTreeMap<u32, f64>,
        final_aggregation_time: f64,
        messages_sent: u64,
        clients_trained: u64,
    ) -> Self {
        assert!(
            !per_worker_finish.is_empty(),
            "round {round_index} finished no worker"
        );
        assert!(clients_trained >= 1);
        let mut fastest = f64::INFINITY;
        let mut slowest = f64::NEG_INFINITY;
        for (&worker_id, &finish) in &per_worker_finish {
            assert!(
                finish.is_finite() && finish >= 0.0,
                "worker {worker_id} finish {finish} out of range"
            );
            fastest = fastest.min(finish);
            slowest = slowest.max(finish);
        }
        let round_duration = slowest + final_aggregation_time;
        assert!(round_duration >= slowest);
        let metrics = Self {
            round_index,
            round_duration,
            throughput: clients_trained as f64 / round_duration,
            timedelta_workers: slowest - fastest,
            per_worker_finish,
            messages_sent,
            clients_trained,
        };
        debug_assert!(metrics.timedelta_workers >= 0.0);
        metrics
    }
}

/// Mean and sample standard deviation of a metric series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: 0.0,
                std: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// The learning-based policy's fitted curves as of one round, kept for
/// diagnosis (did the fits converge? how fast did mse fall?).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundFits {
    pub round_index: u64,
    pub fits: Vec<TimeModelFit>,
}

/// Output of a full experiment: the round series, its summary statistics,
/// and enough provenance (seed, config fingerprint) to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rounds: Vec<RoundMetrics>,
    pub throughput_stats: MeanStd,
    pub timedelta_stats: MeanStd,
    pub final_model: ModelParams,
    /// SHA-256 over the canonical serialized experiment spec.
    pub config_fingerprint: String,
    pub seed: u64,
    /// Non-empty only for learning-based push runs.
    pub fits_per_round: Vec<RoundFits>,
}
