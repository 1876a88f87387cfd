//! Heterogeneous GPU hardware models and worker allocation.
//!
//! A [`GpuModel`] is the simulator's hidden ground truth: a latency curve of
//! the form `a·m + b·log(c·m) + d` over a client's batch count `m`, plus
//! multiplicative noise and an oversubscription (contention) penalty. The
//! allocator turns node descriptions into a dense, deterministic list of
//! workers, each pinned to one physical GPU.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ground-truth latency curve and capacity for one GPU type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuModel {
    pub gpu_type: String,
    /// Seconds per batch (the linear term's slope, ≥ 0).
    pub latency_linear: f64,
    /// Seconds scaling the logarithmic startup term (≥ 0).
    pub latency_log_coeff: f64,
    /// Dimensionless scale inside the log (> 0).
    pub latency_log_scale: f64,
    /// Constant seconds offset; may be negative as long as the whole curve
    /// stays positive.
    pub latency_offset: f64,
    /// Relative noise std for clients below `small_client_threshold` batches.
    pub noise_sigma_small: f64,
    /// Relative noise std for everything else.
    pub noise_sigma_large: f64,
    pub small_client_threshold: u64,
    /// How many workers this GPU can host at once.
    pub max_workers: u32,
}

/// One machine: its physical GPUs (type, count) and CPU cores. Cores are
/// recorded for completeness but do not affect simulated time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_id: u32,
    pub gpus: Vec<(String, u32)>,
    pub cpu_cores: u32,
}

/// A worker: one sequential training slot pinned to a physical GPU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerSpec {
    pub worker_id: u32,
    pub node_id: u32,
    pub gpu_type: String,
    /// Index of the physical GPU within its node.
    pub gpu_index: u32,
}

/// Linear slowdown applied per co-resident worker beyond the first. The real
/// effect is an empirical distribution shift; a linear mean penalty is the
/// simplest monotone stand-in and is fully configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentionModel {
    pub slowdown_per_extra_worker: f64,
}

impl Default for ContentionModel {
    fn default() -> Self {
        Self {
            slowdown_per_extra_worker: 0.1,
        }
    }
}

impl ContentionModel {
    /// Multiplier applied to expected time when `co_resident` workers share
    /// one GPU.
    pub fn factor(&self, co_resident: u32) -> f64 {
        debug_assert!(co_resident >= 1);
        1.0 + self.slowdown_per_extra_worker * (co_resident.saturating_sub(1)) as f64
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if !(self.slowdown_per_extra_worker.is_finite() && self.slowdown_per_extra_worker >= 0.0) {
            return Err(ClusterError::InvalidParameter {
                field: "contention.slowdown_per_extra_worker",
                reason: format!("must be ≥ 0, got {}", self.slowdown_per_extra_worker),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid cluster parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("gpu type `{0}` not present in the catalog")]
    UnknownGpuType(String),
    #[error("workers-per-gpu override {requested} exceeds `{gpu_type}` capacity {capacity}")]
    OverrideExceedsCapacity {
        gpu_type: String,
        requested: u32,
        capacity: u32,
    },
    #[error("batch count must be ≥ 1, got {0}")]
    BatchCountDomain(f64),
}

/// Batch-count range over which curve positivity is verified at construction.
const POSITIVITY_SCAN_MAX: u64 = 1_000_000;

impl GpuModel {
    /// Validates parameter domains and scans the expected-time curve for
    /// positivity over the supported batch-count range.
    pub fn validate(&self) -> Result<(), ClusterError> {
        let err = |field, reason: String| Err(ClusterError::InvalidParameter { field, reason });
        for (field, v) in [
            ("latency_linear", self.latency_linear),
            ("latency_log_coeff", self.latency_log_coeff),
            ("noise_sigma_small", self.noise_sigma_small),
            ("noise_sigma_large", self.noise_sigma_large),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(field, format!("must be ≥ 0, got {v}"));
            }
        }
        if !(self.latency_log_scale.is_finite() && self.latency_log_scale > 0.0) {
            return err(
                "latency_log_scale",
                format!("must be > 0, got {}", self.latency_log_scale),
            );
        }
        if !self.latency_offset.is_finite() {
            return err(
                "latency_offset",
                format!("must be finite, got {}", self.latency_offset),
            );
        }
        if self.max_workers == 0 {
            return err("max_workers", "must be ≥ 1".into());
        }
        // With a, b ≥ 0 the curve is nondecreasing in m, but scan anyway: it
        // is cheap, runs once, and keeps the invariant independent of the
        // monotonicity argument.
        for m in 1..=POSITIVITY_SCAN_MAX {
            if self.expected_time(m as f64) <= 0.0 {
                return err(
                    "latency_offset",
                    format!("expected time is non-positive at m={m}"),
                );
            }
        }
        Ok(())
    }

    /// Noise-free expected training time in seconds for `m` batches on an
    /// otherwise idle GPU.
    pub fn expected_time(&self, m: f64) -> f64 {
        debug_assert!(m >= 1.0, "batch count below domain: {m}");
        self.latency_linear * m
            + self.latency_log_coeff * (self.latency_log_scale * m).ln()
            + self.latency_offset
    }
}

/// Built-in GPU models. The "a40-like" curve dominates (is faster than) the
/// "rtx2080ti-like" curve at every batch count, and their worker capacities
/// reflect the VRAM gap between the cards they imitate. Constants were
/// hand-calibrated so a mixed cluster shows a clear fast/slow split without
/// dwarfing communication latencies.
pub fn gpu_preset(name: &str) -> Option<GpuModel> {
    let (a, b, d, max_workers) = match name {
        "a40-like" => (0.040, 0.20, 0.50, 13),
        "rtx2080ti-like" => (0.100, 0.50, 1.00, 4),
        _ => return None,
    };
    Some(GpuModel {
        gpu_type: name.to_string(),
        latency_linear: a,
        latency_log_coeff: b,
        latency_log_scale: 1.0,
        latency_offset: d,
        noise_sigma_small: 0.25,
        noise_sigma_large: 0.05,
        small_client_threshold: 10,
        max_workers,
    })
}

/// Names accepted by [`gpu_preset`].
pub const GPU_PRESET_NAMES: [&str; 2] = ["a40-like", "rtx2080ti-like"];

/// Expands nodes into workers: each physical GPU gets
/// `min(max_workers, override)` workers. Ordering is deterministic — nodes in
/// input order, GPUs within a node in listed order, then slot — and ids are
/// dense from 0.
pub fn allocate_workers(
    nodes: &[NodeSpec],
    gpu_catalog: &BTreeMap<String, GpuModel>,
    workers_per_gpu_override: Option<&BTreeMap<String, u32>>,
) -> Result<Vec<WorkerSpec>, ClusterError> {
    for (gpu_type, model) in gpu_catalog {
        model.validate()?;
        if let Some(n) = workers_per_gpu_override.and_then(|o| o.get(gpu_type)) {
            if *n > model.max_workers {
                return Err(ClusterError::OverrideExceedsCapacity {
                    gpu_type: gpu_type.clone(),
                    requested: *n,
                    capacity: model.max_workers,
                });
            }
            if *n == 0 {
                return Err(ClusterError::InvalidParameter {
                    field: "workers_per_gpu",
                    reason: format!("override for `{gpu_type}` must be ≥ 1"),
                });
            }
        }
    }
    let mut workers = Vec::new();
    let mut next_id = 0u32;
    for node in nodes {
        if node.cpu_cores == 0 {
            return Err(ClusterError::InvalidParameter {
                field: "cpu_cores",
                reason: format!("node {} must have ≥ 1 core", node.node_id),
            });
        }
        let mut gpu_index = 0u32;
        for (gpu_type, count) in &node.gpus {
            if *count == 0 {
                return Err(ClusterError::InvalidParameter {
                    field: "gpus",
                    reason: format!("node {} lists zero `{gpu_type}` gpus", node.node_id),
                });
            }
            let model = gpu_catalog
                .get(gpu_type)
                .ok_or_else(|| ClusterError::UnknownGpuType(gpu_type.clone()))?;
            let per_gpu = workers_per_gpu_override
                .and_then(|o| o.get(gpu_type).copied())
                .unwrap_or(model.max_workers)
                .min(model.max_workers);
            for _ in 0..*count {
                for _slot in 0..per_gpu {
                    workers.push(WorkerSpec {
                        worker_id: next_id,
                        node_id: node.node_id,
                        gpu_type: gpu_type.clone(),
                        gpu_index,
                    });
                    next_id += 1;
                }
                gpu_index += 1;
            }
        }
    }
    Ok(workers)
}

/// Attempts at redrawing noise that would make a time non-positive, before
/// falling back to the noiseless mean.
const MAX_NOISE_REDRAWS: u32 = 64;

/// Draws one noisy training time: `expected · contention · (1 + ε)` with
/// `ε ~ Normal(0, σ)` truncated so the result stays positive. Small clients
/// (below the model's threshold) use the wider σ — startup effects dominate
/// short runs.
pub fn sample_training_time(
    gpu: &GpuModel,
    m: u64,
    co_resident_workers: u32,
    contention: &ContentionModel,
    rng: &mut impl Rng,
) -> Result<f64, ClusterError> {
    if m < 1 {
        return Err(ClusterError::BatchCountDomain(m as f64));
    }
    let sigma = if m < gpu.small_client_threshold {
        gpu.noise_sigma_small
    } else {
        gpu.noise_sigma_large
    };
    let mean = gpu.expected_time(m as f64) * contention.factor(co_resident_workers);
    if sigma == 0.0 {
        return Ok(mean);
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma ≥ 0");
    let mut eps = normal.sample(rng);
    let mut redraws = 0;
    while 1.0 + eps <= 0.0 && redraws < MAX_NOISE_REDRAWS {
        eps = normal.sample(rng);
        redraws += 1;
    }
    if 1.0 + eps <= 0.0 {
        eps = 0.0;
    }
    Ok(mean * (1.0 + eps))
}
