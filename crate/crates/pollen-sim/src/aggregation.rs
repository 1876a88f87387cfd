//! Partial and final model aggregation.
//!
//! Workers keep a running sample-weighted average of the client models they
//! train (a partial aggregate), so the server only ever receives one model
//! and one sample count per worker. The server's final aggregation is then a
//! weighted mean of partials — mathematically identical to averaging all
//! client models directly, which the tests pin down to 1e-12 relative error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A model as a flat parameter vector. The simulator never trains a real
/// network; 64 coordinates (the default) are plenty to make aggregation
/// arithmetic observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    values: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("non-finite model coordinate at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: aggregate has {expected}, client has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("client sample count must be ≥ 1")]
    ZeroSamples,
    #[error("final aggregation needs at least one non-empty partial")]
    NoSamples,
}

impl ModelParams {
    pub fn new(values: Vec<f64>) -> Result<Self, AggregationError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AggregationError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Worker-local running weighted average plus the sample count behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialAggregate {
    params: ModelParams,
    total_samples: u64,
}

impl PartialAggregate {
    /// The empty aggregate: zero vector, zero samples. Folding the first
    /// client into it yields that client's params exactly.
    pub fn empty(dim: usize) -> Self {
        Self {
            params: ModelParams::zeros(dim),
            total_samples: 0,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn total_samples(&self) -> u64 {
        self.total_samples
    }

    pub fn is_empty(&self) -> bool {
        self.total_samples == 0
    }
}

/// Folds one trained client model into a partial aggregate:
///
/// ```text
/// θ' = (θ·N + θc·n) / (N + n),   N' = N + n
/// ```
///
/// The incremental form above is used verbatim; see
/// [`RunningSumAggregate`] for the numerically friendlier variant that the
/// tests cross-check against.
pub fn fold_client(
    agg: &PartialAggregate,
    client_params: &ModelParams,
    n: u64,
) -> Result<PartialAggregate, AggregationError> {
    if n < 1 {
        return Err(AggregationError::ZeroSamples);
    }
    if client_params.dim() != agg.params.dim() {
        return Err(AggregationError::DimensionMismatch {
            expected: agg.params.dim(),
            got: client_params.dim(),
        });
    }
    let big_n = agg.total_samples as f64;
    let small_n = n as f64;
    let values = agg
        .params
        .values
        .iter()
        .zip(&client_params.values)
        .map(|(theta, theta_c)| (theta * big_n + theta_c * small_n) / (big_n + small_n))
        .collect();
    Ok(PartialAggregate {
        params: ModelParams::new(values)?,
        total_samples: agg.total_samples + n,
    })
}

/// Server-side final step: the sample-weighted mean of all partials,
/// `Σ(θ_w·N_w) / Σ N_w`. Partials that never saw a client are skipped.
pub fn final_aggregate(partials: &[PartialAggregate]) -> Result<ModelParams, AggregationError> {
    let mut nonempty = partials.iter().filter(|p| !p.is_empty());
    let first = nonempty.next().ok_or(AggregationError::NoSamples)?;
    let dim = first.params.dim();
    let mut weighted = vec![0.0f64; dim];
    let mut total = 0u64;
    for p in std::iter::once(first).chain(nonempty) {
        if p.params.dim() != dim {
            return Err(AggregationError::DimensionMismatch {
                expected: dim,
                got: p.params.dim(),
            });
        }
        for (acc, v) in weighted.iter_mut().zip(&p.params.values) {
            *acc += v * p.total_samples as f64;
        }
        total += p.total_samples;
    }
    let inv = 1.0 / total as f64;
    ModelParams::new(weighted.into_iter().map(|w| w * inv).collect())
}

/// Alternative accumulator keeping `Σ θc·n` and dividing once at the end,
/// instead of renormalizing on every fold. Selected by the engine's
/// aggregation-mode flag; results agree with [`fold_client`] to within
/// floating-point noise.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningSumAggregate {
    weighted_sum: Vec<f64>,
    total_samples: u64,
}

impl RunningSumAggregate {
    pub fn empty(dim: usize) -> Self {
        Self {
            weighted_sum: vec![0.0; dim],
            total_samples: 0,
        }
    }

    pub fn fold(&mut self, client_params: &ModelParams, n: u64) -> Result<(), AggregationError> {
        if n < 1 {
            return Err(AggregationError::ZeroSamples);
        }
        if client_params.dim() != self.weighted_sum.len() {
            return Err(AggregationError::DimensionMismatch {
                expected: self.weighted_sum.len(),
                got: client_params.dim(),
            });
        }
        for (acc, v) in self.weighted_sum.iter_mut().zip(&client_params.values) {
            *acc += v * n as f64;
        }
        self.total_samples += n;
        Ok(())
    }

    /// Collapses the sums into a [`PartialAggregate`] so both accumulator
    /// forms feed the same final aggregation path.
    pub fn finish(&self) -> Result<PartialAggregate, AggregationError> {
        if self.total_samples == 0 {
            return Ok(PartialAggregate::empty(self.weighted_sum.len()));
        }
        let inv = 1.0 / self.total_samples as f64;
        Ok(PartialAggregate {
            params: ModelParams::new(self.weighted_sum.iter().map(|w| w * inv).collect())?,
            total_samples: self.total_samples,
        })
    }
}
