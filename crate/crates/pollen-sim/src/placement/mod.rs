//! Client-placement policies.
//!
//! Given a cohort and the allocated workers, a policy returns an ordered
//! client list per worker. Policies are pure functions; the engine executes
//! whatever plan they return. Four are provided, from naive to informed:
//!
//! * `rr` — round-robin in cohort order.
//! * `srr` — round-robin after sorting clients by batch count, largest first.
//! * `bu` — greedy balancing of per-worker batch-count totals.
//! * `lb` — greedy balancing of *predicted training time* per worker, using
//!   per-GPU-type curve fits learned from earlier rounds (see [`fit`]).
//!
//! All tie-breaks are fixed (ascending client id, lowest worker id or
//! fastest-worker position) so every policy is deterministic.

pub mod fit;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::WorkerSpec;
use crate::population::{ClientProfile, Cohort};
pub use fit::{fit_time_model, predict_time, FitError, TimeModelFit};

/// Per-worker ordered client lists for one round. Every allocated worker
/// appears as a key, possibly with an empty list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementPlan {
    pub round_index: u64,
    pub assignments: BTreeMap<u32, Vec<u64>>,
}

impl PlacementPlan {
    /// True when the plan's client multiset is exactly the cohort — nothing
    /// lost, nothing duplicated.
    pub fn conserves(&self, cohort: &Cohort) -> bool {
        let mut planned: Vec<u64> = self.assignments.values().flatten().copied().collect();
        let mut expected = cohort.client_ids.clone();
        planned.sort_unstable();
        expected.sort_unstable();
        planned == expected
    }
}

/// One observed client training: the fitter's raw material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub client_id: u64,
    /// Batch count of the trained client.
    pub m: u64,
    /// Wall-clock seconds the training took (noise and contention included).
    pub observed_time: f64,
    pub gpu_type: String,
    pub round_index: u64,
}

/// Policy selector as it appears in configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Rr,
    Srr,
    Bu,
    Lb,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Rr, Policy::Srr, Policy::Bu, Policy::Lb];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Rr => "rr",
            Policy::Srr => "srr",
            Policy::Bu => "bu",
            Policy::Lb => "lb",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = PlacementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rr" => Ok(Policy::Rr),
            "srr" => Ok(Policy::Srr),
            "bu" => Ok(Policy::Bu),
            "lb" => Ok(Policy::Lb),
            other => Err(PlacementError::UnknownPolicy(other.to_string())),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("placement requires at least one worker")]
    EmptyWorkerSet,
    #[error("cohort client {0} has no profile")]
    MissingProfile(u64),
    #[error("no time-model fit for gpu type `{0}`")]
    MissingFit(String),
    #[error("unknown policy `{0}` (expected rr, srr, bu, or lb)")]
    UnknownPolicy(String),
}

/// Workers in ascending id order — the canonical order every policy indexes
/// and tie-breaks against, independent of how the caller arranged the slice.
fn by_worker_id(workers: &[WorkerSpec]) -> Result<Vec<&WorkerSpec>, PlacementError> {
    if workers.is_empty() {
        return Err(PlacementError::EmptyWorkerSet);
    }
    let mut sorted: Vec<&WorkerSpec> = workers.iter().collect();
    sorted.sort_by_key(|w| w.worker_id);
    Ok(sorted)
}

fn empty_plan(round_index: u64, workers: &[&WorkerSpec]) -> PlacementPlan {
    PlacementPlan {
        round_index,
        assignments: workers.iter().map(|w| (w.worker_id, Vec::new())).collect(),
    }
}

/// Cohort ids paired with batch counts, sorted by m descending with ties by
/// ascending client id — the shared preamble of srr, bu, and lb.
fn sorted_by_batches(
    cohort: &Cohort,
    profiles: &[ClientProfile],
) -> Result<Vec<(u64, u64)>, PlacementError> {
    let by_id: BTreeMap<u64, u64> = profiles
        .iter()
        .map(|p| (p.client_id, p.num_batches))
        .collect();
    let mut out = Vec::with_capacity(cohort.client_ids.len());
    for &id in &cohort.client_ids {
        let m = *by_id.get(&id).ok_or(PlacementError::MissingProfile(id))?;
        out.push((id, m));
    }
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

fn round_robin_of(
    ids: impl Iterator<Item = u64>,
    round_index: u64,
    workers: &[&WorkerSpec],
) -> PlacementPlan {
    let mut plan = empty_plan(round_index, workers);
    for (i, id) in ids.enumerate() {
        let worker = workers[i % workers.len()];
        plan.assignments
            .get_mut(&worker.worker_id)
            .unwrap()
            .push(id);
    }
    plan
}

/// Round-robin: client i (in cohort order) goes to worker i mod k, so any
/// remainder lands on the first workers and list sizes differ by at most one.
pub fn assign_round_robin(
    cohort: &Cohort,
    workers: &[WorkerSpec],
) -> Result<PlacementPlan, PlacementError> {
    let workers = by_worker_id(workers)?;
    Ok(round_robin_of(
        cohort.client_ids.iter().copied(),
        cohort.round_index,
        &workers,
    ))
}

/// Sorted round-robin: round-robin over the cohort ordered by batch count,
/// largest first. Workers then hold similar batch totals as long as sizes
/// don't vary too wildly.
pub fn assign_sorted_round_robin(
    cohort: &Cohort,
    profiles: &[ClientProfile],
    workers: &[WorkerSpec],
) -> Result<PlacementPlan, PlacementError> {
    let workers = by_worker_id(workers)?;
    let sorted = sorted_by_batches(cohort, profiles)?;
    Ok(round_robin_of(
        sorted.into_iter().map(|(id, _)| id),
        cohort.round_index,
        &workers,
    ))
}

/// Batch-uniform: clients sorted by batch count descending; the first k seed
/// one worker each (as srr would), every later client goes to the worker
/// with the smallest batch-count load, ties to the lowest worker id. The
/// classic greedy longest-processing-time scheme with m as the cost proxy.
pub fn assign_batch_uniform(
    cohort: &Cohort,
    profiles: &[ClientProfile],
    workers: &[WorkerSpec],
) -> Result<PlacementPlan, PlacementError> {
    let workers = by_worker_id(workers)?;
    let sorted = sorted_by_batches(cohort, profiles)?;
    let mut plan = empty_plan(cohort.round_index, &workers);
    let mut loads = vec![0u64; workers.len()];
    for (j, (id, m)) in sorted.into_iter().enumerate() {
        let slot = if j < workers.len() {
            j
        } else {
            // Strict < keeps the first (lowest-id) minimum on ties.
            let mut best = 0;
            for (w, &load) in loads.iter().enumerate() {
                if load < loads[best] {
                    best = w;
                }
            }
            best
        };
        plan.assignments
            .get_mut(&workers[slot].worker_id)
            .unwrap()
            .push(id);
        loads[slot] += m;
    }
    Ok(plan)
}

/// Learning-based: like batch-uniform, but the load being balanced is the
/// *predicted time* from each GPU type's fitted latency curve, so fast
/// workers absorb more work. Round 0 has no observations yet and falls back
/// to plain round-robin.
///
/// Workers are ranked fastest-first by the predicted time of the cohort's
/// largest client; load ties go to the earliest worker in that ranking.
pub fn assign_learning_based(
    cohort: &Cohort,
    profiles: &[ClientProfile],
    workers: &[WorkerSpec],
    fits: &BTreeMap<String, TimeModelFit>,
    round_index: u64,
) -> Result<PlacementPlan, PlacementError> {
    if round_index == 0 {
        return assign_round_robin(cohort, workers);
    }
    let id_sorted = by_worker_id(workers)?;
    let sorted = sorted_by_batches(cohort, profiles)?;
    for w in &id_sorted {
        if !fits.contains_key(&w.gpu_type) {
            return Err(PlacementError::MissingFit(w.gpu_type.clone()));
        }
    }
    let mut plan = empty_plan(cohort.round_index, &id_sorted);
    if sorted.is_empty() {
        return Ok(plan);
    }

    let biggest_m = sorted[0].1 as f64;
    // Stable sort on predicted time of the biggest client: equal predictions
    // keep ascending-id order.
    let mut ranked: Vec<&WorkerSpec> = id_sorted.clone();
    ranked.sort_by(|x, y| {
        let tx = predict_time(&fits[&x.gpu_type], biggest_m);
        let ty = predict_time(&fits[&y.gpu_type], biggest_m);
        tx.total_cmp(&ty)
    });

    let mut loads = vec![0.0f64; ranked.len()];
    for (id, m) in sorted {
        let mut best = 0;
        for (pos, &load) in loads.iter().enumerate() {
            if load < loads[best] {
                best = pos;
            }
        }
        let worker = ranked[best];
        plan.assignments
            .get_mut(&worker.worker_id)
            .unwrap()
            .push(id);
        loads[best] += predict_time(&fits[&worker.gpu_type], m as f64);
        debug_assert!(loads[best].is_finite());
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::Cohort;

    fn workers(k: u32) -> Vec<WorkerSpec> {
        (0..k)
            .map(|worker_id| WorkerSpec {
                worker_id,
                node_id: 0,
                gpu_type: "test".into(),
                gpu_index: worker_id,
            })
            .collect()
    }

    fn profiles(batches: &[u64]) -> Vec<ClientProfile> {
        batches
            .iter()
            .enumerate()
            .map(|(i, &m)| ClientProfile {
                client_id: i as u64,
                num_samples: m * 10,
                num_batches: m,
            })
            .collect()
    }

    fn cohort(ids: &[u64]) -> Cohort {
        Cohort {
            round_index: 0,
            client_ids: ids.to_vec(),
        }
    }

    fn lists(plan: &PlacementPlan) -> Vec<Vec<u64>> {
        plan.assignments.values().cloned().collect()
    }

    /// A fit predicting exactly `a·m`, for exercising the greedy policy with
    /// known predictors.
    fn linear_fit(gpu_type: &str, a: f64) -> TimeModelFit {
        TimeModelFit {
            gpu_type: gpu_type.to_string(),
            a,
            b: 0.0,
            c: 1.0,
            d: 0.0,
            mse: 0.0,
            num_points: 4,
        }
    }

    #[test]
    fn round_robin_interleaves_in_cohort_order() {
        let plan = assign_round_robin(&cohort(&[0, 1, 2, 3]), &workers(2)).unwrap();
        assert_eq!(lists(&plan), vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn round_robin_remainder_lands_on_first_workers() {
        let plan = assign_round_robin(&cohort(&[0, 1, 2, 3, 4]), &workers(2)).unwrap();
        assert_eq!(lists(&plan), vec![vec![0, 2, 4], vec![1, 3]]);
    }

    #[test]
    fn round_robin_with_n_equal_k_is_one_each() {
        let plan = assign_round_robin(&cohort(&[3, 1, 2]), &workers(3)).unwrap();
        assert_eq!(lists(&plan), vec![vec![3], vec![1], vec![2]]);
    }

    #[test]
    fn empty_worker_set_is_rejected() {
        assert!(matches!(
            assign_round_robin(&cohort(&[0]), &[]),
            Err(PlacementError::EmptyWorkerSet)
        ));
    }

    #[test]
    fn sorted_round_robin_orders_by_batches_then_interleaves() {
        // batches: c0=5, c1=3, c2=2, c3=1
        let profiles = profiles(&[5, 3, 2, 1]);
        let plan =
            assign_sorted_round_robin(&cohort(&[3, 2, 1, 0]), &profiles, &workers(2)).unwrap();
        assert_eq!(lists(&plan), vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn sorted_round_robin_breaks_ties_by_client_id() {
        let profiles = profiles(&[2, 2, 2, 2]);
        let plan =
            assign_sorted_round_robin(&cohort(&[2, 0, 3, 1]), &profiles, &workers(2)).unwrap();
        assert_eq!(lists(&plan), vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn sorted_round_robin_single_worker_is_the_sorted_list() {
        let profiles = profiles(&[1, 4, 2]);
        let plan = assign_sorted_round_robin(&cohort(&[0, 1, 2]), &profiles, &workers(1)).unwrap();
        assert_eq!(lists(&plan), vec![vec![1, 2, 0]]);
    }

    #[test]
    fn missing_profile_is_reported_with_the_client_id() {
        let profiles = profiles(&[1]);
        assert!(matches!(
            assign_sorted_round_robin(&cohort(&[0, 9]), &profiles, &workers(2)),
            Err(PlacementError::MissingProfile(9))
        ));
    }

    #[test]
    fn batch_uniform_balances_loads_greedily() {
        // Hand trace: sorted [5,3,2,1]; 5→w0, 3→w1, 2→w1 (3<5), 1→w0 (5=5 tie).
        let profiles = profiles(&[5, 3, 2, 1]);
        let plan = assign_batch_uniform(&cohort(&[0, 1, 2, 3]), &profiles, &workers(2)).unwrap();
        assert_eq!(lists(&plan), vec![vec![0, 3], vec![1, 2]]);
    }

    #[test]
    fn batch_uniform_equal_clients_divide_evenly() {
        let profiles = profiles(&[3; 6]);
        let plan =
            assign_batch_uniform(&cohort(&[0, 1, 2, 3, 4, 5]), &profiles, &workers(3)).unwrap();
        for list in plan.assignments.values() {
            assert_eq!(list.len(), 2);
        }
    }

    #[test]
    fn every_policy_conserves_the_cohort() {
        let profiles = profiles(&[7, 1, 3, 3, 9, 2, 5]);
        let c = cohort(&[6, 0, 4, 2, 1, 5, 3]);
        let w = workers(3);
        let fits: BTreeMap<String, TimeModelFit> =
            [("test".to_string(), linear_fit("test", 2.0))].into();
        let plans = [
            assign_round_robin(&c, &w).unwrap(),
            assign_sorted_round_robin(&c, &profiles, &w).unwrap(),
            assign_batch_uniform(&c, &profiles, &w).unwrap(),
            assign_learning_based(&c, &profiles, &w, &fits, 4).unwrap(),
        ];
        for plan in &plans {
            assert!(plan.conserves(&c));
            assert_eq!(plan.assignments.len(), 3);
        }
    }

    #[test]
    fn learning_based_round_zero_is_round_robin() {
        let profiles = profiles(&[7, 1, 3, 3, 9]);
        let c = cohort(&[0, 1, 2, 3, 4]);
        let w = workers(2);
        let lb = assign_learning_based(&c, &profiles, &w, &BTreeMap::new(), 0).unwrap();
        let rr = assign_round_robin(&c, &w).unwrap();
        assert_eq!(lb, rr);
    }

    #[test]
    fn learning_based_shifts_work_toward_the_fast_worker() {
        // Worker 0 predicts t=m, worker 1 predicts t=2m; batches [4,3,2,1].
        // Greedy on predicted load: 4→fast, 3→slow (0 < 4), 2→fast (4 < 6),
        // 1→fast (6 = 6 tie goes to the fastest). Loads: fast 7, slow 6.
        let profiles = profiles(&[4, 3, 2, 1]);
        let c = cohort(&[0, 1, 2, 3]);
        let mut w = workers(2);
        w[1].gpu_type = "slow".into();
        let fits: BTreeMap<String, TimeModelFit> = [
            ("test".to_string(), linear_fit("test", 1.0)),
            ("slow".to_string(), linear_fit("slow", 2.0)),
        ]
        .into();
        let plan = assign_learning_based(&c, &profiles, &w, &fits, 1).unwrap();
        assert_eq!(plan.assignments[&0], vec![0, 2, 3]);
        assert_eq!(plan.assignments[&1], vec![1]);
    }

    #[test]
    fn learning_based_with_equal_fits_matches_batch_uniform_loads() {
        // A strictly linear, zero-offset predictor makes predicted load a
        // constant multiple of batch load, so the greedy choices coincide.
        let profiles = profiles(&[9, 9, 8, 5, 5, 4, 2, 1, 1, 7]);
        let c = cohort(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let w = workers(3);
        let fits: BTreeMap<String, TimeModelFit> =
            [("test".to_string(), linear_fit("test", 2.0))].into();
        let lb = assign_learning_based(&c, &profiles, &w, &fits, 2).unwrap();
        let bu = assign_batch_uniform(&c, &profiles, &w).unwrap();
        let batch_of = |id: u64| profiles[id as usize].num_batches;
        let mut lb_loads: Vec<u64> = lb
            .assignments
            .values()
            .map(|l| l.iter().map(|&id| batch_of(id)).sum())
            .collect();
        let mut bu_loads: Vec<u64> = bu
            .assignments
            .values()
            .map(|l| l.iter().map(|&id| batch_of(id)).sum())
            .collect();
        lb_loads.sort_unstable();
        bu_loads.sort_unstable();
        assert_eq!(lb_loads, bu_loads);
    }

    #[test]
    fn learning_based_requires_a_fit_per_gpu_type() {
        let profiles = profiles(&[4, 3]);
        let c = cohort(&[0, 1]);
        let mut w = workers(2);
        w[1].gpu_type = "unfitted".into();
        let fits: BTreeMap<String, TimeModelFit> =
            [("test".to_string(), linear_fit("test", 1.0))].into();
        assert!(matches!(
            assign_learning_based(&c, &profiles, &w, &fits, 1),
            Err(PlacementError::MissingFit(t)) if t == "unfitted"
        ));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!(matches!(
            "foo".parse::<Policy>(),
            Err(PlacementError::UnknownPolicy(s)) if s == "foo"
        ));
    }
}
