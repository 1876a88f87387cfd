//! A deterministic simulator for studying *client placement* in federated
//! learning: how a central server should distribute a round's clients across
//! GPU-backed workers so that no worker drags the round out.
//!
//! The crate models the whole loop in virtual time — skewed synthetic client
//! populations, heterogeneous GPU latency curves with noise and
//! oversubscription penalties, four placement policies, worker-side partial
//! aggregation, and push- vs pull-style coordination protocols — and reports
//! per-round throughput, worker finish-time spread, and message counts.
//! Every random draw derives from one master seed, so results reproduce
//! bit-for-bit across runs and machines.
//!
//! Modules, in dependency order:
//!
//! * [`rng`] — keyed substreams of the master seed.
//! * [`population`] — synthetic clients and cohort sampling.
//! * [`cluster`] — GPU ground-truth models and worker allocation.
//! * [`aggregation`] — partial (worker-side) and final (server-side)
//!   weighted model averaging.
//! * [`placement`] — the four policies and the latency-curve fitter behind
//!   the learning-based one.
//! * [`engine`] — round execution and the experiment driver.

pub mod aggregation;
pub mod cluster;
pub mod engine;
pub mod placement;
pub mod population;
pub mod rng;
