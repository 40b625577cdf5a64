//! Online pricing with epsilon-policy-gradient: a GLM response model estimated by regularized
//! ERM, a per-segment projected gradient policy, and a decaying exploration schedule.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod engine;
pub mod env;
pub mod erm;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod output;
pub mod policy;
pub mod random;
pub mod response;
pub mod types;

pub use engine::{
    oracle_best_action, run, run_replications, Algorithm, ExperimentResult, RunOptions, RunTrace,
    TraceRecord,
};
pub use env::{build_environment, Environment, EnvironmentConfig};
pub use erm::{ErmState, SolverReport};
pub use error::{Error, Result};
pub use loss::LossSpec;
pub use policy::{Certificate, EpsilonSchedule, ExplorationKernel, Policy};
pub use random::RandomStream;
pub use response::{ResponseModel, RewardFunction};
pub use types::*;
