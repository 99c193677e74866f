//! Federated learning simulator with adaptive-privacy-budget differential
//! privacy.
//!
//! Three privatized training modes are provided on top of FedAvg/FedProx
//! aggregation of model updates:
//!
//! - `apb_lap`: Laplace noise at a fixed sensitivity with a per-client
//!   budget that shrinks while training looks stable and resets otherwise.
//! - `apb_gauss`: the same with Gaussian noise.
//! - `apb_gaclip`: Gaussian noise on L2-clipped updates, with the clipping
//!   threshold tracking the 90th percentile of observed norms.
//!
//! Client work within a round runs on the rayon pool when the `parallel`
//! feature is on (the default). Results are identical either way.

// `!(x > 0.0)` guards are written that way on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod budget;
pub mod data;
pub mod exec;
pub mod model;
pub mod noise;
pub mod param;
pub mod rng;
pub mod rounds;
pub mod sim;

pub use budget::{BudgetState, HistoryWindow, ScoreBreakdown, WindowMode};
pub use data::{Dataset, PartitionParams, PartitionPlan, Skew};
pub use exec::ExecMode;
pub use model::{Model, ModelSpec, TrainConfig};
pub use noise::{ClipState, DpParams, GaussianForm, Mechanism};
pub use param::ParamVector;
pub use rounds::{Aggregation, Algorithm, ClientProfile, FailReason, NoisedUpdate, PrivacySettings};
pub use sim::{
    run_training, run_training_with, ClientRecord, DeviceSettings, Federation, FlConfig, GlobalState,
    MetricsLog, RoundRecord, SimError, TrainingOutcome,
};
