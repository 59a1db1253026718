//! Deterministic local-SGD and FedAvg simulation on synthetic tasks.

mod family;
pub mod mlp;
mod noise;
mod sim;
mod task;
pub mod toy;

pub use family::{cluster_dataset, generate_task_family, TaskFamily, TaskFamilySpec, LOGISTIC_L2, MLP_CLUSTER_RADIUS};
pub use noise::NoiseKey;
pub use sim::{
    fedavg, global_gradient, global_loss, global_optimum, local_sgd, one_shot_fedavg, suboptimality, suboptimality_at, FedAvg,
    LocalRun, SimRun, ORACLE_MAX_STEPS, ORACLE_TOLERANCE,
};
pub use task::{Objective, SyntheticTask, TaskKind, THETA};
