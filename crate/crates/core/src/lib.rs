//! Task-vector model merging viewed as one-shot federated averaging.
//!
//! The crate is organized around [`ParameterMap`], a sorted collection of named
//! dense tensors generic over its element type. On top of it sit:
//!
//! - [`checkpoint`]: the on-disk tensor container and training-metadata sidecars,
//! - [`merge`]: Task Arithmetic, FedNova, FedGMA, coordinate-wise Median and
//!   CCLIP merge rules plus the hyperparameter sweep,
//! - [`heterometrics`]: normalized-rate bookkeeping, aggregation weights,
//!   chi-square divergence and the training-heterogeneity bound,
//! - [`fedsim`]: a deterministic local-SGD / FedAvg simulator on synthetic tasks,
//! - [`experiment`]: the JSON experiment config and report used by the CLI.

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod heterometrics;
pub mod merge;
pub mod params;
pub mod scalar;

pub use error::{Error, Result};
pub use heterometrics::HeterogeneityReport;
pub use merge::{MergeMethod, MergeResult, MergeSpec};
pub use params::{ParameterMap, TaskVector, Tensor, TrainingMeta};
pub use scalar::Scalar;

/// Parameter map in checkpoint precision.
pub type ParamMap = ParameterMap<f32>;
/// Parameter map in simulation precision.
pub type ParamMap64 = ParameterMap<f64>;
pub type TaskVec = TaskVector<f32>;
pub type TaskVec64 = TaskVector<f64>;
