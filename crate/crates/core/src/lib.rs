//! Multi-domain image classification with residual adapter modules.

pub mod adapternet;
pub mod data;
pub mod decathlon;
pub mod engine;
pub mod trainer;

pub use adapternet::{AdapterMode, AdapterNet, DomainHead, DomainId, NetworkConfig, ParamGroup, Role};
pub use data::{Dataset, DomainSpec, NormStats, Split};
pub use decathlon::{BaselineTable, EvalResult, ScoreReport};
pub use engine::{Mode, Scalar, Tape, Tensor, Var};
pub use trainer::{DomainData, OptimSpec, Protocol, TrainReport};
