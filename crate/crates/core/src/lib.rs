//! Dynamic data pruning for small neural networks.
//!
//! Samples are scored each step by how much their loss differs between the
//! online model and an exponential moving average of it, and only the
//! highest-scoring fraction of each batch is used for the update.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelSpec, ParameterVector, Sample, Target, Task};
pub use pruning::{ModelPair, PruneDecision, ScorerKind};
pub use trainer::{train, TrainConfig, TrainOutcome};
