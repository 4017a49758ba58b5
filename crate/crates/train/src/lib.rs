//! Cross-teaching between a 3D network and two 2D networks on sparse cross
//! annotations, plus configuration, evaluation and budget search.

pub mod budget;
pub mod config;
pub mod data;
pub mod eval;
pub mod trainer;

pub use budget::budget_search;
pub use config::{DistanceUnits, RunConfig, TeachingMode, TrainConfig};
pub use eval::{evaluate, infer_3d};
pub use trainer::{sparse_reference_step, train, train_step, TrainOutcome, TrainState};
