//! Encoder-decoder segmentation networks on the CPU.
//!
//! Tensors are channel-last; convolutions are im2col + GEMM and run
//! data-parallel over voxel blocks when [`Execution::Parallel`] is selected.
//! Everything is generic over `f32` (training) and `f64` (gradient checks).
//!
//! [`Execution::Parallel`]: crossseg_core::Execution::Parallel

pub mod checkpoint;
pub mod field;
pub mod gemm;
pub mod layers;
pub mod net;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use field::{backward_field, forward_field, predict_field, FieldCache};
pub use gemm::Gemm;
pub use net::{build_network, Cache, Dimensionality, Network, NetworkConfig};
pub use optim::{AdamConfig, AdamW};
pub use tensor::Feature;
