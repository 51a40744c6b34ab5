//! The SE-residual embedding network, its loss, optimizer and checkpoints.
//!
//! A 120×600 slice is treated as a one-channel image. The stem is a 7×7
//! stride-2 convolution with batch norm, ReLU and a 3×3 stride-2 ceil-mode
//! max pool. Five residual stages follow (stride 2 on entry to stages 2–5),
//! each block gating its second convolution with squeeze-and-excitation.
//! Adaptive average pooling to 1×1 and two Leaky-ReLU fully connected layers
//! produce the embedding.

pub mod checkpoint;
pub mod layers;
pub mod loss;
mod model;
pub mod optim;
pub mod tensor;

pub use checkpoint::{flatten_weights, Checkpoint, CheckpointHeader};
pub use layers::{Param, Visit};
pub use loss::{batch_triplet_loss, pairwise_distance, triplet_loss, triplet_loss_grad, TripletGrad};
pub use model::{slices_to_tensor, DbagNet, ForwardCache, ModelConfig, ShapeTrace, STAGE_COUNT};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;

/// SE recalibration applied to a standalone feature map, for callers that
/// want the gate in isolation.
pub use layers::SqueezeExcite;
