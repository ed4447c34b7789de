//! Dense tensors, sequential layers with hand-written backprop, AdamW and
//! the learning-rate schedule.

mod gradcheck;
mod layer;
mod network;
mod optim;
mod scalar;
mod schedule;
mod tensor;

pub use gradcheck::{finite_diff_check, gradient_check, half_squared_error, GradCheck, REL_ERROR_FLOOR};
pub use layer::{Layer, LayerSpec, Param};
pub use network::{Activations, Network};
pub use optim::AdamW;
pub use scalar::Scalar;
pub use schedule::{cosine_lr, CosineSchedule};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use layer::channel_softmax;
pub(crate) use layer::softmax_backward;
