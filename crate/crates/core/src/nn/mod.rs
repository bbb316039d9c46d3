//! Tensor engine: layer kernels with exact backward passes, losses, Adam,
//! and a finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod params;
pub mod tensor;

pub use gradcheck::{gradient_check, gradient_check_sampled, Differentiable, GradCheckReport};
pub use layers::{
    concat_backward, concat_channels, conv2d, conv2d_backward, fully_connected,
    fully_connected_backward, global_avg_pool, global_avg_pool_backward, maxpool,
    maxpool_backward, relu, relu_backward,
};
pub use loss::{mse_loss, softmax_cross_entropy};
pub use params::{adam_step, AdamConfig, LayerParams, Moments};
pub use tensor::Tensor;
