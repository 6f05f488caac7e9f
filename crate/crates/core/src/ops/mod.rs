//! Forward operations and their analytic gradients.

mod batchnorm;
mod conv;
mod elementwise;
mod loss;
mod resize;

pub use batchnorm::{
    batchnorm, batchnorm_backward, batchnorm_eval, batchnorm_train, BatchNormCache,
    BatchNormGrads, BatchNormState, Mode, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use elementwise::{add, add_backward, relu, relu_backward};
pub use loss::{mse_loss, softmax_cross_entropy};
pub use resize::{
    bilinear_resize, bilinear_resize_backward, mean_pool, mean_pool_backward, subsample,
    subsample_backward,
};
