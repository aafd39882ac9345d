//! Differentiable primitives. Every function returns a fresh tensor and, when
//! any input tracks gradients, records its backward rule.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod shape;
mod softmax;

pub use conv::{conv2d, conv_out_extent};
pub use elementwise::{
    activation, add, add_scalar, broadcast_shape, div, gelu, hard_swish, mul, relu, scale,
    sigmoid_t as sigmoid, sub, Activation, GELU_TANH_COEF,
};
pub use linalg::{linear, matmul};
pub use norm::{batch_norm_eval, batch_norm_train, grn, layer_norm, BatchStats};
pub use reduce::{global_avg_pool, mean, sum};
pub use shape::{broadcast_to, concat, narrow, permute, reshape};
pub use softmax::{cross_entropy, softmax};
