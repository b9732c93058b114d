//! Dense grid math with reverse-mode differentiation.
//!
//! Only the operators the detector needs are provided: convolution,
//! stride-matched transposed convolution, element-wise add/relu, a
//! bidirectional tanh recurrence along the width axis, region max pooling,
//! fully connected maps and the two loss reductions. All values are `f64`;
//! the model file stores `f32`.

pub mod gradcheck;
mod grid;
mod kernels;
pub mod loss;
pub mod modelfile;
mod params;
mod tape;

pub use grid::Grid;
pub use loss::{smooth_l1, smooth_l1_grad, softmax_cross_entropy, CLASS_BACKGROUND, CLASS_TEXT};
pub use params::{uniform_fan_in, BoundParams, GroupName, ParamGroup, ParamStore, Sgd};
pub use tape::{Gradients, RnnParams, Tape, Var};

use crate::error::Result;

/// Convolution of a detached input; convenience over a one-off tape.
pub fn conv2d(input: &Grid, kernel: &Grid, bias: &Grid, stride: usize, pad: usize) -> Result<Grid> {
    kernels::conv2d_forward(input, kernel, bias, stride, pad)
}

/// Transposed convolution of a detached input.
pub fn transposed_conv2d(input: &Grid, kernel: &Grid, stride: usize) -> Result<Grid> {
    kernels::transposed_conv2d_forward(input, kernel, stride)
}
