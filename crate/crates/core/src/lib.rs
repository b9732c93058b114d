//! Residual text detection: a small convolutional detector that proposes
//! fixed-width vertical text slices, connects them into lines and refines
//! each line's horizontal extent.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// kernels index several parallel buffers with one counter
#![allow(clippy::needless_range_loop)]

pub mod assembler;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalbench;
pub mod geom;
pub mod gridmath;
pub mod model;
pub mod par;
pub mod synthcorpus;
pub mod vrpn;
