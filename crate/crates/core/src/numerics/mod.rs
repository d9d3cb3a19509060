//! Dense `f64` arrays, the primitives the network is built from, and a
//! reverse-mode tape with a finite-difference checker.

mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Objective};
pub use ops::{
    dilated_causal_conv1d, layer_norm, leaky_relu, masked_softmax, softmax_rows, AttentionMask,
    DEFAULT_LAYER_NORM_EPS, DEFAULT_LEAKY_SLOPE,
};
pub use params::ParamSet;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
