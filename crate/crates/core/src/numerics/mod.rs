//! Dense tensors, a reverse-mode tape, and gradient verification.
//!
//! The rest of the crate only talks to [`Graph`] and [`Tensor`]; storage
//! layout stays private to this module.

mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

#[cfg(test)]
mod primitive_tests;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttentionLayout, Axis, Gradients, Graph, Segment, Unary, Var};
pub use params::{ParamVars, ParameterTree};
pub use rng::{RngState, SeededRng, Stream};
pub use tensor::{DType, Scalar, Tensor};

/// Primitives provided forward and backward by [`Graph`].
pub fn primitive_set() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "div",
        "scale",
        "add_scalar",
        "add_row",
        "scale_rows",
        "matmul",
        "transpose",
        "reshape",
        "concat",
        "split",
        "gather_rows",
        "scatter_rows",
        "broadcast_row",
        "softmax",
        "layer_norm",
        "gelu",
        "silu",
        "exp",
        "log",
        "tanh",
        "neg",
        "sum",
        "mean",
        "attention",
    ]
}
