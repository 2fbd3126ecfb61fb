//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operator set is exactly what the codec needs: convolution, nearest
//! upsampling, bilinear warping, elementwise arithmetic, reductions, a
//! straight-through rounding surrogate, and the logistic code-length
//! estimator. No broadcasting beyond scalars, no higher-order derivatives.

mod adam;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_probes, rel_err, FdReport, Probe};
pub use graph::{BoundParams, GradMap, Graph, NodeId};
pub use params::{crc32, CheckpointError, ParamEntry, ParamSet, Side};
pub use tensor::{hash_hex, Tensor};

pub mod kernels {
    //! Raw forward/backward kernels, exposed for benches and oracles.
    pub use super::ops::{
        conv2d_backward, conv2d_backward_seq, conv2d_forward, conv2d_forward_seq, conv_out_dim,
        logistic_bin_prob, rate_bits_backward, rate_bits_forward, sigmoid, softplus,
        upsample2x_backward, upsample2x_forward, warp_backward, warp_forward, P_MIN, SCALE_EPS,
    };
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("precondition violated in {op}: {detail}")]
    Precondition { op: &'static str, detail: String },
    #[error("loss must be a scalar node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("duplicate parameter name `{name}`")]
    DuplicateParam { name: String },
    #[error("unknown parameter `{name}`")]
    UnknownParam { name: String },
}
