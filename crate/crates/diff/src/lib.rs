//! Reverse-mode differentiation substrate for the latent model and the
//! reward reconstructor: a matrix tape, feed-forward and gated recurrent
//! blocks, diagonal Gaussian heads and an Adam optimizer. Everything runs in
//! `f64` on the CPU.

pub mod gaussian;
pub mod graph;
pub mod nn;
pub mod params;

pub use gaussian::{
    gauss_log_prob, gauss_log_prob_f64, gauss_sample_reparam, kl_diag_gauss, kl_diag_gauss_f64,
    DiagGaussianHead, GaussParams, STD_FLOOR,
};
pub use graph::{Graph, Var};
pub use nn::{
    bidirectional_forward, recurrent_forward, Activation, BiRecurrent, CellKind, Linear, Mlp,
    RecurrentCell, RecurrentState,
};
pub use params::{AdamConfig, Bound, Checkpoint, Gradients, ParamId, ParameterSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("backward requires a 1x1 root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("optimizer step produced a non-finite parameter")]
    NonFiniteParameter,

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
