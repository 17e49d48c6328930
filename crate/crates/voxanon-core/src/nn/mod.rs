//! Minimal reverse-mode automatic differentiation over `ndarray` matrices,
//! plus the layers, parameter registry, and optimizer built on top of it.
//!
//! The training losses need two gradient behaviors that off-the-shelf
//! frameworks make awkward to pin down exactly: a straight-through
//! estimator whose backward is the identity into the pre-quantization
//! residual, and a gradient reversal layer with a schedulable scale. Both
//! are first-class tape operations here, which keeps their semantics
//! testable against finite differences.
//!
//! Everything is `f64` and single-threaded; for a fixed input the forward
//! values, gradients, and optimizer updates are bit-reproducible.

pub mod adamw;
pub mod check;
pub mod layers;
pub mod mel;
pub mod params;
pub mod tape;

pub use adamw::{AdamW, AdamWConfig};
pub use check::{fd_param_check, FdReport};
pub use layers::{Conv1d, ConvT1d, GatedConvBlock, Linear, MultiHeadAttention};
pub use mel::DifferentiableMel;
pub use params::{ParamId, ParamSet};
pub use tape::{PadKind, Tape, Var};
