//! Minimal differentiable substrate: dense `f64` arrays, a reverse-mode
//! operation tape, and the Adam optimizer.
//!
//! Design notes: 64-bit precision everywhere (finite-difference checks
//! are unreliable at 32-bit), no operator fusion, tapes are
//! single-threaded and consumed by one forward/backward pass.

pub mod adam;
pub mod kernels;
pub mod tape;

pub use adam::{AdamConfig, ParamStore};
pub use tape::{Tape, Tensor, VarId, MASK_NEG};
