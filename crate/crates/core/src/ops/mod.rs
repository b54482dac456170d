//! Forward and backward kernels on raw `[N, C, H, W]` buffers.
//!
//! The autodiff graph in [`crate::graph`] wraps these; they are also usable on their own.

pub mod conv;
pub mod interp;
pub mod norm;
pub mod pool;

pub use conv::{ConvRegion, Rect};
