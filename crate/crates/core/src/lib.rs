//! Constrained neural state-space models for identifying building thermal
//! dynamics with bilinear algebraic inputs.
//!
//! The learned transition matrix is built from a row-softmax scaled by a
//! damping factor in `(0.9, 1)`, so it is elementwise positive with row sums
//! below one and its spectral radius is strictly below one. Bounds on states
//! and algebraic inputs are enforced softly through relu slacks penalised
//! in the multi-step loss.

pub mod analysis;
pub mod autodiff;
pub mod constraints;
pub mod error;
pub mod models;
pub mod numerics;
pub mod plant;
pub mod training;

pub use error::{Error, Result};
