//! Conditional utility-maximization duality on finite event trees.
//!
//! The crate is organised bottom-up: [`filtered_space`] holds the
//! probability kernel, [`market`] the single-asset model and its deflator
//! constraints, [`utility`] the utility/conjugate pairs, and [`duality`] the
//! per-atom primal and dual solvers together with their verification checks.
//! [`analysis`], [`stability`] and [`minimax_bridge`] build experiments on
//! top of the solvers.

pub mod analysis;
pub mod duality;
pub mod error;
pub mod filtered_space;
pub mod fixtures;
pub mod linalg;
pub mod market;
pub mod minimax_bridge;
pub mod solver;
pub mod stability;
pub mod utility;

pub use error::{Error, Result};
