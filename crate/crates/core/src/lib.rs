//! Multiway rigid point cloud registration on a pose graph.
//!
//! The crate is `no_std` (with `alloc`). Pipeline stages, in order:
//! [`frontend`] pairwise estimates, [`graph`] construction,
//! [`rotation_averaging`], [`consensus`] translation re-estimation,
//! [`position_averaging`] and [`refinement`]; [`metrics`] scores the result.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod consensus;
pub mod error;
pub mod frontend;
pub mod geometry;
pub mod graph;
pub mod metrics;
pub mod position_averaging;
pub mod refinement;
pub mod rotation_averaging;

pub use error::{Error, Result};
