//! Pipeline, file formats and reports around [`mosaic_core`].
//!
//! The binary `mosaic` in `src/main.rs` is a thin CLI over this crate.

pub mod bench;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
