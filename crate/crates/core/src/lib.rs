//! Initialization-free, near-metric structure from motion.
//!
//! The objective combines the pseudo object space error (pOSE) with lifted
//! relative-rotation penalties and is minimized by variable projection.

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod objective;
pub mod prior;
pub mod scene;
pub mod solver;
pub mod upgrade;

pub use error::{Error, Result};
