//! Software twin of a slow-integration UWB backscatter localization system.
//!
//! The crate synthesizes bandstitched channel recordings of rooms containing
//! backscatter tags whose reflections sit far below the per-snapshot noise
//! floor, and runs the anchor-side recovery chain on them: high-pass
//! filtering, frequency/phase/code search, long-term integration, CIR
//! reconstruction, leading-edge ToA/TDoA estimation, and ellipsoid lateration.

// Validation is written as `!(x > 0.0)` throughout so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod coverage;
pub mod error;
pub mod geometry;
pub mod locate;
pub mod pipeline;
pub mod ranging;
pub mod recovery;
pub mod rfmodel;
pub mod sweep;
pub mod waveform;

pub use error::{Error, Result};
pub use geometry::{path_delay, Bounds, Vec3, SPEED_OF_LIGHT};
