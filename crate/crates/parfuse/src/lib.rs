//! Desk-scale laboratory for collaborative bird's-eye-view perception.
//!
//! A small fleet of simulated agents (vehicles and roadside infrastructure)
//! observes a shared scene, extracts BEV feature maps, exchanges them over a
//! noisy channel (latency, heading and localization error), fuses them with a
//! parallel attention/convolution module, and detects rotated boxes. The crate
//! carries its own dense f64 tensor engine with reverse-mode autodiff so every
//! piece is trainable and finite-difference checkable end to end.

pub mod config;
pub mod corpus;
pub mod detection;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod report;
pub mod scenario;
pub mod sharing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
