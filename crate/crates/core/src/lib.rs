//! Pattern-matching memory network for multi-horizon traffic speed
//! forecasting on a road graph.
//!
//! The pipeline: build the road graph ([`graph`]), extract zero-based
//! daily speed patterns and cluster them into a key bank ([`patterns`]),
//! match every input window to its nearest keys, and forecast with a
//! memory-augmented graph-convolutional encoder/decoder ([`gcmem`],
//! [`model`]) trained end to end ([`train`]).

pub mod checkpoint;
pub mod error;
pub mod gcmem;
pub mod graph;
pub mod model;
pub mod numcore;
pub mod patterns;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
