//! Hierarchy- and attention-guided cross-masking pre-training for skeleton
//! sequences in the Poincaré ball.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod masking;
pub mod network;
pub mod pipeline;
pub mod probe;
pub mod train;
pub mod refine;
pub mod skeleton;

pub use error::{Error, Result};
