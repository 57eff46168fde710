//! Unpaired 8x super-resolution of clinical CT patches toward micro-CT
//! resolution with a modified CycleGAN.

pub mod alloc;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod infer;
pub mod losses;
pub mod model;
pub mod phantom;
pub mod train;
pub mod quality;

pub use error::{Error, ErrorCategory, Result};
pub use grid::{avg_pool_f, bicubic_upsample, mse, nn_upsample_g, Grid2D, ScaleFactor};
