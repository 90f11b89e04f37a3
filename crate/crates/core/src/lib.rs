//! Online bleeding region segmentation and bleeding point localization for
//! surgical video.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod maskbranch;
pub mod memory;
pub mod model;
pub mod nn;
pub mod pointbranch;
pub mod rng;
pub mod train;
pub mod types;
pub mod viz;

pub use error::{Error, Result};
