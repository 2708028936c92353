//! Spatial regression with a sum-of-trees mean and a latent Matern field.
pub mod data;
pub mod error;
pub mod gp;
pub mod parallel;
pub mod predict;
pub mod simgen;
pub mod sampler;
pub mod solver;
pub mod sparse;
pub mod spde;
pub mod tree;

pub use error::{Error, Result};
