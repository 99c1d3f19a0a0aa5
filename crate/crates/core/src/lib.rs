//! Consistency-based semi-supervised object detection.

pub mod adversarial;
pub mod augment;
pub mod autograd;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod feature_perturbation;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod output;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
