//! Cross-modal few-shot keypoint detection: sketch or edgemap supports,
//! photo queries.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod destyle;
pub mod domainadapt;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod locator;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
