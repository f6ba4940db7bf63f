//! Cross-camera color constancy: log-chroma histogram features, a
//! convolutional color constancy evaluator, a hypernetwork that emits its
//! filters from a handful of unlabeled images of the same camera, and the
//! training, sensor simulation and evaluation machinery around it.

pub mod autodiff;
pub mod bench;
pub mod ccc;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod network;
pub mod sensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
