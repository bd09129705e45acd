//! Minimal fooling geometric transformations for image classifiers.
//!
//! The crate searches transformation groups (translation up to projective)
//! for the smallest transformation, measured by geodesic distance on the
//! transformation manifold of an image, that flips a differentiable
//! classifier's prediction. On top of the search it provides invariance
//! scores, misclassification curves against random transformations, and
//! adversarial fine-tuning of its built-in classifiers.

pub mod attack;
pub mod classifier;
pub mod cli;
pub mod data;
pub mod error;
pub mod geodesic;
pub mod group;
pub mod image;
pub mod metrics;

pub use error::{Error, Result};
pub use group::{exp_map, log_map, TangentVector, Transform, TransformGroup};
pub use image::Image;
