//! Geometry-aware implicit representations for unsupervised domain adaptation
//! on point clouds.
//!
//! A shared set encoder maps a point cloud to a latent code. An implicit decoder
//! regresses an adaptive unsigned distance field from that code, a classifier
//! predicts the category, and both domains are aligned through the shared
//! geometric task before self-paced pseudo-labelling on the target domain.

pub mod augment;
pub mod datagen;
pub mod error;
pub mod field;
pub mod model;
pub mod pointcloud;
pub mod seeding;
pub mod spatial;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
