//! Exposure-level classification of phase-contrast microscopy images.
//!
//! The pipeline fine-tunes a ResNet-50 (optionally with convolutional block
//! attention inside every bottleneck), freezes it, projects pooled features
//! to a 128-d embedding and classifies embeddings with a Euclidean k-NN.
//!
//! Modules follow the pipeline: [`data`] → [`backbone`] → [`training`] →
//! [`knn`] → [`evaluation`].

pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod knn;
pub mod nn;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
