//! Attribute-witness guided detection of adversarial inputs for CNN classifiers.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`witness`] finds the neurons that track an annotated image attribute by
//!    mutating that attribute in two directions ([`mutation`]) and comparing
//!    per-unit activations produced by the [`engine`].
//! 2. [`steering`] builds an attribute-steered forward pass that strengthens
//!    witness units, weakens the rest and distorts non-witness pooling maps.
//! 3. [`detector`] runs the plain and steered passes side by side and flags
//!    inputs whose labels disagree.
//! 4. [`attack`] and [`synthetic`] provide adversarial samples and planted
//!    ground-truth models for exercising the detector end to end.

pub mod annotation;
pub mod attack;
pub mod detector;
pub mod engine;
pub mod error;
pub mod image_io;
pub mod mutation;
pub mod probe;
pub mod steering;
pub mod synthetic;
pub mod tensor;
pub mod witness;

pub use error::{Error, Result};
pub use tensor::Tensor;
