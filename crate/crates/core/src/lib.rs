//! Adversarial-example detection from augmentation neighbors.
//!
//! An input is compared against `k` augmented copies of itself: a
//! self-supervised classification head should agree with the target
//! classifier on the neighbors (label consistency), and the projector
//! embeddings of the neighbors should stay close to the input's own
//! (representation similarity). Both counts are calibrated on clean data
//! to a target false-positive rate.

pub mod attacks;
pub mod augment;
pub mod data;
pub mod detector;
mod error;
pub mod evaluation;
pub mod models;
pub mod pipeline;
pub mod theory;

pub use error::{Error, Result};
