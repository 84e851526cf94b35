//! Class-agnostic object detection on event streams.
//!
//! The pipeline: [`events`] (streams, annotations, synthetic scenes) →
//! [`encode`] (polarity/time-binned count tensors) → [`model`] (recurrent
//! [`backbone`] + dual regressor and disentangled objectness [`heads`]) →
//! [`sampling`] and [`loss`] for training via [`trainer`], [`infer`] for fused
//! detections, and [`evalkit`] for open-world average recall.

pub mod backbone;
pub mod benchmark;
pub mod config;
pub mod dataset;
pub mod encode;
pub mod error;
pub mod evalkit;
pub mod events;
pub mod geometry;
pub mod gradsuite;
pub mod heads;
pub mod infer;
pub mod loss;
pub mod model;
pub mod sampling;
pub mod trainer;

pub use error::{DeoeError, Result};
pub use geometry::{iou, BBox};
