//! Deep perceptual similarity (DPS) toolkit.
//!
//! Compares images through the activations of pretrained CNN trunks
//! (SqueezeNet, AlexNet, VGG-16) with position-aware (`spatial`) and
//! position-agnostic (`mean`, `sort`) distances, plus a pixel-wise baseline.
//! The [`probes`] module builds distortion test cases and scores metrics on
//! them; [`bapps`] scores metrics against human 2AFC and JND judgments.

pub mod backbone;
pub mod bapps;
pub mod image;
pub mod metrics;
pub mod probes;
pub mod tensor;

pub use backbone::{
    extract_features, load_weights, store_weights, Backbone, BackboneError, BackboneId,
    BackboneSpec, FeatureStack, WeightContainer,
};
pub use image::Image;
pub use metrics::{distance, Distance, Method, MetricConfig, MetricError, Norm};
pub use tensor::Tensor3;
