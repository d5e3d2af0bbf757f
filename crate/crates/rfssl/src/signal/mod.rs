//! RF signal primitives: analytic signal, envelope/phase decomposition,
//! patch normalization and resizing, and the augmentation family that acts
//! on patches column-wise (each column is one RF line).

pub mod analytic;
pub mod augment;
pub mod patch;

pub use analytic::{analytic_signal, envelope_and_phase, AnalyticLine, EnvelopePhase};
pub use augment::{
    apply_augmentations, sample_augmentation, AugmentationConfig, Category, Transform,
};
pub use patch::{instance_normalize, resize_bilinear, Patch};
