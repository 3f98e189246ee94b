//! Registration-enabled point-prompt engineering for promptable segmentation models.

pub mod fusion;
pub mod metrics;
pub mod phantom;
pub mod prompts;
pub mod registration;
pub mod scalar;
pub mod segmenter;
pub mod transform;
pub mod volume;

pub use scalar::Real;

/// Intensity / mask volume with 32-bit storage.
pub type Volume3D = volume::Volume<f32>;
pub type AffineTransform = transform::Affine<f64>;
pub type FfdTransform = transform::Ffd<f64>;
pub type CompositeTransform = transform::Composite<f64>;
pub type DenseDisplacementField = transform::DenseField<f64>;
