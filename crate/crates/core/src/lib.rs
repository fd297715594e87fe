//! Reference-free relation scoring for scene graphs.

pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod providers;
pub mod scalar;
pub mod stats;
pub mod synth;

pub use scalar::Scalar;

/// Box type used by datasets and reports.
pub type BoundingBox = geometry::BBox<f64>;
