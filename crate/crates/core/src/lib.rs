//! Few-shot segmentation by registration-based mask propagation.
//!
//! Representative support images are picked by clustering image embeddings,
//! their masks are carried to every query image through B-spline elastic
//! registration, and the resulting coarse masks are turned into point, box and
//! mask prompts for a promptable segmentation backend. A refinement round feeds
//! the backend's own prediction back as the mask prompt.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the storage precision used by files and the pipeline.

pub mod backend;
pub mod embed;
pub mod error;
pub mod formats;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod register;
pub mod scalar;
pub mod segment;
pub mod select;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{bounding_box, centroid, largest_component, signed_distance, Connectivity};
pub use io::{load_image, load_mask};
pub use metrics::dice;
pub use prompt::{generate_prompts, soften_mask, PromptConfig, PromptSet};
pub use segment::{MockSegmenter, SegmentationRequest, SegmentationResult, Segmenter};
pub use embed::{embed_toy, Embedding, EmbeddingCache};
pub use select::{select_support, SelectionResult};
pub use register::{ControlGrid, DeformationField, RegistrationConfig};
pub use scalar::Scalar;
pub use tensor::{BBox, BinaryMask, Image, Plane, Point, PointLabel, SampleRecord, SoftMask};

/// Single-precision image, the storage type for all loaded data.
pub type ImageTensor = Image<f32>;
/// Double-precision image used inside registration.
pub type ImageF64 = Image<f64>;
pub type SoftMaskF32 = SoftMask<f32>;
pub type FieldF32 = DeformationField<f32>;
pub type FieldF64 = DeformationField<f64>;
pub type GridF64 = ControlGrid<f64>;
