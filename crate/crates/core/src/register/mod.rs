//! Deformable registration and mask propagation.
//!
//! A cubic B-spline control grid parameterizes a dense displacement field on
//! the fixed (query) image. Optimizing it against the moving (support) image
//! and then warping the support mask through the field yields the coarse mask.

pub mod bspline;
pub mod objective;
pub mod optimize;
pub mod warp;

pub use bspline::{basis, bspline_field, ControlGrid, DeformationField};
pub use objective::{bending_energy, objective, ObjectiveValue};
pub use optimize::{register, register_detailed, LevelTrace, Registration, RegistrationConfig};
pub use warp::{propagate_mask, sample_bilinear, warp_image, warp_plane, warp_soft};
