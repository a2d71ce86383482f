//! Normal-guided iterative depth refinement.
//!
//! Depths are propagated between neighboring pixels along the tangent planes
//! given by a surface-normal map, fused by per-pixel weights, upsampled with
//! the same propagation rule, and evaluated with depth, normal and planarity
//! metrics against analytic synthetic scenes.

pub mod error;
pub mod geometry;
pub mod io;
pub mod learn;
pub mod map;
pub mod metrics;
pub mod refine;
pub mod scene;
pub mod upsample;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, Vec3};
pub use map::{DepthMap, LabelMap, NormalMap};
