//! Sparse-view cone-beam CT reconstruction with learned 3D Gaussian feature
//! fields, plus classical SART/FDK baselines, procedural phantoms, and the
//! file formats that tie the pipeline together.

pub mod baselines;
pub mod diffcore;
pub mod error;
pub mod formats;
pub mod gaussians;
pub mod geometry;
pub mod math;
pub mod metrics;
pub mod model;
pub mod projector;
pub mod scalar;
pub mod tto;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{make_circular_geometry, Ray, ScanGeometry, ViewPose};
pub use projector::{drr, line_integral, ProjectionStack};
pub use scalar::Scalar;
pub use volume::{generate_phantom, sample_trilinear, PhantomSpec, VoxelVolume};
