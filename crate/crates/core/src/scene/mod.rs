//! Geometric types shared by every stage of the pipeline: cameras and rigid
//! transforms, Gaussian splats, raster buffers and point clouds.
//!
//! Conventions: the camera looks down +z with +x right and +y down. Pixel
//! `(i, j)` covers `[i, i+1) x [j, j+1)` and its center sits at `(i+0.5, j+0.5)`.
//! All raster buffers are row-major `f32`.

mod camera;
mod points;
mod raster;
mod splat;

pub use camera::{Camera, Rigid};
pub use points::{rasterize_points, PointCloud, PointRaster, PointSource};
pub use raster::{psnr, DepthMap, ImageBuf, MaskBuf, Raster};
pub use splat::{
    logit, quat_to_rotation, sigmoid, splat_covariance, OptimizerState, Splat, SplatCloud,
    PARAMS_PER_SPLAT,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("transform is not rigid (orthonormality error {0:e})")]
    NonRigidTransform(f64),
    #[error("buffer size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
}
