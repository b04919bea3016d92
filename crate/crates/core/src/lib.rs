//! Occlusion-aware Gaussian-splat scene generation driven by pluggable
//! diffusion denoisers.

pub mod depth_init;
pub mod diffusion;
pub mod driver;
pub mod imageops;
pub mod io;
pub mod losses;
pub mod occlusion;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod synthetic;
pub mod trainer;

pub use diffusion::{Conditioning, Denoiser, DiffusionError, GuidanceConfig, LatentCodec, NoiseSchedule, Tensor};
pub use driver::{DriverError, PipelineConfig};
pub use occlusion::OccupancyGrid;
pub use render::{render, render_gradients, RenderOptions, RenderOutput};
pub use scene::{Camera, DepthMap, ImageBuf, MaskBuf, PointCloud, PointSource, Rigid, Splat, SplatCloud};
pub use trainer::{Checkpoint, Stage, StagePlan};
