//! Stage assembly shared by the command-line driver and the tests:
//! initialization (reference lift, outpainting, occlusion volume) and the
//! per-view caches the training stages consume.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::depth_init::{grow_pointcloud, init_splats_from_points, lift_depth, make_aux_poses, DepthInitError, DepthProvider};
use crate::diffusion::{sample, Conditioning, Denoiser, DiffusionError, GuidanceConfig, LatentCodec, NoiseSchedule, Tensor};
use crate::occlusion::{build_grid, carve_visibility, occlusion_volume, render_inpaint_mask, OccupancyGrid, OcclusionError};
use crate::scene::{rasterize_points, Camera, ImageBuf, MaskBuf, PointCloud, PointSource, SplatCloud};
use crate::trainer::TrainView;

/// Neighbours used for the initial splat scale.
pub const INIT_NEIGHBORS: usize = 3;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("reference depth: {0}")]
    Depth(#[from] DepthInitError),
    #[error("outpainting auxiliary view {view}: {source}")]
    Outpaint { view: usize, source: DiffusionError },
    #[error("growing from auxiliary view {view}: {source}")]
    Grow { view: usize, source: DepthInitError },
    #[error("occlusion volume: {0}")]
    Occlusion(#[from] OcclusionError),
}

/// Outpainting settings for the auxiliary views.
#[derive(Clone, Copy)]
pub struct Outpainter<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a dyn LatentCodec,
    pub schedule: &'a NoiseSchedule,
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct InitArtifacts {
    /// Lifted reference plus outpainted points.
    pub points: PointCloud,
    /// Centers of voxels hidden from the reference camera.
    pub occlusion: PointCloud,
    pub grid: OccupancyGrid,
    pub aux_cameras: Vec<Camera>,
    /// Outpainted image of every auxiliary view.
    pub aux_images: Vec<ImageBuf>,
    pub cloud: SplatCloud,
}

/// Masked conditioning image and mask tensor for an inpainting request.
pub fn inpaint_conditioning(prompt: &str, point_render: &ImageBuf, mask: &MaskBuf, view: &Camera) -> Conditioning {
    let (w, h) = (point_render.width, point_render.height);
    let masked = ImageBuf::from_fn(w, h, |x, y| point_render.pixel(x, y).map(|c| c * mask.at(x, y)));
    Conditioning {
        prompt: prompt.to_string(),
        image: Some(Tensor {
            shape: vec![h, w, 3],
            data: masked.data,
        }),
        mask: Some(Tensor {
            shape: vec![h, w, 1],
            data: mask.data.clone(),
        }),
        view: Some(*view),
    }
}

/// Builds the initial scene: lifts the reference image with provider depth,
/// outpaints and lifts the holes seen from each auxiliary offset, carves the
/// occlusion volume from the reference camera and converts everything into
/// isotropic splats.
#[allow(clippy::too_many_arguments)]
pub fn initialize(
    reference: &Camera,
    image: &ImageBuf,
    provider: &dyn DepthProvider,
    outpainter: Outpainter<'_>,
    aux_offsets: &[f64],
    aux_prompts: &[String],
    grid_resolution: [usize; 3],
) -> Result<InitArtifacts, InitError> {
    let depth = provider.estimate(image, reference)?;
    let all = MaskBuf::filled(image.width, image.height, 1.0);
    let mut points = lift_depth(reference, image, &depth, &all, PointSource::Reference)?;

    let aux_cameras = make_aux_poses(reference, aux_offsets);
    let mut aux_images = Vec::with_capacity(aux_cameras.len());
    for (i, cam) in aux_cameras.iter().enumerate() {
        let raster = rasterize_points(&points, cam);
        let known = raster.hit_mask();
        let render = raster.color_image(&points);
        let prompt = aux_prompts.get(i).map(String::as_str).unwrap_or("");
        let cond = inpaint_conditioning(prompt, &render, &known, cam);
        let err = |source| InitError::Outpaint { view: i, source };
        let shape = outpainter.codec.encode(&render).map_err(err)?.shape;
        let mut rng = ChaCha8Rng::seed_from_u64(outpainter.seed);
        rng.set_stream(i as u64);
        let n = shape.iter().product();
        let noise = Tensor {
            shape,
            data: (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
        };
        let s = outpainter.schedule;
        let (_, generated) = sample(&noise, s.steps, outpainter.denoiser, &cond, outpainter.steps, outpainter.guidance, s, outpainter.codec)
            .map_err(err)?;
        points = grow_pointcloud(&points, cam, &generated, provider, PointSource::Aux(i as u16))
            .map_err(|source| InitError::Grow { view: i, source })?;
        aux_images.push(generated);
    }

    let mut grid = build_grid(&points, grid_resolution)?;
    carve_visibility(&mut grid, &reference.center());
    let occlusion = occlusion_volume(&grid);
    let cloud = init_splats_from_points(&points.union(&occlusion), INIT_NEIGHBORS);
    Ok(InitArtifacts {
        points,
        occlusion,
        grid,
        aux_cameras,
        aux_images,
        cloud,
    })
}

/// Point-cloud render of `points ∪ occlusion` and the inpainting mask for
/// `camera`.
pub fn point_render_and_mask(points: &PointCloud, occlusion: &PointCloud, camera: &Camera, dilation_px: usize) -> (ImageBuf, MaskBuf) {
    let all = points.union(occlusion);
    let render = rasterize_points(&all, camera).color_image(&all);
    let mask = render_inpaint_mask(points, occlusion, camera, dilation_px);
    (render, mask)
}

pub fn prepare_views(points: &PointCloud, occlusion: &PointCloud, cameras: &[Camera], dilation_px: usize) -> Vec<TrainView> {
    cameras
        .iter()
        .map(|cam| {
            let (point_render, mask) = point_render_and_mask(points, occlusion, cam, dilation_px);
            TrainView {
                camera: *cam,
                point_render,
                mask,
            }
        })
        .collect()
}

/// Mask dilation scaled from 8 px at 512 px width.
pub fn default_dilation(width: usize) -> usize {
    ((8 * width) as f64 / 512.0).round() as usize
}
