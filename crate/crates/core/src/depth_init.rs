//! Initial point cloud from a reference image and depth, outpainting from
//! auxiliary views, and conversion of points into isotropic splats.

use std::sync::Arc;

use nalgebra::Vector3;
use thiserror::Error;

use crate::imageops::{blur_plane, gaussian_kernel, Boundary};
use crate::scene::{
    rasterize_points, Camera, DepthMap, GeometryError, ImageBuf, MaskBuf, PointCloud,
    PointSource, Rigid, Splat, SplatCloud,
};
use crate::synthetic::GroundTruth;

/// Initial opacity of splats created from points.
pub const INIT_OPACITY: f64 = 0.1;
/// Width of the band around hole boundaries whose depth is blended.
pub const SEAM_BAND_PX: usize = 3;
pub const SEAM_SIGMA_PX: f64 = 2.0;
/// Projected half-width of a lifted point, in pixels of its source view.
const LIFT_FOOTPRINT_PX: f64 = 0.75;

#[derive(Debug, Error)]
pub enum DepthInitError {
    #[error("need at least 2 valid pixels to align depth, found {0}")]
    TooFewValid(usize),
    #[error("relative depth has no variance over the valid pixels")]
    ZeroVariance,
    #[error("no valid pixels selected for lifting")]
    EmptyResult,
    #[error("depth alignment failed: {0}")]
    AlignmentFailed(Box<DepthInitError>),
    #[error("depth provider failed: {0}")]
    Provider(String),
    #[error("input sizes differ: {0}")]
    SizeMismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Source of relative (positive, unit-free) depth for an image. The camera is
/// a hint: learned estimators ignore it, ground-truth mocks use it to look up
/// the scene.
pub trait DepthProvider: Send + Sync {
    fn estimate(&self, image: &ImageBuf, camera: &Camera) -> Result<DepthMap, DepthInitError>;
}

/// Exact depth from an analytic scene.
#[derive(Clone)]
pub struct GroundTruthDepth {
    pub scene: Arc<dyn GroundTruth>,
}

impl GroundTruthDepth {
    pub fn new(scene: Arc<dyn GroundTruth>) -> Self {
        Self { scene }
    }
}

impl DepthProvider for GroundTruthDepth {
    fn estimate(&self, image: &ImageBuf, camera: &Camera) -> Result<DepthMap, DepthInitError> {
        let d = self.scene.depth(camera);
        if !d.same_size(image) {
            return Err(DepthInitError::SizeMismatch("image does not match camera".into()));
        }
        Ok(d)
    }
}

/// Wraps another provider and returns `scale·d + shift` on its valid pixels,
/// mimicking a relative-depth estimator.
pub struct AffineDepth<P> {
    pub inner: P,
    pub scale: f64,
    pub shift: f64,
}

impl<P: DepthProvider> DepthProvider for AffineDepth<P> {
    fn estimate(&self, image: &ImageBuf, camera: &Camera) -> Result<DepthMap, DepthInitError> {
        let d = self.inner.estimate(image, camera)?;
        Ok(d.map(|v| {
            if v > 0.0 {
                (self.scale * v as f64 + self.shift) as f32
            } else {
                v
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignResult {
    pub a: f64,
    pub b: f64,
    pub aligned: DepthMap,
    pub rms_residual: f64,
}

/// Least-squares scale and shift mapping `relative` onto `target` over the
/// pixels where `valid` is set and `target` is positive. Pixels whose relative
/// depth is not positive stay at 0 in the aligned map.
pub fn align_depth(
    relative: &DepthMap,
    target: &DepthMap,
    valid: &MaskBuf,
) -> Result<AlignResult, DepthInitError> {
    if !relative.same_size(target) || !relative.same_size(valid) {
        return Err(DepthInitError::SizeMismatch("relative, target and mask".into()));
    }
    let pairs: Vec<(f64, f64)> = (0..relative.len())
        .filter(|&i| valid.data[i] > 0.5 && target.data[i] > 0.0 && relative.data[i].is_finite())
        .map(|i| (relative.data[i] as f64, target.data[i] as f64))
        .collect();
    let n = pairs.len();
    if n < 2 {
        return Err(DepthInitError::TooFewValid(n));
    }
    let nf = n as f64;
    let mr = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mt = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut srr, mut srt) = (0.0, 0.0);
    for &(r, t) in &pairs {
        srr += (r - mr) * (r - mr);
        srt += (r - mr) * (t - mt);
    }
    if srr <= nf * 1e-12 * mr.abs().max(1e-12).powi(2) {
        return Err(DepthInitError::ZeroVariance);
    }
    let a = srt / srr;
    let b = mt - a * mr;
    let sse: f64 = pairs.iter().map(|&(r, t)| (a * r + b - t).powi(2)).sum();
    let aligned = relative.map(|r| if r > 0.0 { (a * r as f64 + b) as f32 } else { 0.0 });
    Ok(AlignResult {
        a,
        b,
        aligned,
        rms_residual: (sse / nf).sqrt(),
    })
}

/// One point per selected pixel with positive depth, placed at the pixel
/// center and colored from `image`.
pub fn lift_depth(
    camera: &Camera,
    image: &ImageBuf,
    depth: &DepthMap,
    mask: &MaskBuf,
    source: PointSource,
) -> Result<PointCloud, DepthInitError> {
    if !image.same_size(depth) || !image.same_size(mask) || image.width != camera.width || image.height != camera.height {
        return Err(DepthInitError::SizeMismatch("camera, image, depth and mask".into()));
    }
    let f = camera.fx.max(camera.fy);
    let mut out = PointCloud::default();
    for y in 0..camera.height {
        for x in 0..camera.width {
            let d = depth.at(x, y) as f64;
            if mask.at(x, y) <= 0.5 || !(d > 0.0) || !d.is_finite() {
                continue;
            }
            let p = camera.unproject_pixel(x as f64 + 0.5, y as f64 + 0.5, d)?;
            out.push(p, image.pixel(x, y), source, LIFT_FOOTPRINT_PX * d / f);
        }
    }
    if out.is_empty() {
        return Err(DepthInitError::EmptyResult);
    }
    Ok(out)
}

/// Copies of `reference` shifted along its own x-axis by each offset.
pub fn make_aux_poses(reference: &Camera, offsets: &[f64]) -> Vec<Camera> {
    offsets
        .iter()
        .map(|&d| {
            let shift = Rigid::from_translation(Vector3::new(d, 0.0, 0.0));
            reference.with_pose(reference.cam_to_world.compose(&shift))
        })
        .collect()
}

/// Extends `current` with the parts of `image` (seen from `camera`) that the
/// cloud does not cover. Predicted depth is aligned to the rendered depth of
/// the covered pixels; near the hole boundary the remaining residual is
/// smoothly propagated into the hole so new geometry meets the old.
pub fn grow_pointcloud(
    current: &PointCloud,
    camera: &Camera,
    image: &ImageBuf,
    provider: &dyn DepthProvider,
    source: PointSource,
) -> Result<PointCloud, DepthInitError> {
    let raster = rasterize_points(current, camera);
    let rendered = raster.depth_map();
    let valid = raster.hit_mask();
    let holes = valid.map(|v| 1.0 - v);
    if holes.data.iter().all(|&h| h == 0.0) {
        return Ok(current.clone());
    }
    let relative = provider.estimate(image, camera)?;
    let fit = align_depth(&relative, &rendered, &valid)
        .map_err(|e| DepthInitError::AlignmentFailed(Box::new(e)))?;
    let depth = blend_seam(&fit.aligned, &rendered, &valid);
    let new_points = match lift_depth(camera, image, &depth, &holes, source) {
        Ok(p) => p,
        Err(DepthInitError::EmptyResult) => PointCloud::default(),
        Err(e) => return Err(e),
    };
    Ok(current.union(&new_points))
}

/// Adds a blurred-weight residual correction to hole pixels within the seam
/// band: `depth += W · r̃`, where `r̃` is the normalized convolution of the
/// residual `rendered − aligned` over valid pixels and `W` the blurred valid
/// indicator.
fn blend_seam(aligned: &DepthMap, rendered: &DepthMap, valid: &MaskBuf) -> DepthMap {
    let (w, h) = (aligned.width, aligned.height);
    let radius = (3.0 * SEAM_SIGMA_PX).ceil() as usize;
    let kernel = gaussian_kernel(SEAM_SIGMA_PX, radius);
    let ind: Vec<f64> = valid.data.iter().map(|&v| v as f64).collect();
    let resid: Vec<f64> = (0..aligned.len())
        .map(|i| {
            if valid.data[i] > 0.5 && aligned.data[i] > 0.0 {
                (rendered.data[i] - aligned.data[i]) as f64
            } else {
                0.0
            }
        })
        .collect();
    let weight = blur_plane(&ind, w, h, &kernel, Boundary::Zero);
    let num = blur_plane(&resid, w, h, &kernel, Boundary::Zero);
    let band = crate::occlusion::erode_ones(&valid.map(|v| 1.0 - v), SEAM_BAND_PX);
    let mut out = aligned.clone();
    for i in 0..out.len() {
        // Hole pixels that erosion removed are the ones within the band.
        let in_band = valid.data[i] < 0.5 && band.data[i] < 0.5;
        if in_band && weight[i] > 1e-12 && out.data[i] > 0.0 {
            let corrected = out.data[i] as f64 + weight[i] * (num[i] / weight[i]);
            if corrected > 0.0 {
                out.data[i] = corrected as f32;
            }
        }
    }
    out
}

/// Mean distance from each point to its `k` nearest neighbours.
pub fn knn_mean_distances(positions: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let n = positions.len();
    if n < 2 || k == 0 {
        return vec![0.0; n];
    }
    let k = k.min(n - 1);
    let grid = HashGrid::new(positions, k);
    (0..n).map(|i| grid.mean_knn(positions, i, k)).collect()
}

/// Uniform hash grid sized for about `k` points per cell.
struct HashGrid {
    min: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl HashGrid {
    fn new(positions: &[Vector3<f64>], k: usize) -> Self {
        let mut min = positions[0];
        let mut max = positions[0];
        for p in positions {
            min = min.inf(p);
            max = max.sup(p);
        }
        let ext = max - min;
        let volume = ext.iter().map(|e| e.max(1e-9)).product::<f64>();
        let target = (volume * (k + 1) as f64 / positions.len() as f64).cbrt();
        let cell = target.max(ext.max() / 256.0).max(1e-9);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(1 << 10));
        let cell_of = |p: &Vector3<f64>| -> usize {
            let c = [0, 1, 2].map(|a| (((p[a] - min[a]) / cell) as usize).min(dims[a] - 1));
            (c[2] * dims[1] + c[1]) * dims[0] + c[0]
        };
        let cells = dims[0] * dims[1] * dims[2];
        let mut count = vec![0usize; cells + 1];
        for p in positions {
            count[cell_of(p) + 1] += 1;
        }
        for i in 0..cells {
            count[i + 1] += count[i];
        }
        let mut fill = count.clone();
        let mut order = vec![0; positions.len()];
        for (i, p) in positions.iter().enumerate() {
            let c = cell_of(p);
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            min,
            cell,
            dims,
            start: count,
            order,
        }
    }

    fn mean_knn(&self, positions: &[Vector3<f64>], i: usize, k: usize) -> f64 {
        let p = positions[i];
        let c = [0, 1, 2].map(|a| (((p[a] - self.min[a]) / self.cell) as i64).min(self.dims[a] as i64 - 1));
        // Sorted ascending, at most k entries.
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let max_ring = *self.dims.iter().max().unwrap() as i64;
        let dims = self.dims.map(|d| d as i64);
        for ring in 0..=max_ring {
            let lo = [0, 1, 2].map(|a| (c[a] - ring).max(0));
            let hi = [0, 1, 2].map(|a| (c[a] + ring).min(dims[a] - 1));
            for qz in lo[2]..=hi[2] {
                for qy in lo[1]..=hi[1] {
                    let on_face = (qz - c[2]).abs() == ring || (qy - c[1]).abs() == ring;
                    let xs: Vec<i64> = if on_face {
                        (lo[0]..=hi[0]).collect()
                    } else {
                        [c[0] - ring, c[0] + ring]
                            .into_iter()
                            .filter(|&x| x >= 0 && x < dims[0])
                            .take(if ring == 0 { 1 } else { 2 })
                            .collect()
                    };
                    for qx in xs {
                        let cell = ((qz as usize * self.dims[1]) + qy as usize) * self.dims[0] + qx as usize;
                        for &j in &self.order[self.start[cell]..self.start[cell + 1]] {
                            if j == i {
                                continue;
                            }
                            let d = (positions[j] - p).norm();
                            if best.len() < k || d < best[k - 1] {
                                let at = best.partition_point(|&b| b <= d);
                                best.insert(at, d);
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
            // Every unvisited point is at least `ring * cell` away.
            if best.len() == k && best[k - 1] <= ring as f64 * self.cell {
                break;
            }
        }
        best.iter().sum::<f64>() / best.len() as f64
    }
}

/// One isotropic splat per point. Scale is the mean distance to the `k`
/// nearest neighbours, clamped to `[1e-4, 0.1]` of the bounding-box diagonal;
/// a lone point gets `0.01` of it. Occlusion points are mid-gray.
pub fn init_splats_from_points(points: &PointCloud, k: usize) -> SplatCloud {
    let extent = match points.bounds() {
        Some((lo, hi)) if (hi - lo).norm() > 0.0 => (hi - lo).norm(),
        _ => 1.0,
    };
    let scales = if points.len() < 2 {
        vec![0.01 * extent; points.len()]
    } else {
        knn_mean_distances(&points.positions, k)
            .into_iter()
            .map(|d| d.clamp(1e-4 * extent, 0.1 * extent))
            .collect()
    };
    let splats = points
        .positions
        .iter()
        .zip(&scales)
        .enumerate()
        .map(|(i, (p, &s))| {
            let color = if points.sources[i] == PointSource::Occlusion {
                crate::occlusion::OCCLUSION_GRAY
            } else {
                points.colors[i]
            };
            Splat::isotropic([p.x as f32, p.y as f32, p.z as f32], s as f32, INIT_OPACITY as f32, color)
        })
        .collect();
    SplatCloud::new(splats)
}
