//! Depth-sorted alpha compositing of Gaussian splats with analytic gradients.
//!
//! Each splat is projected with the EWA perspective Jacobian, dilated by
//! [`DILATION_PX2`], and composited front to back:
//! `C = Σ c_i α_i Π_{j<i} (1 - α_j)` with `α_i = min(0.99, σ_i exp(-q_i / 2))`.
//! Contributions below `1/255` are skipped. The tiled [`render`] and the
//! per-pixel [`render_bruteforce`] share the pixel compositor, so they agree to
//! the last bit on any scene.

mod backward;
mod project;

use rayon::prelude::*;
use thiserror::Error;

use crate::scene::{Camera, DepthMap, GeometryError, ImageBuf, Raster, SplatCloud, PARAMS_PER_SPLAT};

pub use backward::render_gradients;
use project::{eval_alpha, project_all, CameraContext, Projected};

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const DILATION_PX2: f64 = 0.3;
/// Accumulated alpha below which the depth estimate is reported as invalid (0).
pub const DEPTH_ALPHA_MIN: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("projected covariance of splat {index} is not invertible")]
    DegenerateCovariance { index: usize },
    #[error("cannot render an empty splat cloud")]
    EmptyCloud,
    #[error("upstream gradient is {got:?}, expected {want:?}")]
    SizeMismatch { want: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Splats whose camera-space depth is at or below this are culled.
    pub near: f64,
    pub tile_size: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            near: 0.01,
            tile_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ImageBuf,
    /// Alpha-weighted camera-space depth normalized by accumulated alpha.
    pub depth: DepthMap,
    pub alpha: Raster<1>,
}

/// Cotangent of a render: `d(loss)/d(color, depth, alpha)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderCotangent {
    pub color: ImageBuf,
    pub depth: DepthMap,
    pub alpha: Raster<1>,
}

impl RenderCotangent {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: ImageBuf::new(width, height),
            depth: DepthMap::new(width, height),
            alpha: Raster::new(width, height),
        }
    }

    fn check(&self, camera: &Camera) -> Result<(), RenderError> {
        let want = (camera.width, camera.height);
        for got in [
            (self.color.width, self.color.height),
            (self.depth.width, self.depth.height),
            (self.alpha.width, self.alpha.height),
        ] {
            if got != want {
                return Err(RenderError::SizeMismatch { want, got });
            }
        }
        Ok(())
    }
}

/// Gradient of a scalar loss w.r.t. the raw parameters of one splat, in the
/// layout of [`crate::scene::Splat::to_params`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatGrad(pub [f64; PARAMS_PER_SPLAT]);

impl SplatGrad {
    pub fn mu(&self) -> &[f64] {
        &self.0[0..3]
    }
    pub fn log_scale(&self) -> &[f64] {
        &self.0[3..6]
    }
    pub fn quat(&self) -> &[f64] {
        &self.0[6..10]
    }
    pub fn opacity_logit(&self) -> f64 {
        self.0[10]
    }
    pub fn color(&self) -> &[f64] {
        &self.0[11..14]
    }
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub splats: Vec<SplatGrad>,
}

impl RenderGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            splats: vec![SplatGrad::default(); n],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.splats.iter().all(|g| g.0.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &RenderGrads) {
        for (a, b) in self.splats.iter_mut().zip(&other.splats) {
            for (x, y) in a.0.iter_mut().zip(&b.0) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct PixelOut {
    color: [f64; 3],
    depth_num: f64,
    alpha: f64,
}

impl PixelOut {
    fn depth(&self) -> f64 {
        if self.alpha > DEPTH_ALPHA_MIN {
            self.depth_num / self.alpha
        } else {
            0.0
        }
    }
}

#[inline]
fn pixel_center(x: usize, y: usize) -> (f64, f64) {
    (x as f64 + 0.5, y as f64 + 0.5)
}

/// Composites the given depth-ordered splats at one pixel.
#[inline]
fn composite<'a>(splats: impl Iterator<Item = &'a Projected>, px: f64, py: f64) -> PixelOut {
    let mut out = PixelOut::default();
    let mut trans = 1.0;
    for p in splats {
        let Some(hit) = eval_alpha(p, px, py) else {
            continue;
        };
        let w = hit.alpha * trans;
        out.color[0] += p.color[0] * w;
        out.color[1] += p.color[1] * w;
        out.color[2] += p.color[2] * w;
        out.depth_num += p.depth * w;
        trans *= 1.0 - hit.alpha;
    }
    out.alpha = 1.0 - trans;
    out
}

fn sorted_projection(
    cloud: &SplatCloud,
    camera: &Camera,
    opts: &RenderOptions,
) -> Result<Vec<Projected>, RenderError> {
    if cloud.is_empty() {
        return Err(RenderError::EmptyCloud);
    }
    camera.validate()?;
    let ctx = CameraContext::new(camera, opts.near);
    let mut projected = project_all(&cloud.splats, &ctx)?;
    // Stable: equal depths keep storage order.
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    Ok(projected)
}

pub(crate) struct TileGrid {
    pub size: usize,
    pub cols: usize,
    /// Per tile, positions into the sorted projection list, in depth order.
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    fn build(projected: &[Projected], camera: &Camera, size: usize) -> Self {
        let size = size.max(1);
        let cols = camera.width.div_ceil(size);
        let mut lists = vec![Vec::new(); cols * camera.height.div_ceil(size)];
        for (pos, p) in projected.iter().enumerate() {
            let Some([x0, y0, x1, y1]) = p.bbox else {
                continue;
            };
            for ty in y0 / size..=y1 / size {
                for tx in x0 / size..=x1 / size {
                    lists[ty * cols + tx].push(pos as u32);
                }
            }
        }
        Self {
            size,
            cols,
            lists,
        }
    }

    fn pixels(&self, tile: usize, camera: &Camera) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.cols, tile / self.cols);
        let x0 = tx * self.size;
        let y0 = ty * self.size;
        let x1 = (x0 + self.size).min(camera.width);
        let y1 = (y0 + self.size).min(camera.height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

fn render_pixels(
    cloud: &SplatCloud,
    camera: &Camera,
    opts: &RenderOptions,
) -> Result<Vec<PixelOut>, RenderError> {
    let projected = sorted_projection(cloud, camera, opts)?;
    let tiles = TileGrid::build(&projected, camera, opts.tile_size);
    let per_tile: Vec<Vec<(usize, PixelOut)>> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &tiles.lists[t];
            tiles
                .pixels(t, camera)
                .map(|(x, y)| {
                    let (px, py) = pixel_center(x, y);
                    let out = composite(list.iter().map(|&i| &projected[i as usize]), px, py);
                    (y * camera.width + x, out)
                })
                .collect()
        })
        .collect();
    let mut pixels = vec![PixelOut::default(); camera.pixel_count()];
    for tile in per_tile {
        for (i, out) in tile {
            pixels[i] = out;
        }
    }
    Ok(pixels)
}

fn to_output(pixels: &[PixelOut], camera: &Camera) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let mut color = ImageBuf::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let mut alpha = Raster::<1>::new(w, h);
    for (i, p) in pixels.iter().enumerate() {
        color.data[3 * i] = p.color[0] as f32;
        color.data[3 * i + 1] = p.color[1] as f32;
        color.data[3 * i + 2] = p.color[2] as f32;
        depth.data[i] = p.depth() as f32;
        alpha.data[i] = p.alpha as f32;
    }
    RenderOutput {
        color,
        depth,
        alpha,
    }
}

/// Tiled forward render.
pub fn render(
    cloud: &SplatCloud,
    camera: &Camera,
    opts: &RenderOptions,
) -> Result<RenderOutput, RenderError> {
    let pixels = render_pixels(cloud, camera, opts)?;
    Ok(to_output(&pixels, camera))
}

/// Reference renderer: every pixel visits every splat in depth order. Only
/// meant for small scenes.
pub fn render_bruteforce(cloud: &SplatCloud, camera: &Camera) -> Result<RenderOutput, RenderError> {
    let opts = RenderOptions::default();
    let projected = sorted_projection(cloud, camera, &opts)?;
    let mut pixels = Vec::with_capacity(camera.pixel_count());
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (px, py) = pixel_center(x, y);
            pixels.push(composite(projected.iter(), px, py));
        }
    }
    Ok(to_output(&pixels, camera))
}

/// The scalar `<cotangent, render(cloud)>` evaluated in `f64`, i.e. the
/// function whose gradient [`render_gradients`] returns.
pub fn render_objective(
    cloud: &SplatCloud,
    camera: &Camera,
    cotangent: &RenderCotangent,
    opts: &RenderOptions,
) -> Result<f64, RenderError> {
    cotangent.check(camera)?;
    let pixels = render_pixels(cloud, camera, opts)?;
    let mut total = 0.0;
    for (i, p) in pixels.iter().enumerate() {
        for c in 0..3 {
            total += cotangent.color.data[3 * i + c] as f64 * p.color[c];
        }
        total += cotangent.depth.data[i] as f64 * p.depth();
        total += cotangent.alpha.data[i] as f64 * p.alpha;
    }
    Ok(total)
}
