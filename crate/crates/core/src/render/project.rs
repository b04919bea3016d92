use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::{RenderError, ALPHA_MAX, ALPHA_MIN, DILATION_PX2};
use crate::scene::{sigmoid, Camera, GeometryError, Splat};

pub(crate) struct CameraContext {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl CameraContext {
    pub fn new(camera: &Camera, near: f64) -> Self {
        let w2c = camera.world_to_cam();
        Self {
            rot: w2c.rotation,
            trans: w2c.translation,
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            width: camera.width,
            height: camera.height,
            near,
        }
    }
}

/// A splat projected into one camera, together with the intermediates the
/// backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct Projected {
    pub index: usize,
    pub mean: [f64; 2],
    /// Inverse of the dilated 2D covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Inclusive pixel bounds `[x0, y0, x1, y1]` outside which `α < 1/255`.
    pub bbox: Option<[usize; 4]>,
    pub t_cam: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: [f64; 3],
    pub quat_unit: [f64; 4],
    pub quat_norm: f64,
    pub sigma: Matrix3<f64>,
    pub jw: Matrix2x3<f64>,
}

pub(crate) struct AlphaHit {
    pub alpha: f64,
    pub gauss: f64,
    pub clamped: bool,
    pub dx: f64,
    pub dy: f64,
}

#[inline]
pub(crate) fn eval_alpha(p: &Projected, px: f64, py: f64) -> Option<AlphaHit> {
    let dx = px - p.mean[0];
    let dy = py - p.mean[1];
    let [a, b, c] = p.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    let gauss = (-0.5 * q).exp();
    let raw = p.opacity * gauss;
    if !(raw >= ALPHA_MIN) {
        return None;
    }
    let clamped = raw > ALPHA_MAX;
    Some(AlphaHit {
        alpha: if clamped { ALPHA_MAX } else { raw },
        gauss,
        clamped,
        dx,
        dy,
    })
}

pub(crate) fn unit_quat_rotation(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Returns `None` for splats at or behind the near plane.
pub(crate) fn project_splat(
    splat: &Splat,
    index: usize,
    ctx: &CameraContext,
) -> Result<Option<Projected>, RenderError> {
    let mu = splat.mean();
    let t = ctx.rot * mu + ctx.trans;
    if t.z <= ctx.near {
        return Ok(None);
    }
    let qraw = splat.quat.map(|v| v as f64);
    let qnorm = qraw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qnorm == 0.0 {
        return Err(GeometryError::ZeroQuaternion.into());
    }
    let qn = qraw.map(|v| v / qnorm);
    let rotation = unit_quat_rotation(qn);
    let scale = splat.scale();
    let m = rotation * Matrix3::from_diagonal(&Vector3::from(scale));
    let sigma = m * m.transpose();

    let (tx, ty, tz) = (t.x, t.y, t.z);
    let jac = Matrix2x3::new(
        ctx.fx / tz,
        0.0,
        -ctx.fx * tx / (tz * tz),
        0.0,
        ctx.fy / tz,
        -ctx.fy * ty / (tz * tz),
    );
    let jw = jac * ctx.rot;
    let cov = jw * sigma * jw.transpose() + Matrix2::identity() * DILATION_PX2;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return Err(RenderError::DegenerateCovariance { index });
    }
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    let mean = [ctx.fx * tx / tz + ctx.cx, ctx.fy * ty / tz + ctx.cy];
    if !mean.iter().chain(conic.iter()).all(|v| v.is_finite()) {
        return Err(RenderError::DegenerateCovariance { index });
    }
    let opacity = sigmoid(splat.opacity_logit as f64);
    let bbox = pixel_bounds(mean, &cov, opacity, ctx);
    Ok(Some(Projected {
        index,
        mean,
        conic,
        depth: tz,
        opacity,
        color: splat.color.map(|c| c as f64),
        bbox,
        t_cam: t,
        rotation,
        scale,
        quat_unit: qn,
        quat_norm: qnorm,
        sigma,
        jw,
    }))
}

/// Conservative pixel box of the ellipse where `σ exp(-q/2) >= 1/255`.
fn pixel_bounds(
    mean: [f64; 2],
    cov: &Matrix2<f64>,
    opacity: f64,
    ctx: &CameraContext,
) -> Option<[usize; 4]> {
    if !(opacity >= ALPHA_MIN) {
        return None;
    }
    let qmax = 2.0 * (opacity / ALPHA_MIN).ln();
    let rx = (qmax * cov[(0, 0)]).sqrt();
    let ry = (qmax * cov[(1, 1)]).sqrt();
    // One extra pixel of margin absorbs rounding at the ellipse boundary.
    let x0 = (mean[0] - rx - 0.5).ceil() - 1.0;
    let x1 = (mean[0] + rx - 0.5).floor() + 1.0;
    let y0 = (mean[1] - ry - 0.5).ceil() - 1.0;
    let y1 = (mean[1] + ry - 0.5).floor() + 1.0;
    let (w, h) = (ctx.width as f64, ctx.height as f64);
    if x1 < 0.0 || y1 < 0.0 || x0 >= w || y0 >= h {
        return None;
    }
    Some([
        x0.max(0.0) as usize,
        y0.max(0.0) as usize,
        x1.min(w - 1.0) as usize,
        y1.min(h - 1.0) as usize,
    ])
}

pub(crate) fn project_all(splats: &[Splat], ctx: &CameraContext) -> Result<Vec<Projected>, RenderError> {
    let results: Vec<Result<Option<Projected>, RenderError>> = splats
        .par_iter()
        .enumerate()
        .map(|(i, s)| project_splat(s, i, ctx))
        .collect();
    let mut out = Vec::with_capacity(splats.len());
    for r in results {
        if let Some(p) = r? {
            out.push(p);
        }
    }
    Ok(out)
}
