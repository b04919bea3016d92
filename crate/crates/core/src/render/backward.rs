use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::project::{eval_alpha, Projected};
use super::{
    pixel_center, sorted_projection, RenderCotangent, RenderError, RenderGrads, RenderOptions,
    SplatGrad, TileGrid, DEPTH_ALPHA_MIN,
};
use crate::scene::{Camera, SplatCloud};

/// Screen-space partials accumulated per splat:
/// mean (2), conic (3), opacity, color (3), camera depth.
type Partial = [f64; 10];

const P_MEAN: usize = 0;
const P_CONIC: usize = 2;
const P_OPACITY: usize = 5;
const P_COLOR: usize = 6;
const P_DEPTH: usize = 9;

struct Contribution {
    pos: usize,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
    trans: f64,
}

/// Gradient of `<cotangent, render(cloud, camera)>` w.r.t. every raw splat
/// parameter. Culled splats get exactly zero.
pub fn render_gradients(
    cloud: &SplatCloud,
    camera: &Camera,
    cotangent: &RenderCotangent,
    opts: &RenderOptions,
) -> Result<RenderGrads, RenderError> {
    cotangent.check(camera)?;
    let projected = sorted_projection(cloud, camera, opts)?;
    let tiles = TileGrid::build(&projected, camera, opts.tile_size);

    let per_tile: Vec<Vec<Partial>> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &tiles.lists[t];
            let mut acc = vec![[0.0; 10]; list.len()];
            let mut contribs = Vec::new();
            for (x, y) in tiles.pixels(t, camera) {
                backward_pixel(&projected, list, camera, cotangent, x, y, &mut contribs, &mut acc);
            }
            acc
        })
        .collect();

    // Fixed tile order keeps the reduction independent of scheduling.
    let mut partials = vec![[0.0; 10]; projected.len()];
    for (t, acc) in per_tile.iter().enumerate() {
        for (&pos, part) in tiles.lists[t].iter().zip(acc) {
            let dst = &mut partials[pos as usize];
            for k in 0..10 {
                dst[k] += part[k];
            }
        }
    }

    let chained: Vec<(usize, SplatGrad)> = projected
        .par_iter()
        .zip(partials.par_iter())
        .map(|(p, part)| (p.index, chain_to_params(p, part, camera)))
        .collect();
    let mut grads = RenderGrads::zeros(cloud.len());
    for (i, g) in chained {
        grads.splats[i] = g;
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    projected: &[Projected],
    list: &[u32],
    camera: &Camera,
    cot: &RenderCotangent,
    x: usize,
    y: usize,
    contribs: &mut Vec<Contribution>,
    acc: &mut [Partial],
) {
    let (px, py) = pixel_center(x, y);
    contribs.clear();
    let mut trans = 1.0;
    let mut depth_num = 0.0;
    for (pos, &i) in list.iter().enumerate() {
        let p = &projected[i as usize];
        let Some(hit) = eval_alpha(p, px, py) else {
            continue;
        };
        depth_num += p.depth * hit.alpha * trans;
        contribs.push(Contribution {
            pos,
            alpha: hit.alpha,
            gauss: hit.gauss,
            clamped: hit.clamped,
            dx: hit.dx,
            dy: hit.dy,
            trans,
        });
        trans *= 1.0 - hit.alpha;
    }
    if contribs.is_empty() {
        return;
    }
    let alpha_acc = 1.0 - trans;
    let pix = y * camera.width + x;
    let gc = [
        cot.color.data[3 * pix] as f64,
        cot.color.data[3 * pix + 1] as f64,
        cot.color.data[3 * pix + 2] as f64,
    ];
    let gd = cot.depth.data[pix] as f64;
    let (w_depth, mut w_alpha) = if alpha_acc > DEPTH_ALPHA_MIN {
        (gd / alpha_acc, -gd * depth_num / (alpha_acc * alpha_acc))
    } else {
        (0.0, 0.0)
    };
    w_alpha += cot.alpha.data[pix] as f64;
    if gc == [0.0; 3] && w_depth == 0.0 && w_alpha == 0.0 {
        return;
    }

    let mut after = 0.0;
    for c in contribs.iter().rev() {
        let p = &projected[list[c.pos] as usize];
        let value =
            gc[0] * p.color[0] + gc[1] * p.color[1] + gc[2] * p.color[2] + w_depth * p.depth + w_alpha;
        let weight = c.alpha * c.trans;
        let d_alpha = value * c.trans - after / (1.0 - c.alpha);
        after += value * weight;

        let part = &mut acc[c.pos];
        part[P_COLOR] += gc[0] * weight;
        part[P_COLOR + 1] += gc[1] * weight;
        part[P_COLOR + 2] += gc[2] * weight;
        part[P_DEPTH] += w_depth * weight;
        if c.clamped {
            continue;
        }
        part[P_OPACITY] += d_alpha * c.gauss;
        let d_q = -0.5 * c.alpha * d_alpha;
        let [a, b, cc] = p.conic;
        part[P_MEAN] += d_q * -2.0 * (a * c.dx + b * c.dy);
        part[P_MEAN + 1] += d_q * -2.0 * (b * c.dx + cc * c.dy);
        part[P_CONIC] += d_q * c.dx * c.dx;
        part[P_CONIC + 1] += d_q * 2.0 * c.dx * c.dy;
        part[P_CONIC + 2] += d_q * c.dy * c.dy;
    }
}

/// Chains screen-space partials back through the conic inverse, EWA
/// projection, world-to-camera transform, covariance factorization,
/// quaternion normalization and the opacity sigmoid.
fn chain_to_params(p: &Projected, part: &Partial, camera: &Camera) -> SplatGrad {
    let mut out = [0.0; 14];
    out[11] = part[P_COLOR];
    out[12] = part[P_COLOR + 1];
    out[13] = part[P_COLOR + 2];
    out[10] = part[P_OPACITY] * p.opacity * (1.0 - p.opacity);

    let [a, b, c] = p.conic;
    let conic = Matrix2::new(a, b, b, c);
    let g_conic = Matrix2::new(
        part[P_CONIC],
        0.5 * part[P_CONIC + 1],
        0.5 * part[P_CONIC + 1],
        part[P_CONIC + 2],
    );
    let g_cov = -(conic * g_conic * conic);
    let g_jw = 2.0 * g_cov * p.jw * p.sigma;
    let g_sigma = p.jw.transpose() * g_cov * p.jw;
    let w2c = camera.world_to_cam().rotation;
    let g_jac = g_jw * w2c.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let t = p.t_cam;
    let (tx, ty, tz) = (t.x, t.y, t.z);
    let tz2 = tz * tz;
    let tz3 = tz2 * tz;
    let (gmx, gmy) = (part[P_MEAN], part[P_MEAN + 1]);
    let mut g_t = Vector3::new(
        gmx * fx / tz,
        gmy * fy / tz,
        -gmx * fx * tx / tz2 - gmy * fy * ty / tz2 + part[P_DEPTH],
    );
    g_t.x += g_jac[(0, 2)] * (-fx / tz2);
    g_t.y += g_jac[(1, 2)] * (-fy / tz2);
    g_t.z += g_jac[(0, 0)] * (-fx / tz2)
        + g_jac[(0, 2)] * (2.0 * fx * tx / tz3)
        + g_jac[(1, 1)] * (-fy / tz2)
        + g_jac[(1, 2)] * (2.0 * fy * ty / tz3);
    let g_mu = w2c.transpose() * g_t;
    out[0] = g_mu.x;
    out[1] = g_mu.y;
    out[2] = g_mu.z;

    // Σ = M M^T with M = R diag(s).
    let m = p.rotation * Matrix3::from_diagonal(&Vector3::from(p.scale));
    let g_m = (g_sigma + g_sigma.transpose()) * m;
    let mut g_rot = Matrix3::zeros();
    for k in 0..3 {
        let mut g_s = 0.0;
        for r in 0..3 {
            g_s += p.rotation[(r, k)] * g_m[(r, k)];
            g_rot[(r, k)] = p.scale[k] * g_m[(r, k)];
        }
        out[3 + k] = g_s * p.scale[k];
    }

    let [w, x, y, z] = p.quat_unit;
    let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let g_qn = [
        g_rot.component_mul(&dr_dw).sum(),
        g_rot.component_mul(&dr_dx).sum(),
        g_rot.component_mul(&dr_dy).sum(),
        g_rot.component_mul(&dr_dz).sum(),
    ];
    let dot: f64 = g_qn.iter().zip(&p.quat_unit).map(|(g, q)| g * q).sum();
    for k in 0..4 {
        out[6 + k] = (g_qn[k] - p.quat_unit[k] * dot) / p.quat_norm;
    }
    SplatGrad(out)
}
