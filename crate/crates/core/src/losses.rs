//! Training objectives and their analytic gradients. Every reduction is a
//! mean over the elements that contribute, so weights do not depend on
//! resolution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{DiffusionError, NoiseSchedule, Tensor};
use crate::imageops::{blur_plane, blur_plane_adjoint, deinterleave, gaussian_kernel, interleave, Boundary};
use crate::scene::{sigmoid, DepthMap, ImageBuf, MaskBuf, SplatCloud};

/// Stabilizer in the Pearson denominator.
pub const PEARSON_EPS: f64 = 1e-8;
const STANDARDIZE_EPS: f64 = 1e-6;
const OPACITY_CLAMP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_latent: f64,
    pub lambda_image: f64,
    pub lambda_lpips: f64,
    pub lambda_anchor: f64,
    pub lambda_depth: f64,
    pub lambda_opacity: f64,
}

impl LossWeights {
    pub fn inpaint_stage() -> Self {
        Self {
            lambda_latent: 0.1,
            lambda_image: 0.01,
            lambda_lpips: 100.0,
            lambda_anchor: 10000.0,
            lambda_depth: 1000.0,
            lambda_opacity: 0.0,
        }
    }

    pub fn refine_stage() -> Self {
        Self {
            lambda_latent: 0.01,
            lambda_image: 0.01,
            lambda_lpips: 100.0,
            lambda_anchor: 0.0,
            lambda_depth: 0.0,
            lambda_opacity: 10.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [
            self.lambda_latent,
            self.lambda_image,
            self.lambda_lpips,
            self.lambda_anchor,
            self.lambda_depth,
            self.lambda_opacity,
        ]
        .iter()
        .all(|l| l.is_finite() && *l >= 0.0)
    }
}

/// Image distance with a gradient w.r.t. its first argument.
pub trait PerceptualDistance: Send + Sync {
    fn distance(&self, a: &ImageBuf, b: &ImageBuf) -> Result<(f64, Vec<f64>), LossError>;
}

/// Mean squared difference over a Gaussian pyramid of per-channel
/// standardized images; levels are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidDistance {
    pub levels: usize,
}

impl Default for PyramidDistance {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Plane with its size, for pyramid bookkeeping.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

fn downsample(p: &Plane) -> Plane {
    let blurred = blur_plane(&p.v, p.w, p.h, &BINOMIAL5, Boundary::Clamp);
    let (w, h) = (p.w.div_ceil(2), p.h.div_ceil(2));
    let mut v = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            v.push(blurred[2 * y * p.w + 2 * x]);
        }
    }
    Plane { w, h, v }
}

fn downsample_adjoint(g: &[f64], fine_w: usize, fine_h: usize) -> Vec<f64> {
    let (w, h) = (fine_w.div_ceil(2), fine_h.div_ceil(2));
    let mut up = vec![0.0; fine_w * fine_h];
    for y in 0..h {
        for x in 0..w {
            up[2 * y * fine_w + 2 * x] = g[y * w + x];
        }
    }
    blur_plane_adjoint(&up, fine_w, fine_h, &BINOMIAL5, Boundary::Clamp)
}

/// `(x − μ)/σ` with `σ = √(var + eps)`; returns the standardized plane and σ.
fn standardize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    let sd = (var + STANDARDIZE_EPS).sqrt();
    (v.iter().map(|x| (x - mu) / sd).collect(), sd)
}

fn standardize_adjoint(y: &[f64], sd: f64, g: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mg = g.iter().sum::<f64>() / n;
    let mgy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    g.iter().zip(y).map(|(gi, yi)| (gi - mg - yi * mgy) / sd).collect()
}

impl PerceptualDistance for PyramidDistance {
    fn distance(&self, a: &ImageBuf, b: &ImageBuf) -> Result<(f64, Vec<f64>), LossError> {
        if !a.same_size(b) {
            return Err(LossError::ShapeMismatch("perceptual inputs".into()));
        }
        let levels = self.levels.max(1);
        let (w, h) = (a.width, a.height);
        let pa = deinterleave(&a.data, 3);
        let pb = deinterleave(&b.data, 3);
        let mut total = 0.0;
        let mut grad_planes = Vec::with_capacity(3);
        for c in 0..3 {
            let (ya, sda) = standardize(&pa[c]);
            let (yb, _) = standardize(&pb[c]);
            let mut pyr_a = vec![Plane { w, h, v: ya.clone() }];
            let mut pyr_b = vec![Plane { w, h, v: yb }];
            for _ in 1..levels {
                pyr_a.push(downsample(pyr_a.last().unwrap()));
                pyr_b.push(downsample(pyr_b.last().unwrap()));
            }
            // Per level: mean over the level's elements of all three channels.
            let mut g_next: Option<Vec<f64>> = None;
            for l in (0..levels).rev() {
                let (la, lb) = (&pyr_a[l], &pyr_b[l]);
                let norm = 1.0 / (levels as f64 * 3.0 * la.v.len() as f64);
                let mut g: Vec<f64> = la.v.iter().zip(&lb.v).map(|(x, y)| 2.0 * norm * (x - y)).collect();
                total += la.v.iter().zip(&lb.v).map(|(x, y)| (x - y).powi(2)).sum::<f64>() * norm;
                if let Some(gn) = g_next.take() {
                    for (gi, up) in g.iter_mut().zip(downsample_adjoint(&gn, la.w, la.h)) {
                        *gi += up;
                    }
                }
                g_next = Some(g);
            }
            grad_planes.push(standardize_adjoint(&ya, sda, &g_next.unwrap()));
        }
        Ok((total, interleave_f64(&grad_planes)))
    }
}

fn interleave_f64(planes: &[Vec<f64>]) -> Vec<f64> {
    let n = planes[0].len();
    let mut out = Vec::with_capacity(n * planes.len());
    for i in 0..n {
        for p in planes {
            out.push(p[i]);
        }
    }
    out
}

/// Unweighted inpainting terms, in the order latent, image, perceptual, anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InpaintTerms {
    pub latent: f64,
    pub image: f64,
    pub perceptual: f64,
    pub anchor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintLoss {
    pub total: f64,
    pub terms: InpaintTerms,
    /// Gradient w.r.t. the latent, same layout as `z`.
    pub grad_z: Vec<f64>,
    /// Gradient w.r.t. the image, interleaved RGB.
    pub grad_x: Vec<f64>,
}

/// Area-averages `mask` onto a `lw`×`lh` grid and thresholds at 0.5.
pub fn latent_mask(mask: &MaskBuf, lw: usize, lh: usize) -> Result<Vec<bool>, LossError> {
    if lw == 0 || lh == 0 || mask.width % lw != 0 || mask.height % lh != 0 {
        return Err(LossError::ShapeMismatch(format!(
            "mask {}x{} does not tile latent {lw}x{lh}",
            mask.width, mask.height
        )));
    }
    let (fx, fy) = (mask.width / lw, mask.height / lh);
    let mut out = Vec::with_capacity(lw * lh);
    for y in 0..lh {
        for x in 0..lw {
            let mut s = 0.0;
            for yy in 0..fy {
                for xx in 0..fx {
                    s += mask.at(x * fx + xx, y * fy + yy) as f64;
                }
            }
            out.push(s / (fx * fy) as f64 >= 0.5);
        }
    }
    Ok(out)
}

/// Inpainting distillation loss. The latent term is restricted to latent
/// cells whose resampled mask is 0 (the region being generated); the anchor
/// term ties the mask-1 region to the point-cloud render `i_pc`.
#[allow(clippy::too_many_arguments)]
pub fn inpaint_loss(
    z: &Tensor,
    z_hat: &Tensor,
    x: &ImageBuf,
    x_hat: &ImageBuf,
    i_pc: &ImageBuf,
    mask: &MaskBuf,
    weights: &LossWeights,
    perceptual: &dyn PerceptualDistance,
) -> Result<InpaintLoss, LossError> {
    if z.shape != z_hat.shape {
        return Err(LossError::ShapeMismatch(format!("latents {:?} vs {:?}", z.shape, z_hat.shape)));
    }
    if !x.same_size(x_hat) || !x.same_size(i_pc) || !x.same_size(mask) {
        return Err(LossError::ShapeMismatch("image, target, point render and mask".into()));
    }
    let &[lh, lw, lc] = z.shape.as_slice() else {
        return Err(LossError::ShapeMismatch(format!("latent must be [h, w, c], got {:?}", z.shape)));
    };
    let known = latent_mask(mask, lw, lh)?;

    let mut terms = InpaintTerms::default();
    let mut g_lat = vec![0.0; z.len()];
    let n_lat = known.iter().filter(|k| !**k).count() * lc;
    if n_lat > 0 {
        let inv = 1.0 / n_lat as f64;
        for (i, (&a, &b)) in z.data.iter().zip(&z_hat.data).enumerate() {
            if !known[i / lc] {
                let d = a as f64 - b as f64;
                terms.latent += d * d * inv;
                g_lat[i] = 2.0 * d * inv;
            }
        }
    }

    let n = x.len();
    let mut g_img = vec![0.0; n];
    let inv = 1.0 / n as f64;
    for (i, (&a, &b)) in x.data.iter().zip(&x_hat.data).enumerate() {
        let d = a as f64 - b as f64;
        terms.image += d * d * inv;
        g_img[i] = 2.0 * d * inv;
    }

    let (perc, g_perc) = if weights.lambda_lpips != 0.0 {
        perceptual.distance(x, x_hat)?
    } else {
        (0.0, vec![0.0; n])
    };
    terms.perceptual = perc;

    let n_anchor = mask.data.iter().filter(|&&m| m > 0.5).count() * 3;
    let mut g_anchor = vec![0.0; n];
    if n_anchor > 0 {
        let inv = 1.0 / n_anchor as f64;
        for (i, (&a, &b)) in x.data.iter().zip(&i_pc.data).enumerate() {
            if mask.data[i / 3] > 0.5 {
                let d = a as f64 - b as f64;
                terms.anchor += d * d * inv;
                g_anchor[i] = 2.0 * d * inv;
            }
        }
    }

    let w = weights;
    let total = w.lambda_latent * terms.latent
        + w.lambda_image * terms.image
        + w.lambda_lpips * terms.perceptual
        + w.lambda_anchor * terms.anchor;
    let grad_z = g_lat.iter().map(|g| w.lambda_latent * g).collect();
    let grad_x = (0..n)
        .map(|i| w.lambda_image * g_img[i] + w.lambda_lpips * g_perc[i] + w.lambda_anchor * g_anchor[i])
        .collect();
    Ok(InpaintLoss {
        total,
        terms,
        grad_z,
        grad_x,
    })
}

/// Negated Pearson correlation over all pixels, with its gradient w.r.t. `d`.
pub fn depth_pearson_loss(d: &DepthMap, d_hat: &[f32]) -> Result<(f64, Vec<f64>), LossError> {
    if d.len() != d_hat.len() {
        return Err(LossError::ShapeMismatch(format!("{} vs {} depth values", d.len(), d_hat.len())));
    }
    let n = d.len();
    if n < 2 {
        return Err(LossError::DegenerateInput("need at least 2 pixels".into()));
    }
    let nf = n as f64;
    let md = d.data.iter().map(|&v| v as f64).sum::<f64>() / nf;
    let mh = d_hat.iter().map(|&v| v as f64).sum::<f64>() / nf;
    let dc: Vec<f64> = d.data.iter().map(|&v| v as f64 - md).collect();
    let hc: Vec<f64> = d_hat.iter().map(|&v| v as f64 - mh).collect();
    let vd = dc.iter().map(|v| v * v).sum::<f64>() / nf;
    let vh = hc.iter().map(|v| v * v).sum::<f64>() / nf;
    if vd <= 1e-14 || vh <= 1e-14 {
        return Err(LossError::DegenerateInput("depth map is constant".into()));
    }
    let cov = dc.iter().zip(&hc).map(|(a, b)| a * b).sum::<f64>() / nf;
    let denom = (vd * vh).sqrt() + PEARSON_EPS;
    let loss = -cov / denom;
    let k = cov / (denom * denom) * (vh / vd).sqrt();
    let grad = dc.iter().zip(&hc).map(|(a, b)| (-b / denom + k * a) / nf).collect();
    Ok((loss, grad))
}

/// `w(t)·mean((x − x̂)²)` with `w(t) = 1 − ᾱ_t`.
pub fn sds_loss(x: &[f32], x_hat: &[f32], t: usize, schedule: &NoiseSchedule) -> Result<(f64, Vec<f64>), LossError> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(LossError::ShapeMismatch(format!("{} vs {} values", x.len(), x_hat.len())));
    }
    let w = schedule.weight(t)?;
    let inv = 1.0 / x.len() as f64;
    let mut loss = 0.0;
    let grad = x
        .iter()
        .zip(x_hat)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            loss += d * d;
            2.0 * w * d * inv
        })
        .collect();
    Ok((w * loss * inv, grad))
}

/// Mean binary entropy of splat opacities, with the gradient w.r.t. each
/// opacity logit. Opacities are clamped to `[1e-6, 1 − 1e-6]`; clamped splats
/// get zero gradient.
pub fn opacity_loss(cloud: &SplatCloud) -> (f64, Vec<f64>) {
    let n = cloud.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = cloud
        .splats
        .iter()
        .map(|s| {
            let raw = sigmoid(s.opacity_logit as f64);
            let o = raw.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
            loss -= o * o.ln() + (1.0 - o) * (1.0 - o).ln();
            if o != raw {
                return 0.0;
            }
            // dH/dσ = −logit(σ), dσ/dℓ = σ(1 − σ)
            -(o / (1.0 - o)).ln() * o * (1.0 - o) / n
        })
        .collect();
    (loss / n, grad)
}

/// Unsharp mask `clamp(x + amount·(x − blur(x)), 0, 1)` with a 5×5 Gaussian
/// and edge clamping.
pub fn sharpen(x: &ImageBuf, amount: f64, sigma: f64) -> ImageBuf {
    if amount == 0.0 {
        return x.clone();
    }
    let k = gaussian_kernel(sigma, 2);
    let planes: Vec<Vec<f64>> = deinterleave(&x.data, 3)
        .into_iter()
        .map(|p| {
            let b = blur_plane(&p, x.width, x.height, &k, Boundary::Clamp);
            p.iter().zip(&b).map(|(v, bv)| (v + amount * (v - bv)).clamp(0.0, 1.0)).collect()
        })
        .collect();
    ImageBuf::from_vec(x.width, x.height, interleave(&planes)).expect("same size as input")
}
