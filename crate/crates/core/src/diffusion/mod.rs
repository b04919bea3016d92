//! Noise schedules, deterministic DDIM sampling and inversion, classifier-free
//! guidance, and the denoiser and codec interfaces.

mod codec;
mod denoiser;
pub mod remote;

pub use codec::{IdentityCodec, LatentCodec};
pub use denoiser::{
    Conditioning, DepthOracleDenoiser, Denoiser, OracleDenoiser, GaussianDenoiser, SceneOracleDenoiser,
    ZeroDenoiser,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("timestep {t} outside [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("timestep order violated: {t_prev} must not exceed {t}")]
    TimestepOrder { t: usize, t_prev: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("steps must be at least 1")]
    ZeroSteps,
    #[error("non-finite values after step at t={0}")]
    NonFinite(usize),
    #[error("remote model failure: {0}")]
    RemoteFailure(String),
    #[error("{0}")]
    Invalid(String),
}

/// Dense f32 tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, DiffusionError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DiffusionError::Invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_shape(&self, other: &Tensor) -> Result<(), DiffusionError> {
        if self.shape != other.shape {
            return Err(DiffusionError::ShapeMismatch(self.shape.clone(), other.shape.clone()));
        }
        Ok(())
    }
}

/// Cumulative signal rates for a scaled-linear beta schedule. Index 0 is the
/// clean signal (ᾱ = 1); indices `1..=T` follow the usual cumulative product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(1000, 0.00085, 0.012)
    }
}

impl NoiseSchedule {
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let steps = steps.max(1);
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let frac = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
            let beta = (s0 + (s1 - s0) * frac).powi(2);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self {
            steps,
            beta_start,
            beta_end,
            alpha_bar,
        }
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(DiffusionError::TimestepOutOfRange { t, max: self.steps })
    }

    /// Noise level `σ_t = √(1 − ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// Default distillation weight `w(t) = 1 − ᾱ_t`.
    pub fn weight(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(1.0 - self.alpha_bar(t)?)
    }

    /// Integer timestep for a fraction of the schedule: `round(frac·(T−1))`.
    pub fn timestep_from_fraction(&self, frac: f64) -> usize {
        (frac.clamp(0.0, 1.0) * (self.steps - 1) as f64).round() as usize
    }
}

/// Image and text guidance weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub image: f32,
    pub text: f32,
}

impl GuidanceConfig {
    pub const NONE: GuidanceConfig = GuidanceConfig { image: 1.0, text: 1.0 };
}

/// `z_t = √ᾱ_t·z + √(1−ᾱ_t)·ε`.
pub fn add_noise(z: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    z.check_shape(eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&z, &e)| (a * z as f64 + s * e as f64) as f32)
        .collect();
    Ok(Tensor {
        shape: z.shape.clone(),
        data,
    })
}

/// `ε̃ = e_none + S_I·(e_img − e_none) + S_T·(e_full − e_img)`.
pub fn cfg_combine(
    e_none: &Tensor,
    e_img: &Tensor,
    e_full: &Tensor,
    guidance: GuidanceConfig,
) -> Result<Tensor, DiffusionError> {
    e_none.check_shape(e_img)?;
    e_none.check_shape(e_full)?;
    let (si, st) = (guidance.image, guidance.text);
    let data = (0..e_none.len())
        .map(|i| {
            let (n, im, f) = (e_none.data[i], e_img.data[i], e_full.data[i]);
            n + si * (im - n) + st * (f - im)
        })
        .collect();
    Ok(Tensor {
        shape: e_none.shape.clone(),
        data,
    })
}

/// Deterministic DDIM update from `t` to `t_prev ≤ t`.
pub fn ddim_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    if t_prev > t {
        return Err(DiffusionError::TimestepOrder { t, t_prev });
    }
    transfer(z_t, eps, t, t_prev, schedule)
}

/// Moves `z` from noise level `from` to `to` along the DDIM trajectory implied
/// by `eps`. Works in either direction.
fn transfer(z: &Tensor, eps: &Tensor, from: usize, to: usize, schedule: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    z.check_shape(eps)?;
    let ab_from = schedule.alpha_bar(from)?;
    let ab_to = schedule.alpha_bar(to)?;
    if from == to {
        return Ok(z.clone());
    }
    let (a0, s0) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (a1, s1) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    let data = z
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&z, &e)| {
            let (z, e) = (z as f64, e as f64);
            let x0 = (z - s0 * e) / a0;
            (a1 * x0 + s1 * e) as f32
        })
        .collect();
    Ok(Tensor {
        shape: z.shape.clone(),
        data,
    })
}

/// Uniform sub-schedule `round(t_max·k/steps)` for `k = 0..=steps`, ascending.
pub fn sub_schedule(t_max: usize, steps: usize) -> Vec<usize> {
    (0..=steps)
        .map(|k| ((t_max * k) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Denoises `z_start` from `t_start` to 0 in `steps` guided DDIM steps and
/// returns the clean latent.
pub fn sample_latent(
    z_start: &Tensor,
    t_start: usize,
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    steps: usize,
    guidance: GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::ZeroSteps);
    }
    schedule.alpha_bar(t_start)?;
    let ts = sub_schedule(t_start, steps);
    let mut z = z_start.clone();
    for k in (1..=steps).rev() {
        let (t, t_prev) = (ts[k], ts[k - 1]);
        let eps = denoiser.predict_guided(&z, t, cond, guidance)?;
        z = ddim_step(&z, &eps, t, t_prev, schedule)?;
        if !z.all_finite() {
            return Err(DiffusionError::NonFinite(t));
        }
    }
    Ok(z)
}

/// [`sample_latent`] followed by decoding.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    z_start: &Tensor,
    t_start: usize,
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    steps: usize,
    guidance: GuidanceConfig,
    schedule: &NoiseSchedule,
    codec: &dyn LatentCodec,
) -> Result<(Tensor, crate::scene::ImageBuf), DiffusionError> {
    let z = sample_latent(z_start, t_start, denoiser, cond, steps, guidance, schedule)?;
    let x = codec.decode(&z)?;
    Ok((z, x))
}

/// Runs the DDIM recurrence forward in noise from 0 to `t_target`, using the
/// prediction at the current level for each sub-step.
///
/// With `fixed_point_iters > 0` each sub-step is refined by re-evaluating the
/// prediction at the new level, converging to the point that the matching
/// [`ddim_step`] maps back exactly. Sampling then retraces the inversion.
#[allow(clippy::too_many_arguments)]
pub fn ddim_invert(
    z: &Tensor,
    t_target: usize,
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    steps: usize,
    guidance: GuidanceConfig,
    schedule: &NoiseSchedule,
    fixed_point_iters: usize,
) -> Result<Tensor, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::ZeroSteps);
    }
    schedule.alpha_bar(t_target)?;
    let ts = sub_schedule(t_target, steps);
    let mut z = z.clone();
    for k in 0..steps {
        let (t, t_next) = (ts[k], ts[k + 1]);
        if t == t_next {
            continue;
        }
        let eps = denoiser.predict_guided(&z, t, cond, guidance)?;
        let mut next = transfer(&z, &eps, t, t_next, schedule)?;
        for _ in 0..fixed_point_iters {
            let eps = denoiser.predict_guided(&next, t_next, cond, guidance)?;
            next = transfer(&z, &eps, t, t_next, schedule)?;
        }
        if !next.all_finite() {
            return Err(DiffusionError::NonFinite(t_next));
        }
        z = next;
    }
    Ok(z)
}
