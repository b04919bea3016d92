use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{GuidanceConfig, NoiseSchedule};
use crate::losses::LossWeights;

/// Learning rate held at `initial` for `warmup_steps`, then interpolated
/// log-linearly to `final_lr` over `decay_steps` and held there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            final_lr: lr,
            warmup_steps: 0,
            decay_steps: 0,
        }
    }

    pub fn decay(initial: f64, final_lr: f64, warmup_steps: u64, decay_steps: u64) -> Self {
        Self {
            initial,
            final_lr,
            warmup_steps,
            decay_steps,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.initial > 0.0 && self.final_lr > 0.0 && self.initial.is_finite() && self.final_lr.is_finite()
    }

    /// Scales both endpoints by `k`.
    pub fn scaled(self, k: f64) -> Self {
        Self {
            initial: self.initial * k,
            final_lr: self.final_lr * k,
            ..self
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    if step <= schedule.warmup_steps || schedule.initial == schedule.final_lr {
        return schedule.initial;
    }
    let frac = if schedule.decay_steps == 0 {
        1.0
    } else {
        ((step - schedule.warmup_steps) as f64 / schedule.decay_steps as f64).clamp(0.0, 1.0)
    };
    schedule.initial * (schedule.final_lr / schedule.initial).powf(frac)
}

/// Per-group learning rates for the raw splat parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub means: LrSchedule,
    pub scales: LrSchedule,
    pub rotation: LrSchedule,
    pub opacity: LrSchedule,
    pub color: LrSchedule,
}

impl GroupRates {
    pub fn inpaint_stage() -> Self {
        Self {
            means: LrSchedule::decay(0.01, 0.00005, 5000, 100_000),
            scales: LrSchedule::decay(0.005, 0.0001, 7000, 10_000),
            rotation: LrSchedule::constant(0.01),
            opacity: LrSchedule::constant(0.01),
            color: LrSchedule::constant(0.001),
        }
    }

    pub fn refine_stage() -> Self {
        Self {
            means: LrSchedule::decay(0.0001, 0.0000005, 750, 3000),
            scales: LrSchedule::constant(0.0001),
            rotation: LrSchedule::constant(0.01),
            opacity: LrSchedule::constant(0.01),
            color: LrSchedule::constant(0.001),
        }
    }

    /// Learning rate of each of the 14 raw parameters at `step`.
    pub fn per_param(&self, step: u64) -> [f64; crate::scene::PARAMS_PER_SPLAT] {
        let m = lr_at(&self.means, step);
        let s = lr_at(&self.scales, step);
        let r = lr_at(&self.rotation, step);
        let o = lr_at(&self.opacity, step);
        let c = lr_at(&self.color, step);
        [m, m, m, s, s, s, r, r, r, r, o, c, c, c]
    }

    fn all(&self) -> [&LrSchedule; 5] {
        [&self.means, &self.scales, &self.rotation, &self.opacity, &self.color]
    }
}

/// Unsharp-mask settings applied to sampled targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpenConfig {
    pub amount: f64,
    pub sigma: f64,
}

impl Default for SharpenConfig {
    fn default() -> Self {
        Self { amount: 0.5, sigma: 1.0 }
    }
}

/// Optional clone/split/prune pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    /// Run every this many iterations.
    pub interval: usize,
    /// Mean positional gradient norm above which a splat is cloned or split.
    pub grad_threshold: f64,
    /// Splats whose largest scale exceeds this are split, smaller ones cloned.
    pub split_scale: f64,
    pub min_opacity: f64,
    pub max_splats: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            grad_threshold: 2e-4,
            split_scale: 0.05,
            min_opacity: 0.005,
            max_splats: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub iterations: usize,
    /// Timestep fractions drawn uniformly from this interval.
    pub t_range: (f64, f64),
    pub guidance: GuidanceConfig,
    pub weights: LossWeights,
    pub sample_steps: usize,
    pub use_inversion: bool,
    /// Fixed-point refinements per inversion sub-step (0 = plain inversion).
    pub inversion_refinements: usize,
    pub sharpen: Option<SharpenConfig>,
    /// Model id of the image denoiser for this stage.
    pub denoiser_model: String,
    /// Steps when sampling depth from pure noise.
    pub depth_steps: usize,
    /// Evaluate the depth term every this many iterations.
    pub depth_interval: usize,
    pub rates: GroupRates,
    pub densify: Option<DensifyConfig>,
}

impl StagePlan {
    pub fn inpaint_stage() -> Self {
        Self {
            iterations: 15_000,
            t_range: (0.1, 0.95),
            guidance: GuidanceConfig { image: 1.8, text: 7.5 },
            weights: LossWeights::inpaint_stage(),
            sample_steps: 25,
            use_inversion: true,
            inversion_refinements: 5,
            sharpen: None,
            denoiser_model: "inpaint".into(),
            depth_steps: 25,
            depth_interval: 1,
            rates: GroupRates::inpaint_stage(),
            densify: None,
        }
    }

    pub fn refine_stage() -> Self {
        Self {
            iterations: 3000,
            t_range: (0.1, 0.3),
            guidance: GuidanceConfig { image: 1.0, text: 7.5 },
            weights: LossWeights::refine_stage(),
            sample_steps: 100,
            use_inversion: true,
            inversion_refinements: 5,
            sharpen: Some(SharpenConfig::default()),
            denoiser_model: "text".into(),
            depth_steps: 25,
            depth_interval: 1,
            rates: GroupRates::refine_stage(),
            densify: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.t_range;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(format!("timestep interval ({lo}, {hi}) must lie inside (0, 1)"));
        }
        if self.sample_steps == 0 || self.depth_steps == 0 || self.depth_interval == 0 {
            return Err("sample_steps, depth_steps and depth_interval must be positive".into());
        }
        if !self.weights.is_valid() {
            return Err("loss weights must be finite and non-negative".into());
        }
        if !self.rates.all().iter().all(|r| r.is_valid()) {
            return Err("learning rates must be positive".into());
        }
        if !(self.guidance.image.is_finite() && self.guidance.text.is_finite())
            || self.guidance.image < 0.0
            || self.guidance.text < 0.0
        {
            return Err("guidance weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Uniform fraction in `range` mapped to an integer step.
pub fn sample_timestep(range: (f64, f64), rng: &mut impl Rng, schedule: &NoiseSchedule) -> usize {
    let (lo, hi) = range;
    let frac = if lo >= hi { lo } else { rng.random_range(lo..=hi) };
    schedule.timestep_from_fraction(frac)
}
