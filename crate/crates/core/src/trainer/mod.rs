//! Stage orchestration: the inpainting distillation stage and the
//! refinement stage, both driven by sampled denoiser targets and stepped
//! through renderer gradients.

mod adam;
mod checkpoint;
mod densify;
mod plan;

pub use adam::{adam_step, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::Checkpoint;
pub use densify::{densify_and_prune, GradStats};
pub use plan::{lr_at, sample_timestep, DensifyConfig, GroupRates, LrSchedule, SharpenConfig, StagePlan};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    add_noise, ddim_invert, sample_latent, Conditioning, Denoiser, GuidanceConfig, LatentCodec, NoiseSchedule, Tensor,
};
use crate::losses::{depth_pearson_loss, inpaint_loss, opacity_loss, sharpen, InpaintTerms, PerceptualDistance};
use crate::render::{render, render_gradients, RenderCotangent, RenderOptions};
use crate::scene::{Camera, DepthMap, ImageBuf, MaskBuf, SplatCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Inpaint,
    Refine,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::Inpaint => 1,
            Stage::Refine => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Stage::Inpaint),
            2 => Some(Stage::Refine),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Inpaint => "inpaint",
            Stage::Refine => "refine",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("cannot train an empty splat cloud")]
    EmptyCloud,
    #[error("no training views")]
    NoViews,
    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),
    #[error("iteration {iteration}: {term} failed: {message}")]
    Term {
        iteration: usize,
        term: &'static str,
        message: String,
    },
    #[error("iteration {iteration}: {term} is not finite")]
    NonFinite { iteration: usize, term: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A training pose with its cached point-cloud render and inpainting mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    pub camera: Camera,
    pub point_render: ImageBuf,
    /// 1 where the point-cloud render is trusted, 0 where content is generated.
    pub mask: MaskBuf,
}

/// Models used by a stage. `depth` is required when the depth weight is
/// positive.
#[derive(Clone, Copy)]
pub struct StageModels<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub depth: Option<&'a dyn Denoiser>,
    pub codec: &'a dyn LatentCodec,
    pub perceptual: &'a dyn PerceptualDistance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub prompt: String,
    pub schedule: NoiseSchedule,
    pub render: RenderOptions,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt: String::new(),
            schedule: NoiseSchedule::default(),
            render: RenderOptions::default(),
        }
    }
}

/// Per-iteration diagnostics handed to the progress hook.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationReport {
    pub stage: Stage,
    pub iteration: usize,
    pub view: usize,
    pub timestep: usize,
    pub total: f64,
    pub terms: InpaintTerms,
    /// Unweighted depth term, if it was evaluated.
    pub depth: Option<f64>,
    /// Unweighted opacity term, if it was evaluated.
    pub opacity: Option<f64>,
}

/// Called after every optimizer step with the updated cloud; an error stops
/// training.
pub type ProgressHook<'a> = dyn FnMut(&IterationReport, &SplatCloud) -> Result<(), TrainError> + 'a;

/// Independent random stream for one iteration of one stage, so resuming
/// from a checkpoint replays the same draws.
pub fn iteration_rng(seed: u64, stage: Stage, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage.tag() as u64) << 48) | iteration as u64);
    rng
}

fn normal_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor { shape, data }
}

fn image_tensor(img: &ImageBuf) -> Tensor {
    Tensor {
        shape: vec![img.height, img.width, 3],
        data: img.data.clone(),
    }
}

/// First stage: inpainting distillation with the depth term.
pub fn run_inpaint_stage(
    cloud: SplatCloud,
    plan: &StagePlan,
    models: StageModels<'_>,
    views: &[TrainView],
    settings: &TrainSettings,
) -> Result<SplatCloud, TrainError> {
    run_stage(Stage::Inpaint, cloud, plan, models, views, settings, 0, &mut |_, _| Ok(()))
}

/// Second stage: text-conditioned refinement with sharpened targets and the
/// opacity term.
pub fn run_refine_stage(
    cloud: SplatCloud,
    plan: &StagePlan,
    models: StageModels<'_>,
    views: &[TrainView],
    settings: &TrainSettings,
) -> Result<SplatCloud, TrainError> {
    run_stage(Stage::Refine, cloud, plan, models, views, settings, 0, &mut |_, _| Ok(()))
}

/// Runs iterations `start_iteration..plan.iterations` of `stage`. Starting at
/// 0 resets the optimizer moments; a resumed run keeps them.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    stage: Stage,
    mut cloud: SplatCloud,
    plan: &StagePlan,
    models: StageModels<'_>,
    views: &[TrainView],
    settings: &TrainSettings,
    start_iteration: usize,
    hook: &mut ProgressHook<'_>,
) -> Result<SplatCloud, TrainError> {
    plan.validate().map_err(TrainError::InvalidPlan)?;
    if start_iteration >= plan.iterations {
        return Ok(cloud);
    }
    if cloud.is_empty() {
        return Err(TrainError::EmptyCloud);
    }
    if views.is_empty() {
        return Err(TrainError::NoViews);
    }
    if plan.weights.lambda_depth > 0.0 && models.depth.is_none() {
        return Err(TrainError::InvalidPlan("depth weight is positive but no depth denoiser was given".into()));
    }
    if start_iteration == 0 {
        cloud.reset_optimizer();
    }
    let mut ctx = StepContext {
        stage,
        plan,
        models,
        views,
        settings,
        warned_vjp: false,
        stats: GradStats::new(cloud.len()),
    };
    for iteration in start_iteration..plan.iterations {
        let report = ctx.step(&mut cloud, iteration)?;
        log::debug!(
            "{stage} {iteration}: view {} t {} loss {:.6}",
            report.view,
            report.timestep,
            report.total
        );
        hook(&report, &cloud)?;
    }
    Ok(cloud)
}

struct StepContext<'a> {
    stage: Stage,
    plan: &'a StagePlan,
    models: StageModels<'a>,
    views: &'a [TrainView],
    settings: &'a TrainSettings,
    warned_vjp: bool,
    stats: GradStats,
}

impl StepContext<'_> {
    fn step(&mut self, cloud: &mut SplatCloud, iteration: usize) -> Result<IterationReport, TrainError> {
        let term_err = |term: &'static str| move |e: &dyn std::fmt::Display| TrainError::Term {
            iteration,
            term,
            message: e.to_string(),
        };
        let plan = self.plan;
        let schedule = &self.settings.schedule;
        let m = self.models;
        let mut rng = iteration_rng(self.settings.seed, self.stage, iteration);
        let vi = rng.random_range(0..self.views.len());
        let view = &self.views[vi];
        let cam = &view.camera;

        let out = render(cloud, cam, &self.settings.render).map_err(|e| term_err("render")(&e))?;
        let z = m.codec.encode(&out.color).map_err(|e| term_err("encode")(&e))?;
        let t = sample_timestep(plan.t_range, &mut rng, schedule);

        let cond = match self.stage {
            Stage::Inpaint => {
                let masked = ImageBuf::from_fn(cam.width, cam.height, |x, y| {
                    let k = view.mask.at(x, y);
                    view.point_render.pixel(x, y).map(|c| c * k)
                });
                Conditioning {
                    prompt: self.settings.prompt.clone(),
                    image: Some(image_tensor(&masked)),
                    mask: Some(Tensor {
                        shape: vec![cam.height, cam.width, 1],
                        data: view.mask.data.clone(),
                    }),
                    view: Some(*cam),
                }
            }
            Stage::Refine => Conditioning::text(self.settings.prompt.clone()).with_view(*cam),
        };

        let z_t = if plan.use_inversion {
            ddim_invert(&z, t, m.denoiser, &cond, plan.sample_steps, plan.guidance, schedule, plan.inversion_refinements)
        } else {
            let eps = normal_tensor(z.shape.clone(), &mut rng);
            add_noise(&z, t, &eps, schedule)
        }
        .map_err(|e| term_err("noising")(&e))?;
        let z_hat = sample_latent(&z_t, t, m.denoiser, &cond, plan.sample_steps, plan.guidance, schedule)
            .map_err(|e| term_err("sampling")(&e))?;
        let mut x_hat = m.codec.decode(&z_hat).map_err(|e| term_err("decode")(&e))?;
        if let Some(s) = plan.sharpen {
            x_hat = sharpen(&x_hat, s.amount, s.sigma);
        }

        let w = &plan.weights;
        let loss = inpaint_loss(&z, &z_hat, &out.color, &x_hat, &view.point_render, &view.mask, w, m.perceptual)
            .map_err(|e| term_err("inpaint loss")(&e))?;
        let mut total = loss.total;
        let mut cot = RenderCotangent::zeros(cam.width, cam.height);
        for (c, g) in cot.color.data.iter_mut().zip(&loss.grad_x) {
            *c = *g as f32;
        }
        if w.lambda_latent > 0.0 && loss.grad_z.iter().any(|&g| g != 0.0) {
            let gz = Tensor {
                shape: z.shape.clone(),
                data: loss.grad_z.iter().map(|&g| g as f32).collect(),
            };
            match m.codec.encode_vjp(cam.width, cam.height, &gz) {
                Some(g) => {
                    for (c, v) in cot.color.data.iter_mut().zip(g) {
                        *c += v;
                    }
                }
                None if !self.warned_vjp => {
                    log::warn!("codec has no encoder gradient; the latent term does not reach the splats");
                    self.warned_vjp = true;
                }
                None => {}
            }
        }

        let mut depth_term = None;
        if w.lambda_depth > 0.0 && iteration % plan.depth_interval == 0 {
            let d_hat = self.sample_depth(&x_hat, cam, &mut rng).map_err(|e| term_err("depth sampling")(&e))?;
            let (l, g) = depth_pearson_loss(&out.depth, &d_hat.data).map_err(|e| term_err("depth loss")(&e))?;
            total += w.lambda_depth * l;
            for (c, gv) in cot.depth.data.iter_mut().zip(&g) {
                *c = (w.lambda_depth * gv) as f32;
            }
            depth_term = Some(l);
        }

        let mut grads = render_gradients(cloud, cam, &cot, &self.settings.render).map_err(|e| term_err("render gradients")(&e))?;
        let mut opacity_term = None;
        if w.lambda_opacity > 0.0 && self.stage == Stage::Refine {
            let (l, g) = opacity_loss(cloud);
            total += w.lambda_opacity * l;
            for (sg, gv) in grads.splats.iter_mut().zip(&g) {
                sg.0[10] += w.lambda_opacity * gv;
            }
            opacity_term = Some(l);
        }

        if !total.is_finite() {
            return Err(TrainError::NonFinite { iteration, term: "loss" });
        }
        if !grads.all_finite() {
            return Err(TrainError::NonFinite { iteration, term: "gradient" });
        }
        adam_step(cloud, &grads, &plan.rates.per_param(iteration as u64));
        if !cloud.all_finite() {
            return Err(TrainError::NonFinite { iteration, term: "parameters" });
        }

        if let Some(cfg) = &plan.densify {
            self.stats.accumulate(&grads);
            if (iteration + 1) % cfg.interval.max(1) == 0 {
                *cloud = densify_and_prune(cloud, &self.stats, cfg);
                self.stats = GradStats::new(cloud.len());
                if cloud.is_empty() {
                    return Err(TrainError::EmptyCloud);
                }
            }
        }

        Ok(IterationReport {
            stage: self.stage,
            iteration,
            view: vi,
            timestep: t,
            total,
            terms: loss.terms,
            depth: depth_term,
            opacity: opacity_term,
        })
    }

    /// Samples relative depth from pure noise, conditioned on the image target.
    fn sample_depth(&self, x_hat: &ImageBuf, cam: &Camera, rng: &mut ChaCha8Rng) -> Result<DepthMap, crate::diffusion::DiffusionError> {
        let schedule = &self.settings.schedule;
        let model = self.models.depth.expect("checked before the loop");
        let noise = normal_tensor(vec![cam.height, cam.width, 1], rng);
        let cond = Conditioning {
            image: Some(image_tensor(x_hat)),
            view: Some(*cam),
            ..Default::default()
        };
        let d = sample_latent(&noise, schedule.steps, model, &cond, self.plan.depth_steps, GuidanceConfig::NONE, schedule)?;
        DepthMap::from_vec(cam.width, cam.height, d.data).map_err(|e| crate::diffusion::DiffusionError::Invalid(e.to_string()))
    }
}
