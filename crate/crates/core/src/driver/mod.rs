//! Command implementations behind the CLI: configuration, model selection,
//! on-disk layout of artifacts and stage ordering.

mod config;

pub use config::{Endpoints, FixtureScene, OutpaintConfig, PipelineConfig, MOCK_IDENTITY, MOCK_ORACLE, MOCK_ZERO};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::depth_init::{DepthProvider, GroundTruthDepth};
use crate::diffusion::remote::{RemoteModel, DEPTH_ESTIMATE_MODEL};
use crate::diffusion::{Denoiser, DepthOracleDenoiser, IdentityCodec, LatentCodec, NoiseSchedule, SceneOracleDenoiser, ZeroDenoiser};
use crate::io::{self, PoseEntry, PoseFile, PoseRole};
use crate::losses::PyramidDistance;
use crate::occlusion::OccupancyGrid;
use crate::pipeline::{initialize, point_render_and_mask, prepare_views, Outpainter};
use crate::render::{render, RenderOptions};
use crate::scene::{Camera, SplatCloud};
use crate::synthetic::{two_room_trajectory, GroundTruth, SyntheticScene};
use crate::trainer::{run_stage, Checkpoint, Stage, StageModels, TrainError, TrainSettings};

/// Model id used for remote codec requests.
pub const CODEC_MODEL: &str = "codec";
/// Model id used for remote depth sampling.
pub const DEPTH_MODEL: &str = "depth";

#[derive(Debug, Error)]
pub enum DriverError {
    /// Bad input detected before any work (exit code 1).
    #[error("{0}")]
    Validation(String),
    /// Failure while running (exit code 2).
    #[error("{0}")]
    Runtime(String),
}

impl DriverError {
    pub fn kind(&self) -> &'static str {
        match self {
            DriverError::Validation(_) => "validation",
            DriverError::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            DriverError::Validation(_) => 1,
            DriverError::Runtime(_) => 2,
        }
    }
}

fn runtime<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> DriverError + '_ {
    move |e| DriverError::Runtime(format!("{context}: {e}"))
}

/// Artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn init_dir(&self) -> PathBuf {
        self.root.join("init")
    }
    pub fn points(&self) -> PathBuf {
        self.init_dir().join("points.ply")
    }
    pub fn occlusion(&self) -> PathBuf {
        self.init_dir().join("occlusion.ply")
    }
    pub fn grid(&self) -> PathBuf {
        self.init_dir().join("grid.occg")
    }
    pub fn init_cloud(&self) -> PathBuf {
        self.init_dir().join("cloud.ply")
    }
    pub fn masks_dir(&self) -> PathBuf {
        self.init_dir().join("masks")
    }
    pub fn point_renders_dir(&self) -> PathBuf {
        self.init_dir().join("point_renders")
    }
    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.name()))
    }
    pub fn stage_cloud(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{}.ply", stage.name()))
    }
    /// Latest cloud, kept for the viewer.
    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.ply")
    }
    pub fn renders_dir(&self) -> PathBuf {
        self.root.join("renders")
    }
}

/// Instantiated models for a run.
pub struct Backends {
    pub schedule: NoiseSchedule,
    pub codec: Arc<dyn LatentCodec>,
    pub inpaint: Box<dyn Denoiser>,
    pub text: Box<dyn Denoiser>,
    pub depth: Box<dyn Denoiser>,
    pub depth_estimate: Box<dyn DepthProvider>,
}

pub fn fixture_scene(f: FixtureScene) -> Arc<dyn GroundTruth> {
    match f {
        FixtureScene::TwoRoom => Arc::new(SyntheticScene::two_room()),
    }
}

impl Backends {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, DriverError> {
        let schedule = NoiseSchedule::default();
        let scene = cfg.fixture.map(fixture_scene);
        let need_scene = || {
            scene
                .clone()
                .ok_or_else(|| DriverError::Validation("mock:oracle endpoints need a fixture scene".into()))
        };
        let e = &cfg.denoisers;
        let codec: Arc<dyn LatentCodec> = match e.codec.as_str() {
            MOCK_IDENTITY => Arc::new(IdentityCodec::new(false)),
            url => Arc::new(RemoteModel::new(url, CODEC_MODEL)),
        };
        let image_model = |endpoint: &str, model: &str| -> Result<Box<dyn Denoiser>, DriverError> {
            Ok(match endpoint {
                MOCK_ORACLE => Box::new(SceneOracleDenoiser::new(need_scene()?, codec.clone(), schedule.clone())),
                MOCK_ZERO => Box::new(ZeroDenoiser),
                url => Box::new(RemoteModel::new(url, model)),
            })
        };
        let inpaint = image_model(&e.inpaint, &cfg.inpaint.denoiser_model)?;
        let text = image_model(&e.text, &cfg.refine.denoiser_model)?;
        let depth: Box<dyn Denoiser> = match e.depth.as_str() {
            MOCK_ORACLE => Box::new(DepthOracleDenoiser::new(need_scene()?, schedule.clone())),
            MOCK_ZERO => Box::new(ZeroDenoiser),
            url => Box::new(RemoteModel::new(url, DEPTH_MODEL)),
        };
        let depth_estimate: Box<dyn DepthProvider> = match e.depth_estimate.as_str() {
            MOCK_ORACLE => Box::new(GroundTruthDepth::new(need_scene()?)),
            MOCK_ZERO | MOCK_IDENTITY => {
                return Err(DriverError::Validation("depth_estimate must be mock:oracle or a URL".into()))
            }
            url => Box::new(RemoteModel::new(url, DEPTH_ESTIMATE_MODEL)),
        };
        Ok(Self {
            schedule,
            codec,
            inpaint,
            text,
            depth,
            depth_estimate,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitSummary {
    pub points: usize,
    pub occlusion: usize,
    pub splats: usize,
    pub views: usize,
}

/// Runs initialization and writes every intermediate. Any later stage
/// outputs are removed since they no longer match.
pub fn cmd_init(cfg: &PipelineConfig) -> Result<InitSummary, DriverError> {
    let poses = cfg.read_poses()?;
    let ref_entry = poses.reference().expect("validated pose file has a ref pose");
    let reference = ref_entry.camera().map_err(|e| DriverError::Validation(e.to_string()))?;
    let image = io::read_png(&cfg.reference_image).map_err(|e| DriverError::Validation(e.to_string()))?;
    if image.width != reference.width || image.height != reference.height {
        return Err(DriverError::Validation(format!(
            "reference image is {}x{} but the ref pose is {}x{}",
            image.width, image.height, reference.width, reference.height
        )));
    }
    let backends = Backends::from_config(cfg)?;
    let aux_prompts: Vec<String> = (0..cfg.aux_offsets.len()).map(|i| cfg.aux_prompt(i).to_string()).collect();
    let outpainter = Outpainter {
        denoiser: backends.inpaint.as_ref(),
        codec: backends.codec.as_ref(),
        schedule: &backends.schedule,
        steps: cfg.outpaint.steps,
        guidance: cfg.outpaint.guidance,
        seed: cfg.seed,
    };
    let art = initialize(
        &reference,
        &image,
        backends.depth_estimate.as_ref(),
        outpainter,
        &cfg.aux_offsets,
        &aux_prompts,
        cfg.grid_resolution,
    )
    .map_err(runtime("init"))?;

    let layout = Layout::new(&cfg.output_dir);
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| DriverError::Runtime(format!("{}: {e}", p.display())));
    for stage in [Stage::Inpaint, Stage::Refine] {
        let _ = std::fs::remove_file(layout.checkpoint(stage));
        let _ = std::fs::remove_file(layout.stage_cloud(stage));
    }
    mkdir(&layout.masks_dir())?;
    mkdir(&layout.point_renders_dir())?;
    mkdir(&layout.checkpoint(Stage::Inpaint).parent().expect("has parent").to_path_buf())?;
    let io_err = "writing init artifacts";
    io::write_point_ply(&art.points, &layout.points()).map_err(runtime(io_err))?;
    io::write_point_ply(&art.occlusion, &layout.occlusion()).map_err(runtime(io_err))?;
    art.grid.write(&layout.grid()).map_err(runtime(io_err))?;
    io::write_ply(&art.cloud, &layout.init_cloud()).map_err(runtime(io_err))?;
    io::write_ply(&art.cloud, &layout.scene()).map_err(runtime(io_err))?;
    for (i, img) in art.aux_images.iter().enumerate() {
        io::write_png(img, &layout.init_dir().join(format!("aux_{i}.png"))).map_err(runtime(io_err))?;
    }
    let dilation = cfg.dilation(reference.width);
    let cams: Vec<(&PoseEntry, Camera)> = poses
        .poses
        .iter()
        .filter(|p| p.role != PoseRole::Aux)
        .map(|p| p.camera().map(|c| (p, c)))
        .collect::<Result<_, _>>()
        .map_err(|e| DriverError::Validation(e.to_string()))?;
    for (entry, cam) in &cams {
        let (pc, mask) = point_render_and_mask(&art.points, &art.occlusion, cam, dilation);
        io::write_png(&pc, &layout.point_renders_dir().join(format!("{}.png", entry.id))).map_err(runtime(io_err))?;
        io::write_mask_png(&mask, &layout.masks_dir().join(format!("{}.png", entry.id))).map_err(runtime(io_err))?;
    }
    Checkpoint {
        stage: Stage::Inpaint,
        next_iteration: 0,
        cloud: art.cloud.clone(),
    }
    .write(&layout.checkpoint(Stage::Inpaint))
    .map_err(runtime(io_err))?;
    Ok(InitSummary {
        points: art.points.len(),
        occlusion: art.occlusion.len(),
        splats: art.cloud.len(),
        views: cams.len(),
    })
}

fn plan_for(cfg: &PipelineConfig, stage: Stage) -> &crate::trainer::StagePlan {
    match stage {
        Stage::Inpaint => &cfg.inpaint,
        Stage::Refine => &cfg.refine,
    }
}

fn read_checkpoint(path: &Path) -> Result<Option<Checkpoint>, DriverError> {
    if !path.is_file() {
        return Ok(None);
    }
    Checkpoint::read(path).map(Some).map_err(runtime("reading checkpoint"))
}

fn stage_complete(cfg: &PipelineConfig, layout: &Layout, stage: Stage) -> Result<Option<Checkpoint>, DriverError> {
    Ok(read_checkpoint(&layout.checkpoint(stage))?.filter(|c| c.next_iteration >= plan_for(cfg, stage).iterations))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub stage: Stage,
    pub start_iteration: usize,
    pub iterations: usize,
    pub splats: usize,
}

/// Runs `stage` from its latest checkpoint. The inpainting stage needs
/// `init`; refinement needs a finished inpainting stage.
pub fn cmd_train(cfg: &PipelineConfig, stage: Stage) -> Result<TrainSummary, DriverError> {
    let layout = Layout::new(&cfg.output_dir);
    let plan = plan_for(cfg, stage);
    let start = match stage {
        Stage::Inpaint => read_checkpoint(&layout.checkpoint(Stage::Inpaint))?
            .ok_or_else(|| DriverError::Validation("stage order: run init before train --stage inpaint".into()))?,
        Stage::Refine => match read_checkpoint(&layout.checkpoint(Stage::Refine))? {
            Some(c) => c,
            None => {
                let done = stage_complete(cfg, &layout, Stage::Inpaint)?.ok_or_else(|| {
                    DriverError::Validation("stage order: train --stage inpaint must finish before refine".into())
                })?;
                Checkpoint {
                    stage: Stage::Refine,
                    next_iteration: 0,
                    cloud: done.cloud,
                }
            }
        },
    };
    if start.stage != stage {
        return Err(DriverError::Runtime(format!("checkpoint for {stage} holds stage {}", start.stage)));
    }
    let start_iteration = start.next_iteration;

    let poses = cfg.read_poses()?;
    let cameras = poses.cameras(PoseRole::Train).map_err(|e| DriverError::Validation(e.to_string()))?;
    let points = io::read_point_ply(&layout.points()).map_err(runtime("reading points"))?;
    let occlusion = io::read_point_ply(&layout.occlusion()).map_err(runtime("reading occlusion volume"))?;
    let dilation = cfg.dilation(cameras[0].width);
    let views = prepare_views(&points, &occlusion, &cameras, dilation);

    let backends = Backends::from_config(cfg)?;
    let perceptual = PyramidDistance::default();
    let models = StageModels {
        denoiser: match stage {
            Stage::Inpaint => backends.inpaint.as_ref(),
            Stage::Refine => backends.text.as_ref(),
        },
        depth: Some(backends.depth.as_ref()),
        codec: backends.codec.as_ref(),
        perceptual: &perceptual,
    };
    let settings = TrainSettings {
        seed: cfg.seed,
        prompt: cfg.prompt.clone(),
        schedule: backends.schedule.clone(),
        render: RenderOptions::default(),
    };
    if stage == Stage::Inpaint && start_iteration < plan.iterations {
        let _ = std::fs::remove_file(layout.checkpoint(Stage::Refine));
        let _ = std::fs::remove_file(layout.stage_cloud(Stage::Refine));
    }
    let ckpt_path = layout.checkpoint(stage);
    let every = cfg.checkpoint_every;
    let total = plan.iterations;
    let mut hook = |r: &crate::trainer::IterationReport, cloud: &SplatCloud| -> Result<(), TrainError> {
        let next = r.iteration + 1;
        if next % 50 == 0 || next == total {
            log::info!("{stage} {next}/{total}: loss {:.5}", r.total);
        }
        if next % every == 0 || next == total {
            Checkpoint {
                stage,
                next_iteration: next,
                cloud: cloud.clone(),
            }
            .write(&ckpt_path)?;
        }
        Ok(())
    };
    let cloud = run_stage(stage, start.cloud, plan, models, &views, &settings, start_iteration, &mut hook)
        .map_err(runtime(stage.name()))?;
    if start_iteration >= plan.iterations {
        // Nothing ran; make sure the checkpoint reflects completion.
        Checkpoint {
            stage,
            next_iteration: start_iteration,
            cloud: cloud.clone(),
        }
        .write(&ckpt_path)
        .map_err(runtime("writing checkpoint"))?;
    }
    let io_err = "writing stage output";
    io::write_ply(&cloud, &layout.stage_cloud(stage)).map_err(runtime(io_err))?;
    io::write_ply(&cloud, &layout.scene()).map_err(runtime(io_err))?;
    Ok(TrainSummary {
        stage,
        start_iteration,
        iterations: plan.iterations,
        splats: cloud.len(),
    })
}

/// The most advanced cloud available: finished or partial stage
/// checkpoints first, then the initial cloud.
pub fn latest_cloud(cfg: &PipelineConfig) -> Result<SplatCloud, DriverError> {
    let layout = Layout::new(&cfg.output_dir);
    for stage in [Stage::Refine, Stage::Inpaint] {
        if let Some(c) = read_checkpoint(&layout.checkpoint(stage))? {
            return Ok(c.cloud);
        }
    }
    Err(DriverError::Validation("no scene yet: run init first".into()))
}

/// What `render` draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderSource {
    /// The latest splat cloud.
    Splats,
    /// The initial point cloud with its occlusion volume, as used for the
    /// training-time point renders.
    Points,
}

/// Renders color and depth for every pose in `poses`; returns the files
/// written.
pub fn cmd_render(cfg: &PipelineConfig, poses: &PoseFile, source: RenderSource) -> Result<Vec<PathBuf>, DriverError> {
    let layout = Layout::new(&cfg.output_dir);
    let dir = layout.renders_dir();
    std::fs::create_dir_all(&dir).map_err(runtime("creating render directory"))?;
    let io_err = "writing renders";
    let mut written = Vec::new();
    match source {
        RenderSource::Splats => {
            let cloud = latest_cloud(cfg)?;
            for entry in &poses.poses {
                let cam = entry.camera().map_err(|e| DriverError::Validation(e.to_string()))?;
                let out = render(&cloud, &cam, &RenderOptions::default()).map_err(runtime("render"))?;
                let c = dir.join(format!("{}_color.png", entry.id));
                let d = dir.join(format!("{}_depth.png", entry.id));
                io::write_png(&out.color, &c).map_err(runtime(io_err))?;
                io::write_depth_png(&out.depth, &d).map_err(runtime(io_err))?;
                written.extend([c, d]);
            }
        }
        RenderSource::Points => {
            let points = io::read_point_ply(&layout.points()).map_err(runtime("reading points"))?;
            let occlusion = io::read_point_ply(&layout.occlusion()).map_err(runtime("reading occlusion volume"))?;
            for entry in &poses.poses {
                let cam = entry.camera().map_err(|e| DriverError::Validation(e.to_string()))?;
                let (pc, mask) = point_render_and_mask(&points, &occlusion, &cam, cfg.dilation(cam.width));
                let c = dir.join(format!("{}_points.png", entry.id));
                let m = dir.join(format!("{}_mask.png", entry.id));
                io::write_png(&pc, &c).map_err(runtime(io_err))?;
                io::write_mask_png(&mask, &m).map_err(runtime(io_err))?;
                written.extend([c, m]);
            }
        }
    }
    Ok(written)
}

/// Re-reads the occupancy grid written by `init`.
pub fn read_grid(cfg: &PipelineConfig) -> Result<OccupancyGrid, DriverError> {
    OccupancyGrid::read(&Layout::new(&cfg.output_dir).grid()).map_err(runtime("reading grid"))
}

/// Writes a self-contained synthetic fixture: reference image, pose file
/// and a config with oracle mocks and a desk-scale plan.
pub fn make_fixture(dir: &Path, size: usize) -> Result<PathBuf, DriverError> {
    if size < 16 || size % 16 != 0 {
        return Err(DriverError::Validation("fixture size must be a positive multiple of 16".into()));
    }
    std::fs::create_dir_all(dir).map_err(runtime("creating fixture directory"))?;
    let scene = SyntheticScene::two_room();
    let traj = two_room_trajectory(size);
    let io_err = "writing fixture";
    io::write_png(&scene.color(&traj.reference), &dir.join("reference.png")).map_err(runtime(io_err))?;
    let mut poses = vec![PoseEntry::from_camera("ref", PoseRole::Ref, &traj.reference)];
    for (i, c) in traj.train.iter().enumerate() {
        poses.push(PoseEntry::from_camera(format!("train_{i:02}"), PoseRole::Train, c));
    }
    for (i, c) in traj.eval.iter().enumerate() {
        poses.push(PoseEntry::from_camera(format!("eval_{i:02}"), PoseRole::Eval, c));
    }
    io::write_poses(&PoseFile { poses }, &dir.join("poses.json")).map_err(runtime(io_err))?;
    let cfg = fixture_config();
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).map_err(runtime("writing fixture config"))?;
    Ok(path)
}

/// Desk-scale settings for the synthetic fixture: full-scale weights, guidance
/// and learning rates with shortened stages and a 32³ grid.
pub fn fixture_config() -> PipelineConfig {
    let mut inpaint = crate::trainer::StagePlan::inpaint_stage();
    inpaint.iterations = 400;
    let mut refine = crate::trainer::StagePlan::refine_stage();
    refine.iterations = 100;
    PipelineConfig {
        reference_image: "reference.png".into(),
        poses: "poses.json".into(),
        prompt: "two rooms joined by a doorway, a table and a pillar".into(),
        aux_prompts: Vec::new(),
        aux_offsets: vec![-0.3, 0.3],
        grid_resolution: [32, 32, 32],
        mask_dilation_px: None,
        outpaint: OutpaintConfig::default(),
        inpaint,
        refine,
        denoisers: Endpoints::mocks(),
        fixture: Some(FixtureScene::TwoRoom),
        seed: 0,
        output_dir: "out".into(),
        checkpoint_every: 100,
    }
}
