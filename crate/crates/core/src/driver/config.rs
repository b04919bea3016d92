use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DriverError;
use crate::diffusion::GuidanceConfig;
use crate::io::{read_poses, PoseFile, PoseRole};
use crate::trainer::StagePlan;

pub const MOCK_ORACLE: &str = "mock:oracle";
pub const MOCK_ZERO: &str = "mock:zero";
pub const MOCK_IDENTITY: &str = "mock:identity";

/// Where each model lives: `mock:<name>` or an `http(s)://` server base URL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub inpaint: String,
    pub text: String,
    pub depth: String,
    pub depth_estimate: String,
    pub codec: String,
}

impl Endpoints {
    pub fn mocks() -> Self {
        Self {
            inpaint: MOCK_ORACLE.into(),
            text: MOCK_ORACLE.into(),
            depth: MOCK_ORACLE.into(),
            depth_estimate: MOCK_ORACLE.into(),
            codec: MOCK_IDENTITY.into(),
        }
    }

    fn all(&self) -> [(&'static str, &str); 5] {
        [
            ("inpaint", &self.inpaint),
            ("text", &self.text),
            ("depth", &self.depth),
            ("depth_estimate", &self.depth_estimate),
            ("codec", &self.codec),
        ]
    }

    pub fn uses_oracle(&self) -> bool {
        self.all().iter().any(|(_, e)| *e == MOCK_ORACLE)
    }
}

/// Analytic scene backing the oracle mocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureScene {
    TwoRoom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutpaintConfig {
    pub steps: usize,
    pub guidance: GuidanceConfig,
}

impl Default for OutpaintConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            guidance: GuidanceConfig { image: 1.8, text: 7.5 },
        }
    }
}

fn default_offsets() -> Vec<f64> {
    vec![-0.3, 0.3]
}

fn default_grid() -> [usize; 3] {
    [128, 128, 128]
}

fn default_checkpoint_every() -> usize {
    100
}

/// Single JSON file describing a run. Relative paths are resolved against
/// the directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub reference_image: PathBuf,
    /// Pose file with the reference, training and evaluation views; the
    /// reference entry also supplies the intrinsics.
    pub poses: PathBuf,
    pub prompt: String,
    /// One prompt per auxiliary offset, or empty to reuse `prompt`.
    #[serde(default)]
    pub aux_prompts: Vec<String>,
    #[serde(default = "default_offsets")]
    pub aux_offsets: Vec<f64>,
    #[serde(default = "default_grid")]
    pub grid_resolution: [usize; 3],
    /// Defaults to 8 px per 512 px of image width.
    #[serde(default)]
    pub mask_dilation_px: Option<usize>,
    #[serde(default)]
    pub outpaint: OutpaintConfig,
    #[serde(default = "StagePlan::inpaint_stage")]
    pub inpaint: StagePlan,
    #[serde(default = "StagePlan::refine_stage")]
    pub refine: StagePlan,
    pub denoisers: Endpoints,
    #[serde(default)]
    pub fixture: Option<FixtureScene>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl PipelineConfig {
    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self, DriverError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DriverError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| DriverError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.reference_image, &mut self.poses, &mut self.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn aux_prompt(&self, i: usize) -> &str {
        self.aux_prompts.get(i).map(String::as_str).unwrap_or(&self.prompt)
    }

    /// Checks everything that can fail before any work starts.
    pub fn validate(&self) -> Result<(), DriverError> {
        let v = |m: String| Err(DriverError::Validation(m));
        if !self.reference_image.is_file() {
            return v(format!("reference image {} does not exist", self.reference_image.display()));
        }
        if !self.poses.is_file() {
            return v(format!("pose file {} does not exist", self.poses.display()));
        }
        let poses = self.read_poses()?;
        if poses.with_role(PoseRole::Train).next().is_none() {
            return v("pose file has no train poses".into());
        }
        if !self.aux_prompts.is_empty() && self.aux_prompts.len() != self.aux_offsets.len() {
            return v(format!(
                "{} aux prompts for {} aux offsets",
                self.aux_prompts.len(),
                self.aux_offsets.len()
            ));
        }
        if self.aux_offsets.iter().any(|o| !o.is_finite()) {
            return v("aux offsets must be finite".into());
        }
        if self.grid_resolution.iter().any(|&r| r < 2) {
            return v("grid resolution must be at least 2 per axis".into());
        }
        if self.outpaint.steps == 0 {
            return v("outpaint steps must be positive".into());
        }
        for (name, plan) in [("inpaint", &self.inpaint), ("refine", &self.refine)] {
            plan.validate().map_err(|e| DriverError::Validation(format!("{name} plan: {e}")))?;
        }
        for (name, e) in self.denoisers.all() {
            let known = [MOCK_ORACLE, MOCK_ZERO, MOCK_IDENTITY].contains(&e);
            if !(known || e.starts_with("http://") || e.starts_with("https://")) {
                return v(format!("denoiser endpoint {name} = {e:?} is neither a mock nor an http URL"));
            }
        }
        if self.denoisers.codec == MOCK_ORACLE || self.denoisers.codec == MOCK_ZERO {
            return v("the codec endpoint must be mock:identity or a URL".into());
        }
        if self.denoisers.uses_oracle() && self.fixture.is_none() {
            return v("mock:oracle endpoints need a fixture scene".into());
        }
        if self.checkpoint_every == 0 {
            return v("checkpoint_every must be positive".into());
        }
        Ok(())
    }

    pub fn read_poses(&self) -> Result<PoseFile, DriverError> {
        read_poses(&self.poses).map_err(|e| DriverError::Validation(e.to_string()))
    }

    pub fn dilation(&self, width: usize) -> usize {
        self.mask_dilation_px.unwrap_or_else(|| crate::pipeline::default_dilation(width))
    }
}
