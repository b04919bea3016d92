use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{cfg_combine, DiffusionError, GuidanceConfig, LatentCodec, NoiseSchedule, Tensor};
use crate::scene::Camera;
use crate::synthetic::GroundTruth;

/// What a prediction is conditioned on. `view` is not part of any model's
/// input; it lets ground-truth mocks look up the scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conditioning {
    pub prompt: String,
    /// Masked conditioning image (inpainting) or guide image (depth).
    pub image: Option<Tensor>,
    /// Inpainting mask, 0 where content must be generated.
    pub mask: Option<Tensor>,
    pub view: Option<Camera>,
}

impl Conditioning {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            ..Default::default()
        }
    }

    pub fn with_view(mut self, view: Camera) -> Self {
        self.view = Some(view);
        self
    }

    /// Drops prompt and image conditioning.
    pub fn unconditional(&self) -> Self {
        Self {
            prompt: String::new(),
            image: None,
            mask: None,
            view: self.view,
        }
    }

    /// Keeps only the image conditioning.
    pub fn image_only(&self) -> Self {
        Self {
            prompt: String::new(),
            ..self.clone()
        }
    }
}

/// Noise predictor ε̂(z_t, t, c).
pub trait Denoiser: Send + Sync {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor, DiffusionError>;

    /// Guided prediction. The default evaluates the unconditional, image-only
    /// and fully conditioned branches and combines them; without an image the
    /// image-only branch equals the unconditional one.
    fn predict_guided(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Conditioning,
        guidance: GuidanceConfig,
    ) -> Result<Tensor, DiffusionError> {
        if guidance == GuidanceConfig::NONE {
            return self.predict(z_t, t, cond);
        }
        let e_none = self.predict(z_t, t, &cond.unconditional())?;
        let e_img = if cond.image.is_some() {
            self.predict(z_t, t, &cond.image_only())?
        } else {
            e_none.clone()
        };
        let e_full = self.predict(z_t, t, cond)?;
        cfg_combine(&e_none, &e_img, &e_full, guidance)
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<(), DiffusionError> {
    if a.shape != b.shape {
        return Err(DiffusionError::ShapeMismatch(a.shape.clone(), b.shape.clone()));
    }
    Ok(())
}

/// Predicts ε̂ = 0 everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(&self, z_t: &Tensor, _t: usize, _cond: &Conditioning) -> Result<Tensor, DiffusionError> {
        Ok(Tensor::zeros(z_t.shape.clone()))
    }
}

/// Exact noise predictor when every latent element is drawn independently
/// from `N(mean, std²)`: `ε̂ = σ_t·(z_t − √ᾱ_t·mean) / (ᾱ_t·std² + σ_t²)`.
/// Smooth in both `z_t` and `t`, which makes it a useful sampler probe.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    pub mean: f32,
    pub std: f32,
    pub schedule: NoiseSchedule,
}

impl Denoiser for GaussianDenoiser {
    fn predict(&self, z_t: &Tensor, t: usize, _cond: &Conditioning) -> Result<Tensor, DiffusionError> {
        let ab = self.schedule.alpha_bar(t)?;
        let s2 = 1.0 - ab;
        let v = (self.std as f64).powi(2);
        let k = s2.sqrt() / (ab * v + s2);
        let m = ab.sqrt() * self.mean as f64;
        Ok(Tensor {
            shape: z_t.shape.clone(),
            data: z_t.data.iter().map(|&z| (k * (z as f64 - m)) as f32).collect(),
        })
    }
}

/// Noise that points exactly from `target` to `z_t`:
/// `ε̂ = (z_t − √ᾱ_t·target) / √(1−ᾱ_t)`, and 0 at `t = 0`.
fn oracle_eps(z_t: &Tensor, target: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    check_same(z_t, target)?;
    if t == 0 {
        return Ok(Tensor::zeros(z_t.shape.clone()));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z_t
        .data
        .iter()
        .zip(&target.data)
        .map(|(&z, &x)| ((z as f64 - a * x as f64) / s) as f32)
        .collect();
    Ok(Tensor {
        shape: z_t.shape.clone(),
        data,
    })
}

/// Denoises every input toward a fixed clean latent.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub target: Tensor,
    pub schedule: NoiseSchedule,
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, z_t: &Tensor, t: usize, _cond: &Conditioning) -> Result<Tensor, DiffusionError> {
        oracle_eps(z_t, &self.target, t, &self.schedule)
    }

    // Conditioning is ignored, so every branch agrees and guidance collapses.
    fn predict_guided(&self, z_t: &Tensor, t: usize, cond: &Conditioning, _g: GuidanceConfig) -> Result<Tensor, DiffusionError> {
        self.predict(z_t, t, cond)
    }
}

/// Cache key: intrinsics and pose bits of a camera.
fn camera_key(c: &Camera) -> Vec<u64> {
    let mut k: Vec<u64> = [c.fx, c.fy, c.cx, c.cy].iter().map(|v| v.to_bits()).collect();
    k.extend(c.cam_to_world.to_row_major().iter().map(|v| v.to_bits()));
    k.push(c.width as u64);
    k.push(c.height as u64);
    k
}

fn cached(
    cache: &Mutex<HashMap<Vec<u64>, Tensor>>,
    view: &Camera,
    make: impl FnOnce() -> Result<Tensor, DiffusionError>,
) -> Result<Tensor, DiffusionError> {
    let key = camera_key(view);
    if let Some(t) = cache.lock().expect("cache lock").get(&key) {
        return Ok(t.clone());
    }
    let t = make()?;
    cache.lock().expect("cache lock").insert(key, t.clone());
    Ok(t)
}

fn require_view(cond: &Conditioning) -> Result<&Camera, DiffusionError> {
    cond.view
        .as_ref()
        .ok_or_else(|| DiffusionError::Invalid("scene oracle needs a view in the conditioning".into()))
}

/// Image oracle for analytic scenes: denoises toward the encoded ground-truth
/// render of the conditioning view.
pub struct SceneOracleDenoiser {
    pub scene: Arc<dyn GroundTruth>,
    pub codec: Arc<dyn LatentCodec>,
    pub schedule: NoiseSchedule,
    cache: Mutex<HashMap<Vec<u64>, Tensor>>,
}

impl SceneOracleDenoiser {
    pub fn new(scene: Arc<dyn GroundTruth>, codec: Arc<dyn LatentCodec>, schedule: NoiseSchedule) -> Self {
        Self {
            scene,
            codec,
            schedule,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn target(&self, view: &Camera) -> Result<Tensor, DiffusionError> {
        cached(&self.cache, view, || self.codec.encode(&self.scene.color(view)))
    }
}

impl Denoiser for SceneOracleDenoiser {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor, DiffusionError> {
        let target = self.target(require_view(cond)?)?;
        oracle_eps(z_t, &target, t, &self.schedule)
    }

    fn predict_guided(&self, z_t: &Tensor, t: usize, cond: &Conditioning, _g: GuidanceConfig) -> Result<Tensor, DiffusionError> {
        self.predict(z_t, t, cond)
    }
}

/// Depth oracle for analytic scenes: denoises a `[h, w, 1]` latent toward the
/// ground-truth depth of the view, normalized to `[-1, 1]`.
pub struct DepthOracleDenoiser {
    pub scene: Arc<dyn GroundTruth>,
    pub schedule: NoiseSchedule,
    cache: Mutex<HashMap<Vec<u64>, Tensor>>,
}

impl DepthOracleDenoiser {
    pub fn new(scene: Arc<dyn GroundTruth>, schedule: NoiseSchedule) -> Self {
        Self {
            scene,
            schedule,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn target(&self, view: &Camera) -> Result<Tensor, DiffusionError> {
        cached(&self.cache, view, || {
            let d = self.scene.depth(view);
            let (lo, hi) = d
                .data
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = (hi - lo).max(1e-6);
            let data = d.data.iter().map(|&v| 2.0 * (v - lo) / span - 1.0).collect();
            Tensor::new(vec![d.height, d.width, 1], data)
        })
    }
}

impl Denoiser for DepthOracleDenoiser {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor, DiffusionError> {
        let target = self.target(require_view(cond)?)?;
        oracle_eps(z_t, &target, t, &self.schedule)
    }

    fn predict_guided(&self, z_t: &Tensor, t: usize, cond: &Conditioning, _g: GuidanceConfig) -> Result<Tensor, DiffusionError> {
        self.predict(z_t, t, cond)
    }
}
