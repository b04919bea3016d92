use super::{DiffusionError, Tensor};
use crate::scene::ImageBuf;

/// Maps images to the denoiser's latent space and back.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &ImageBuf) -> Result<Tensor, DiffusionError>;
    fn decode(&self, latent: &Tensor) -> Result<ImageBuf, DiffusionError>;
    /// Pulls a latent-space gradient back to image space (interleaved RGB of
    /// `width`×`height`). `None` when the codec is not differentiable here.
    fn encode_vjp(&self, width: usize, height: usize, grad: &Tensor) -> Option<Vec<f32>>;
}

/// Latent = image laid out as `[height, width, 3]`, optionally area-averaged
/// to half resolution. Decoding upsamples by pixel replication.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdentityCodec {
    pub downsample: bool,
}

impl IdentityCodec {
    pub fn new(downsample: bool) -> Self {
        Self { downsample }
    }

    pub fn latent_shape(&self, width: usize, height: usize) -> Vec<usize> {
        if self.downsample {
            vec![height / 2, width / 2, 3]
        } else {
            vec![height, width, 3]
        }
    }
}

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &ImageBuf) -> Result<Tensor, DiffusionError> {
        let (w, h) = (image.width, image.height);
        if !self.downsample {
            return Tensor::new(vec![h, w, 3], image.data.clone());
        }
        if w % 2 != 0 || h % 2 != 0 {
            return Err(DiffusionError::Invalid(format!("cannot halve a {w}x{h} image")));
        }
        let (lw, lh) = (w / 2, h / 2);
        let mut data = vec![0.0f32; lw * lh * 3];
        for y in 0..lh {
            for x in 0..lw {
                for c in 0..3 {
                    let at = |xx: usize, yy: usize| image.data[(yy * w + xx) * 3 + c];
                    let s = at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1);
                    data[(y * lw + x) * 3 + c] = 0.25 * s;
                }
            }
        }
        Tensor::new(vec![lh, lw, 3], data)
    }

    fn decode(&self, latent: &Tensor) -> Result<ImageBuf, DiffusionError> {
        let &[lh, lw, 3] = latent.shape.as_slice() else {
            return Err(DiffusionError::Invalid(format!("expected [h, w, 3] latent, got {:?}", latent.shape)));
        };
        let f = if self.downsample { 2 } else { 1 };
        let (w, h) = (lw * f, lh * f);
        let mut data = vec![0.0f32; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let src = ((y / f) * lw + x / f) * 3;
                data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&latent.data[src..src + 3]);
            }
        }
        ImageBuf::from_vec(w, h, data).map_err(|e| DiffusionError::Invalid(e.to_string()))
    }

    fn encode_vjp(&self, width: usize, height: usize, grad: &Tensor) -> Option<Vec<f32>> {
        if grad.shape != self.latent_shape(width, height) {
            return None;
        }
        if !self.downsample {
            return Some(grad.data.clone());
        }
        let lw = width / 2;
        let mut out = vec![0.0f32; width * height * 3];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    out[(y * width + x) * 3 + c] = 0.25 * grad.data[((y / 2) * lw + x / 2) * 3 + c];
                }
            }
        }
        Some(out)
    }
}
