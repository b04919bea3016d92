use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Row-major, channel-interleaved `f32` raster with `C` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster<const C: usize> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// RGB image, nominally in `[0, 1]`.
pub type ImageBuf = Raster<3>;
/// Camera-space depth; entries `<= 0` mark invalid pixels.
pub type DepthMap = Raster<1>;
/// Inpainting mask: `0` marks a region to inpaint, `1` a known region.
pub type MaskBuf = Raster<1>;

impl<const C: usize> Raster<C> {
    pub const CHANNELS: usize = C;

    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * C],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self, GeometryError> {
        let expected = width * height * C;
        if data.len() != expected {
            return Err(GeometryError::SizeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; C]) -> Self {
        let mut data = Vec::with_capacity(width * height * C);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_size<const D: usize>(&self, other: &Raster<D>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * C
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; C] {
        let i = self.index(x, y);
        let mut out = [0.0; C];
        out.copy_from_slice(&self.data[i..i + C]);
        out
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, value: [f32; C]) {
        let i = self.index(x, y);
        self.data[i..i + C].copy_from_slice(&value);
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Raster<1> {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// True when every entry is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr<const C: usize>(a: &Raster<C>, b: &Raster<C>) -> f64 {
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_interleaved() {
        let img = ImageBuf::from_fn(3, 2, |x, y| [x as f32, y as f32, 7.0]);
        assert_eq!(img.pixel(2, 1), [2.0, 1.0, 7.0]);
        assert_eq!(img.index(1, 1), 12);
        assert!(ImageBuf::from_vec(2, 2, vec![0.0; 11]).is_err());
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let a = DepthMap::filled(4, 4, 0.5);
        assert!(psnr(&a, &a).is_infinite());
        let b = DepthMap::filled(4, 4, 0.6);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-4);
    }
}
