//! Small separable filters over single planes of `f32` data.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Out-of-range taps read the nearest edge sample.
    Clamp,
    /// Out-of-range taps contribute nothing.
    Zero,
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Correlates one plane with `kernel` along both axes.
pub fn blur_plane(
    data: &[f64],
    width: usize,
    height: usize,
    kernel: &[f64],
    boundary: Boundary,
) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xx = x as i64 + k as i64 - r;
                if let Some(xx) = resolve(xx, width, boundary) {
                    acc += w * data[y * width + xx];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let yy = y as i64 + k as i64 - r;
                if let Some(yy) = resolve(yy, height, boundary) {
                    acc += w * tmp[yy * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Adjoint of [`blur_plane`]: scatters each output cotangent back onto the
/// taps that produced it.
pub fn blur_plane_adjoint(
    grad: &[f64],
    width: usize,
    height: usize,
    kernel: &[f64],
    boundary: Boundary,
) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; grad.len()];
    for y in 0..height {
        for x in 0..width {
            let g = grad[y * width + x];
            for (k, w) in kernel.iter().enumerate() {
                let yy = y as i64 + k as i64 - r;
                if let Some(yy) = resolve(yy, height, boundary) {
                    tmp[yy * width + x] += w * g;
                }
            }
        }
    }
    let mut out = vec![0.0; grad.len()];
    for y in 0..height {
        for x in 0..width {
            let g = tmp[y * width + x];
            for (k, w) in kernel.iter().enumerate() {
                let xx = x as i64 + k as i64 - r;
                if let Some(xx) = resolve(xx, width, boundary) {
                    out[y * width + xx] += w * g;
                }
            }
        }
    }
    out
}

#[inline]
fn resolve(i: i64, n: usize, boundary: Boundary) -> Option<usize> {
    if (0..n as i64).contains(&i) {
        return Some(i as usize);
    }
    match boundary {
        Boundary::Clamp => Some(i.clamp(0, n as i64 - 1) as usize),
        Boundary::Zero => None,
    }
}

/// Splits interleaved `channels` data into `f64` planes.
pub fn deinterleave(data: &[f32], channels: usize) -> Vec<Vec<f64>> {
    (0..channels)
        .map(|c| data.iter().skip(c).step_by(channels).map(|&v| v as f64).collect())
        .collect()
}

pub fn interleave(planes: &[Vec<f64>]) -> Vec<f32> {
    let n = planes.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(n * planes.len());
    for i in 0..n {
        for p in planes {
            out.push(p[i] as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.0, 2);
        assert_eq!(k.len(), 5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[4]);
    }

    #[test]
    fn adjoint_matches_inner_product() {
        let (w, h) = (7, 5);
        let a: Vec<f64> = (0..w * h).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..w * h).map(|i| ((i * 13) % 7) as f64 * 0.3).collect();
        let k = gaussian_kernel(1.3, 3);
        for boundary in [Boundary::Clamp, Boundary::Zero] {
            let fa = blur_plane(&a, w, h, &k, boundary);
            let atb = blur_plane_adjoint(&b, w, h, &k, boundary);
            let lhs: f64 = fa.iter().zip(&b).map(|(x, y)| x * y).sum();
            let rhs: f64 = a.iter().zip(&atb).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
