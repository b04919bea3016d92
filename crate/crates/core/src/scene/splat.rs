use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Number of raw parameters per splat: mean (3), log-scale (3), quaternion (4),
/// opacity logit (1), color (3).
pub const PARAMS_PER_SPLAT: usize = 14;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic Gaussian. Scale is stored in log space and opacity as a
/// logit so optimizer steps are unconstrained; quaternions are `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub mu: [f32; 3],
    pub log_scale: [f32; 3],
    pub quat: [f32; 4],
    pub opacity_logit: f32,
    pub color: [f32; 3],
}

impl Splat {
    pub fn isotropic(mu: [f32; 3], scale: f32, opacity: f32, color: [f32; 3]) -> Self {
        let ls = scale.ln();
        Self {
            mu,
            log_scale: [ls; 3],
            quat: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity as f64) as f32,
            color,
        }
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(|s| (s as f64).exp())
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit as f64)
    }

    pub fn mean(&self) -> Vector3<f64> {
        Vector3::new(self.mu[0] as f64, self.mu[1] as f64, self.mu[2] as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }

    pub fn to_params(&self) -> [f32; PARAMS_PER_SPLAT] {
        let mut p = [0.0; PARAMS_PER_SPLAT];
        p[0..3].copy_from_slice(&self.mu);
        p[3..6].copy_from_slice(&self.log_scale);
        p[6..10].copy_from_slice(&self.quat);
        p[10] = self.opacity_logit;
        p[11..14].copy_from_slice(&self.color);
        p
    }

    pub fn from_params(p: &[f32; PARAMS_PER_SPLAT]) -> Self {
        Self {
            mu: [p[0], p[1], p[2]],
            log_scale: [p[3], p[4], p[5]],
            quat: [p[6], p[7], p[8], p[9]],
            opacity_logit: p[10],
            color: [p[11], p[12], p[13]],
        }
    }
}

/// First and second moment estimates for every raw splat parameter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<[f32; PARAMS_PER_SPLAT]>,
    pub second: Vec<[f32; PARAMS_PER_SPLAT]>,
}

impl OptimizerState {
    pub fn zeros(n: usize) -> Self {
        Self {
            step: 0,
            first: vec![[0.0; PARAMS_PER_SPLAT]; n],
            second: vec![[0.0; PARAMS_PER_SPLAT]; n],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplatCloud {
    pub splats: Vec<Splat>,
    pub optimizer: OptimizerState,
}

impl SplatCloud {
    pub fn new(splats: Vec<Splat>) -> Self {
        let optimizer = OptimizerState::zeros(splats.len());
        Self { splats, optimizer }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.splats.iter().all(Splat::is_finite)
    }

    /// Drops optimizer moments, e.g. when a new stage starts with new rates.
    pub fn reset_optimizer(&mut self) {
        self.optimizer = OptimizerState::zeros(self.splats.len());
    }
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: [f64; 4]) -> Result<Matrix3<f64>, GeometryError> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(GeometryError::ZeroQuaternion);
    }
    let [w, x, y, z] = q.map(|v| v / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// World-space covariance `R S S^T R^T` for per-axis scale `s` and rotation `q`.
pub fn splat_covariance(scale: [f64; 3], quat: [f64; 4]) -> Result<Matrix3<f64>, GeometryError> {
    let r = quat_to_rotation(quat)?;
    let m = r * Matrix3::from_diagonal(&Vector3::from(scale));
    Ok(m * m.transpose())
}
