use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

const RIGID_TOL: f64 = 1e-6;

/// A rotation followed by a translation: `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rigid {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Rigid {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rigid {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let rigid = Self {
            rotation,
            translation,
        };
        rigid.validate()?;
        Ok(rigid)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Largest deviation of `R^T R` from identity, plus the determinant error.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let gram = r.transpose() * r - Matrix3::identity();
        let det_err = (r.determinant() - 1.0).abs();
        gram.abs().max().max(det_err)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let err = self.orthonormality_error();
        let finite = self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite());
        if !finite || err.is_nan() || err > RIGID_TOL {
            return Err(GeometryError::NonRigidTransform(err));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rotation.transpose();
        Rigid {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major homogeneous 4x4 matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_row_major(m: &[f64; 16]) -> Result<Rigid, GeometryError> {
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            let err = bottom
                .iter()
                .zip([0.0, 0.0, 0.0, 1.0])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if err > RIGID_TOL || err.is_nan() {
                return Err(GeometryError::NonRigidTransform(err));
            }
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Rigid::new(rotation, Vector3::new(m[3], m[7], m[11]))
    }
}

/// Pinhole camera with a rigid camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub cam_to_world: Rigid,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_to_world: Rigid,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_to_world,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the origin looking down +z with the principal point at the
    /// image center.
    pub fn looking_forward(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            cam_to_world: Rigid::identity(),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let intr = [self.fx, self.fy, self.cx, self.cy];
        if !intr.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "image size must be nonzero ({}x{})",
                self.width, self.height
            )));
        }
        self.cam_to_world.validate()
    }

    pub fn with_pose(mut self, cam_to_world: Rigid) -> Self {
        self.cam_to_world = cam_to_world;
        self
    }

    pub fn world_to_cam(&self) -> Rigid {
        self.cam_to_world.inverse()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.cam_to_world.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Projects a world point to `(u, v, depth)` in pixel coordinates.
    pub fn project_point(&self, p: &Vector3<f64>) -> Result<(f64, f64, f64), GeometryError> {
        let c = self.world_to_cam().apply(p);
        self.project_camera_point(&c)
    }

    pub fn project_camera_point(&self, c: &Vector3<f64>) -> Result<(f64, f64, f64), GeometryError> {
        if c.z <= 1e-8 || c.z.is_nan() {
            return Err(GeometryError::BehindCamera(c.z));
        }
        Ok((
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
            c.z,
        ))
    }

    /// Inverse of [`Camera::project_point`] for a given camera-space depth.
    pub fn unproject_pixel(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 || depth.is_nan() {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        let c = Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        );
        Ok(self.cam_to_world.apply(&c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;

    fn cam() -> Camera {
        Camera::new(100.0, 100.0, 32.0, 32.0, 64, 64, Rigid::identity()).unwrap()
    }

    #[test]
    fn projects_optical_axis_point_to_principal_point() {
        let (u, v, d) = cam().project_point(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((u, v, d), (32.0, 32.0, 2.0));
        let (u, v, d) = cam().project_point(&Vector3::new(0.02, 0.0, 2.0)).unwrap();
        assert!((u - 33.0).abs() < 1e-12);
        assert_eq!((v, d), (32.0, 2.0));
    }

    #[test]
    fn unprojects_known_pixels() {
        let p = cam().unproject_pixel(32.0, 32.0, 2.0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        let p = cam().unproject_pixel(33.0, 32.0, 2.0).unwrap();
        assert!((p - Vector3::new(0.02, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn rejects_points_behind_and_bad_depth() {
        assert!(matches!(
            cam().project_point(&Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::BehindCamera(_))
        ));
        assert!(matches!(
            cam().project_point(&Vector3::new(0.0, 0.0, 0.0)),
            Err(GeometryError::BehindCamera(_))
        ));
        assert!(matches!(
            cam().unproject_pixel(1.0, 1.0, 0.0),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn camera_validation() {
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, 1, 1, Rigid::identity()).is_err());
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, 0, 1, Rigid::identity()).is_err());
        let skew = Rigid {
            rotation: Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        };
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, 1, 1, skew).is_err());
        let reflect = Rigid {
            rotation: Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        };
        assert!(reflect.validate().is_err());
    }

    fn rigid_strategy() -> impl Strategy<Value = Rigid> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.1f64..3.1,
            prop::array::uniform3(-5.0f64..5.0),
        )
            .prop_filter("axis nonzero", |(a, _, _)| {
                a.iter().map(|v| v * v).sum::<f64>() > 1e-3
            })
            .prop_map(|(axis, angle, t)| {
                let axis = Unit::new_normalize(Vector3::from(axis));
                Rigid {
                    rotation: *Rotation3::from_axis_angle(&axis, angle).matrix(),
                    translation: Vector3::from(t),
                }
            })
    }

    proptest! {
        #[test]
        fn project_unproject_round_trip(
            pose in rigid_strategy(),
            u in 0.0f64..64.0, v in 0.0f64..64.0, d in 0.1f64..50.0,
        ) {
            let cam = cam().with_pose(pose);
            let p = cam.unproject_pixel(u, v, d).unwrap();
            let (u2, v2, d2) = cam.project_point(&p).unwrap();
            prop_assert!((u2 - u).abs() <= 1e-6 * u.abs().max(1.0));
            prop_assert!((v2 - v).abs() <= 1e-6 * v.abs().max(1.0));
            prop_assert!((d2 - d).abs() <= 1e-6 * d);
            let back = cam.unproject_pixel(u2, v2, d2).unwrap();
            prop_assert!((back - p).norm() <= 1e-6 * p.norm().max(1.0));
        }

        #[test]
        fn rigid_composition_is_associative_and_invertible(
            a in rigid_strategy(), b in rigid_strategy(), c in rigid_strategy(),
        ) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.rotation - right.rotation).abs().max() < 1e-9);
            prop_assert!((left.translation - right.translation).abs().max() < 1e-9);
            let id = a.compose(&a.inverse());
            prop_assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation.abs().max() < 1e-9);
        }

        #[test]
        fn row_major_round_trip_is_exact(a in rigid_strategy()) {
            let m = a.to_row_major();
            let back = Rigid::from_row_major(&m).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
