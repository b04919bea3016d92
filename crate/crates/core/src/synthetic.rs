//! Analytic test scenes made of textured rectangles, ray traced to produce
//! exact color and depth for any camera.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;

use crate::scene::{Camera, DepthMap, ImageBuf, Rigid};

/// Anything that can produce ground-truth renders for a camera.
pub trait GroundTruth: Send + Sync {
    fn color(&self, camera: &Camera) -> ImageBuf;
    /// Camera-space z of the first surface hit per pixel, 0 where nothing is hit.
    fn depth(&self, camera: &Camera) -> DepthMap;
}

/// Smooth procedural texture: `base + amp * sin(2π(f·st) + phase)` per channel.
#[derive(Debug, Clone, Copy)]
pub struct Texture {
    pub base: [f32; 3],
    pub amp: [f32; 3],
    pub freq: [f64; 2],
    pub phase: f64,
}

impl Texture {
    pub fn flat(base: [f32; 3]) -> Self {
        Self {
            base,
            amp: [0.0; 3],
            freq: [0.0; 2],
            phase: 0.0,
        }
    }

    pub fn wave(base: [f32; 3], amp: [f32; 3], freq: [f64; 2], phase: f64) -> Self {
        Self { base, amp, freq, phase }
    }

    fn eval(&self, s: f64, t: f64) -> [f32; 3] {
        let w = (std::f64::consts::TAU * (self.freq[0] * s + self.freq[1] * t) + self.phase).sin() as f32;
        std::array::from_fn(|c| (self.base[c] + self.amp[c] * w).clamp(0.0, 1.0))
    }
}

/// Double-sided rectangle `origin + s·edge_u + t·edge_v`, `s, t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct Quad {
    pub origin: Vector3<f64>,
    pub edge_u: Vector3<f64>,
    pub edge_v: Vector3<f64>,
    pub texture: Texture,
}

impl Quad {
    pub fn new(origin: [f64; 3], edge_u: [f64; 3], edge_v: [f64; 3], texture: Texture) -> Self {
        Self {
            origin: origin.into(),
            edge_u: edge_u.into(),
            edge_v: edge_v.into(),
            texture,
        }
    }

    /// Ray parameter and texture color of the hit, if any, with `t > t_min`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64) -> Option<(f64, [f32; 3])> {
        let n = self.edge_u.cross(&self.edge_v);
        let denom = n.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.origin - o)) / denom;
        if t <= t_min {
            return None;
        }
        let rel = o + d * t - self.origin;
        // Edges are orthogonal by construction, so plain projections give (s, t).
        let s = rel.dot(&self.edge_u) / self.edge_u.norm_squared();
        let r = rel.dot(&self.edge_v) / self.edge_v.norm_squared();
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&r) {
            return None;
        }
        let color = self.texture.eval(s * self.edge_u.norm(), r * self.edge_v.norm());
        Some((t, color))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub quads: Vec<Quad>,
    pub background: [f32; 3],
    /// Color samples per pixel axis (1 = pixel centers only).
    pub supersample: usize,
}

impl SyntheticScene {
    /// Nearest hit along `origin + t·dir`, as `(t, color)`.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, [f32; 3])> {
        self.quads
            .iter()
            .filter_map(|q| q.intersect(origin, dir, 1e-9))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Ray through pixel coordinate `(u, v)` with a camera-space direction of
    /// unit z, so the hit parameter equals camera-space depth.
    fn pixel_ray(camera: &Camera, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let dc = Vector3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
        (camera.center(), camera.cam_to_world.rotation * dc)
    }

    /// Two rooms joined by a doorway. The viewer stands in the first room
    /// facing the second; a table and a pillar in the first room and a
    /// cabinet in the second create disocclusions.
    pub fn two_room() -> Self {
        let wave = Texture::wave;
        let mut quads = vec![
            // Floor (y = 1) and ceiling (y = -1) spanning both rooms.
            Quad::new([-1.5, 1.0, -1.0], [3.0, 0.0, 0.0], [0.0, 0.0, 6.0], wave([0.55, 0.42, 0.3], [0.12, 0.1, 0.06], [0.3, 0.4], 0.0)),
            Quad::new([-1.5, -1.0, -1.0], [3.0, 0.0, 0.0], [0.0, 0.0, 6.0], wave([0.85, 0.85, 0.8], [0.05, 0.05, 0.05], [0.2, 0.25], 1.0)),
            // Side walls.
            Quad::new([-1.5, -1.0, -1.0], [0.0, 2.0, 0.0], [0.0, 0.0, 6.0], wave([0.35, 0.55, 0.7], [0.1, 0.1, 0.1], [0.3, 0.35], 0.5)),
            Quad::new([1.5, -1.0, -1.0], [0.0, 2.0, 0.0], [0.0, 0.0, 6.0], wave([0.7, 0.5, 0.4], [0.1, 0.08, 0.08], [0.25, 0.4], 2.0)),
            // Walls behind the viewer and at the far end.
            Quad::new([-1.5, -1.0, -1.0], [3.0, 0.0, 0.0], [0.0, 2.0, 0.0], Texture::flat([0.6, 0.6, 0.6])),
            Quad::new([-1.5, -1.0, 5.0], [3.0, 0.0, 0.0], [0.0, 2.0, 0.0], wave([0.3, 0.65, 0.4], [0.12, 0.12, 0.1], [0.35, 0.3], 0.3)),
            // Dividing wall at z = 3 with a doorway x ∈ [-0.5, 0.5], y ∈ [-0.3, 1].
            Quad::new([-1.5, -1.0, 3.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], wave([0.8, 0.75, 0.55], [0.08, 0.08, 0.06], [0.4, 0.3], 0.0)),
            Quad::new([0.5, -1.0, 3.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], wave([0.8, 0.75, 0.55], [0.08, 0.08, 0.06], [0.4, 0.3], 1.2)),
            Quad::new([-0.5, -1.0, 3.0], [1.0, 0.0, 0.0], [0.0, 0.7, 0.0], Texture::flat([0.78, 0.72, 0.52])),
        ];
        // Table top with its front edge; nothing underneath.
        quads.push(Quad::new([-0.7, 0.3, 1.4], [0.8, 0.0, 0.0], [0.0, 0.0, 0.8], wave([0.45, 0.25, 0.15], [0.08, 0.05, 0.03], [0.8, 0.5], 0.0)));
        quads.push(Quad::new([-0.7, 0.3, 1.4], [0.8, 0.0, 0.0], [0.0, 0.08, 0.0], Texture::flat([0.3, 0.16, 0.1])));
        // Pillar x ∈ [0.55, 0.8], z ∈ [1.8, 2.05]: front and both sides.
        quads.push(Quad::new([0.55, -1.0, 1.8], [0.25, 0.0, 0.0], [0.0, 2.0, 0.0], wave([0.9, 0.9, 0.92], [0.04, 0.04, 0.04], [0.0, 0.5], 0.0)));
        quads.push(Quad::new([0.55, -1.0, 1.8], [0.0, 2.0, 0.0], [0.0, 0.0, 0.25], Texture::flat([0.8, 0.8, 0.84])));
        quads.push(Quad::new([0.8, -1.0, 1.8], [0.0, 2.0, 0.0], [0.0, 0.0, 0.25], Texture::flat([0.8, 0.8, 0.84])));
        // Cabinet in the second room, front face and top.
        quads.push(Quad::new([-0.2, 0.4, 3.9], [0.5, 0.0, 0.0], [0.0, 0.6, 0.0], wave([0.2, 0.3, 0.6], [0.06, 0.06, 0.1], [0.6, 0.6], 0.0)));
        quads.push(Quad::new([-0.2, 0.4, 3.9], [0.5, 0.0, 0.0], [0.0, 0.0, 0.5], Texture::flat([0.25, 0.35, 0.65])));
        Self {
            quads,
            background: [0.0; 3],
            supersample: 3,
        }
    }

    /// A near plane partly covering a far plane, both facing the viewer.
    pub fn two_plane(near_z: f64, far_z: f64) -> Self {
        Self {
            quads: vec![
                Quad::new([-0.2, -1.0, near_z], [1.2, 0.0, 0.0], [0.0, 2.0, 0.0], Texture::wave([0.8, 0.3, 0.2], [0.1, 0.1, 0.1], [0.5, 0.5], 0.0)),
                Quad::new([-4.0, -4.0, far_z], [8.0, 0.0, 0.0], [0.0, 8.0, 0.0], Texture::wave([0.2, 0.4, 0.8], [0.1, 0.1, 0.1], [0.5, 0.5], 0.0)),
            ],
            background: [0.0; 3],
            supersample: 1,
        }
    }
}

impl GroundTruth for SyntheticScene {
    fn color(&self, camera: &Camera) -> ImageBuf {
        let n = self.supersample.max(1);
        let inv = 1.0 / n as f64;
        let data: Vec<f32> = (0..camera.pixel_count())
            .into_par_iter()
            .flat_map_iter(|px| {
                let (x, y) = ((px % camera.width) as f64, (px / camera.width) as f64);
                let mut acc = [0.0f64; 3];
                for sy in 0..n {
                    for sx in 0..n {
                        let u = x + (sx as f64 + 0.5) * inv;
                        let v = y + (sy as f64 + 0.5) * inv;
                        let (o, d) = Self::pixel_ray(camera, u, v);
                        let c = self.trace(&o, &d).map_or(self.background, |h| h.1);
                        for k in 0..3 {
                            acc[k] += c[k] as f64;
                        }
                    }
                }
                acc.map(|a| (a * inv * inv) as f32)
            })
            .collect();
        ImageBuf::from_vec(camera.width, camera.height, data).expect("sized by construction")
    }

    fn depth(&self, camera: &Camera) -> DepthMap {
        let data: Vec<f32> = (0..camera.pixel_count())
            .into_par_iter()
            .map(|px| {
                let u = (px % camera.width) as f64 + 0.5;
                let v = (px / camera.width) as f64 + 0.5;
                let (o, d) = Self::pixel_ray(camera, u, v);
                self.trace(&o, &d).map_or(0.0, |h| h.0 as f32)
            })
            .collect();
        DepthMap::from_vec(camera.width, camera.height, data).expect("sized by construction")
    }
}

/// Rotation that yaws (about +y) and then pitches (about the yawed +x).
/// Positive yaw turns the view toward +x; positive pitch toward +y (down).
pub fn yaw_pitch(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), -pitch);
    (ry * rx).into_inner()
}

pub fn posed(base: &Camera, position: [f64; 3], yaw: f64, pitch: f64) -> Camera {
    let pose = Rigid::new(yaw_pitch(yaw, pitch), position.into()).expect("rotation is orthonormal");
    base.with_pose(pose)
}

/// Default trajectory for the two-room scene at `size`×`size`: training views
/// around the reference plus held-out views between them.
pub struct Trajectory {
    pub reference: Camera,
    pub train: Vec<Camera>,
    pub eval: Vec<Camera>,
}

pub fn two_room_trajectory(size: usize) -> Trajectory {
    let base = Camera::looking_forward(0.75 * size as f64, size, size);
    let mut train = Vec::new();
    for &(x, y, z, yaw, pitch) in &[
        (0.0, 0.0, 0.0, 0.0, 0.0),
        (-0.3, 0.0, 0.0, 0.0, 0.0),
        (0.3, 0.0, 0.0, 0.0, 0.0),
        (-0.2, 0.15, 0.3, 0.08, 0.0),
        (0.2, 0.15, 0.3, -0.08, 0.0),
        (0.0, -0.15, 0.5, 0.0, 0.1),
        (-0.35, 0.1, 0.6, 0.12, 0.05),
        (0.35, 0.1, 0.6, -0.12, 0.05),
        (0.0, 0.25, 0.2, 0.0, -0.05),
        (0.1, -0.1, 0.8, -0.05, 0.05),
    ] {
        train.push(posed(&base, [x, y, z], yaw, pitch));
    }
    let eval = vec![
        posed(&base, [-0.15, 0.05, 0.25], 0.04, 0.0),
        posed(&base, [0.15, 0.0, 0.4], -0.05, 0.03),
    ];
    Trajectory {
        reference: base,
        train,
        eval,
    }
}
