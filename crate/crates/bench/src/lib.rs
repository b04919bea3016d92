//! Inputs shared by the benchmarks: the two-room fixture lifted to points
//! and splats at a chosen resolution.

use occlusplat::depth_init::{init_splats_from_points, lift_depth};
use occlusplat::render::RenderCotangent;
use occlusplat::scene::{Camera, MaskBuf, PointCloud, PointSource, SplatCloud};
use occlusplat::synthetic::{two_room_trajectory, GroundTruth, SyntheticScene};

pub struct Fixture {
    pub reference: Camera,
    pub view: Camera,
    pub points: PointCloud,
    pub cloud: SplatCloud,
}

/// The reference view of the two-room scene lifted with exact depth.
pub fn two_room(size: usize) -> Fixture {
    let scene = SyntheticScene::two_room();
    let traj = two_room_trajectory(size);
    let cam = traj.reference;
    let mask = MaskBuf::filled(size, size, 1.0);
    let points = lift_depth(&cam, &scene.color(&cam), &scene.depth(&cam), &mask, PointSource::Reference)
        .expect("reference view hits the scene");
    let cloud = init_splats_from_points(&points, 3);
    Fixture {
        reference: cam,
        view: traj.train[3],
        points,
        cloud,
    }
}

/// A fixed, dense cotangent for gradient benchmarks.
pub fn cotangent(cam: &Camera) -> RenderCotangent {
    let mut cot = RenderCotangent::zeros(cam.width, cam.height);
    for (i, v) in cot.color.data.iter_mut().enumerate() {
        *v = ((i * 7919) % 13) as f32 / 13.0 - 0.5;
    }
    cot.depth.data.iter_mut().for_each(|v| *v = 0.01);
    cot
}
