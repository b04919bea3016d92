use crate::render::RenderGrads;
use crate::scene::{OptimizerState, SplatCloud, PARAMS_PER_SPLAT};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// One bias-corrected adaptive-moment step on every raw parameter, with a
/// separate learning rate per parameter slot. Colors are kept in `[0, 1]`.
pub fn adam_step(cloud: &mut SplatCloud, grads: &RenderGrads, lrs: &[f64; PARAMS_PER_SPLAT]) {
    let n = cloud.len();
    if cloud.optimizer.first.len() != n || cloud.optimizer.second.len() != n {
        let step = cloud.optimizer.step;
        cloud.optimizer = OptimizerState::zeros(n);
        cloud.optimizer.step = step;
    }
    let opt = &mut cloud.optimizer;
    opt.step += 1;
    let c1 = 1.0 - BETA1.powi(opt.step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - BETA2.powi(opt.step.min(i32::MAX as u64) as i32);
    for (i, splat) in cloud.splats.iter_mut().enumerate() {
        let g = &grads.splats[i].0;
        let mut p = splat.to_params();
        let (m, v) = (&mut opt.first[i], &mut opt.second[i]);
        for k in 0..PARAMS_PER_SPLAT {
            let mk = BETA1 * m[k] as f64 + (1.0 - BETA1) * g[k];
            let vk = BETA2 * v[k] as f64 + (1.0 - BETA2) * g[k] * g[k];
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = lrs[k] * (mk / c1) / ((vk / c2).sqrt() + ADAM_EPS);
            p[k] = (p[k] as f64 - update) as f32;
        }
        for c in &mut p[11..14] {
            *c = c.clamp(0.0, 1.0);
        }
        *splat = crate::scene::Splat::from_params(&p);
    }
}
