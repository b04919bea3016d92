use super::plan::DensifyConfig;
use crate::render::RenderGrads;
use crate::scene::{OptimizerState, Splat, SplatCloud};

/// Running mean of the positional gradient norm per splat.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, grads: &RenderGrads) {
        if self.sum.len() != grads.splats.len() {
            *self = Self::new(grads.splats.len());
        }
        for (i, g) in grads.splats.iter().enumerate() {
            if g.is_zero() {
                continue;
            }
            let m = g.mu();
            self.sum[i] += (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            self.count[i] += 1;
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// Prunes near-transparent splats, then clones small and splits large splats
/// whose mean positional gradient exceeds the threshold, never exceeding
/// `max_splats`. Surviving splats keep their optimizer moments; new ones
/// start from zero.
pub fn densify_and_prune(cloud: &SplatCloud, stats: &GradStats, cfg: &DensifyConfig) -> SplatCloud {
    let n = cloud.len();
    let has_moments = cloud.optimizer.first.len() == n && cloud.optimizer.second.len() == n;
    let mut out = SplatCloud {
        splats: Vec::with_capacity(n),
        optimizer: OptimizerState {
            step: cloud.optimizer.step,
            ..Default::default()
        },
    };
    let zero = [0.0; crate::scene::PARAMS_PER_SPLAT];
    let push = |out: &mut SplatCloud, s: Splat, moments: Option<usize>| {
        out.splats.push(s);
        let (m, v) = match (moments, has_moments) {
            (Some(i), true) => (cloud.optimizer.first[i], cloud.optimizer.second[i]),
            _ => (zero, zero),
        };
        out.optimizer.first.push(m);
        out.optimizer.second.push(v);
    };

    let keep: Vec<usize> = (0..n).filter(|&i| cloud.splats[i].opacity() >= cfg.min_opacity).collect();
    let mut budget = cfg.max_splats.saturating_sub(keep.len().min(cfg.max_splats));
    for &i in keep.iter().take(cfg.max_splats) {
        let s = cloud.splats[i];
        let hot = stats.sum.len() == n && stats.mean(i) > cfg.grad_threshold;
        if !hot || budget == 0 {
            push(&mut out, s, Some(i));
            continue;
        }
        budget -= 1;
        let scale = s.scale();
        let largest = scale.iter().cloned().fold(0.0, f64::max);
        if largest <= cfg.split_scale {
            push(&mut out, s, Some(i));
            push(&mut out, s, None);
            continue;
        }
        // Split along the largest axis into two smaller splats.
        let axis = (0..3).max_by(|&a, &b| scale[a].total_cmp(&scale[b])).unwrap_or(0);
        let r = crate::scene::quat_to_rotation(s.quat.map(|q| q as f64)).unwrap_or_else(|_| nalgebra::Matrix3::identity());
        let offset = r.column(axis) * scale[axis];
        let shrink = (1.6f32).ln();
        for sign in [1.0, -1.0] {
            let mut c = s;
            for k in 0..3 {
                c.mu[k] = (s.mu[k] as f64 + sign * offset[k]) as f32;
                c.log_scale[k] = s.log_scale[k] - shrink;
            }
            push(&mut out, c, if sign > 0.0 { Some(i) } else { None });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::SplatGrad;

    fn grads(norms: &[f64]) -> RenderGrads {
        RenderGrads {
            splats: norms
                .iter()
                .map(|&g| {
                    let mut s = SplatGrad::default();
                    s.0[0] = g;
                    s
                })
                .collect(),
        }
    }

    #[test]
    fn infinite_thresholds_are_identity() {
        let cloud = SplatCloud::new(vec![Splat::isotropic([0.0, 0.0, 2.0], 0.1, 0.5, [0.5; 3]); 3]);
        let mut stats = GradStats::new(3);
        stats.accumulate(&grads(&[1.0, 2.0, 3.0]));
        let cfg = DensifyConfig {
            grad_threshold: f64::INFINITY,
            min_opacity: 0.0,
            ..Default::default()
        };
        assert_eq!(densify_and_prune(&cloud, &stats, &cfg), cloud);
    }

    #[test]
    fn transparent_splat_is_pruned() {
        let cloud = SplatCloud::new(vec![
            Splat::isotropic([0.0, 0.0, 2.0], 0.1, 0.5, [0.5; 3]),
            Splat::isotropic([0.0, 0.0, 2.0], 0.1, 1e-4, [0.5; 3]),
        ]);
        let out = densify_and_prune(&cloud, &GradStats::new(2), &DensifyConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out.splats[0], cloud.splats[0]);
    }

    #[test]
    fn count_never_exceeds_cap() {
        let splats: Vec<Splat> = (0..50)
            .map(|i| Splat::isotropic([i as f32 * 0.1, 0.0, 2.0], if i % 2 == 0 { 0.01 } else { 0.2 }, 0.5, [0.5; 3]))
            .collect();
        let mut cloud = SplatCloud::new(splats);
        let cfg = DensifyConfig {
            grad_threshold: 0.0,
            max_splats: 80,
            ..Default::default()
        };
        for _ in 0..5 {
            let mut stats = GradStats::new(cloud.len());
            stats.accumulate(&grads(&vec![1.0; cloud.len()]));
            cloud = densify_and_prune(&cloud, &stats, &cfg);
            assert!(cloud.len() <= 80);
            assert_eq!(cloud.optimizer.first.len(), cloud.len());
        }
        assert_eq!(cloud.len(), 80);
    }
}
