use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Camera, DepthMap, ImageBuf, MaskBuf};

/// Where a point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointSource {
    /// Lifted from the reference view.
    Reference,
    /// Lifted from the outpainted auxiliary view with this index.
    Aux(u16),
    /// Voxel center of the occlusion volume.
    Occlusion,
}

impl PointSource {
    /// Compact tag used in files: 0 reference, 1..=65534 aux, 65535 occlusion.
    pub fn tag(self) -> u16 {
        match self {
            PointSource::Reference => 0,
            PointSource::Aux(i) => i.saturating_add(1).min(u16::MAX - 1),
            PointSource::Occlusion => u16::MAX,
        }
    }

    pub fn from_tag(tag: u16) -> Self {
        match tag {
            0 => PointSource::Reference,
            u16::MAX => PointSource::Occlusion,
            i => PointSource::Aux(i - 1),
        }
    }
}

/// Colored points with a world-space footprint (half-width) used when they are
/// rasterized as screen-space squares.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[f32; 3]>,
    pub sources: Vec<PointSource>,
    pub footprints: Vec<f64>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, p: Vector3<f64>, color: [f32; 3], source: PointSource, footprint: f64) {
        self.positions.push(p);
        self.colors.push(color);
        self.sources.push(source);
        self.footprints.push(footprint);
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
        self.sources.extend_from_slice(&other.sources);
        self.footprints.extend_from_slice(&other.footprints);
    }

    pub fn union(&self, other: &PointCloud) -> PointCloud {
        let mut out = self.clone();
        out.extend(other);
        out
    }

    pub fn is_valid(&self) -> bool {
        let n = self.positions.len();
        self.colors.len() == n
            && self.sources.len() == n
            && self.footprints.len() == n
            && self.positions.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self
                .colors
                .iter()
                .all(|c| c.iter().all(|v| (0.0..=1.0).contains(v)))
    }

    /// Axis-aligned bounds, `None` when empty.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }
}

/// Z-buffered point rendering: the nearest point index and its depth per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRaster {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub index: Vec<u32>,
}

impl PointRaster {
    pub const NONE: u32 = u32::MAX;

    pub fn hit(&self, pixel: usize) -> Option<usize> {
        let i = self.index[pixel];
        (i != Self::NONE).then_some(i as usize)
    }

    pub fn color_image(&self, cloud: &PointCloud) -> ImageBuf {
        let mut img = ImageBuf::new(self.width, self.height);
        for (px, chunk) in img.data.chunks_exact_mut(3).enumerate() {
            if let Some(i) = self.hit(px) {
                chunk.copy_from_slice(&cloud.colors[i]);
            }
        }
        img
    }

    /// Depth of the nearest point, `0` where nothing was hit.
    pub fn depth_map(&self) -> DepthMap {
        let mut d = DepthMap::new(self.width, self.height);
        for (px, v) in d.data.iter_mut().enumerate() {
            if self.hit(px).is_some() {
                *v = self.depth[px] as f32;
            }
        }
        d
    }

    pub fn hit_mask(&self) -> MaskBuf {
        let mut m = MaskBuf::new(self.width, self.height);
        for (px, v) in m.data.iter_mut().enumerate() {
            *v = if self.hit(px).is_some() { 1.0 } else { 0.0 };
        }
        m
    }
}

/// Renders points as depth-tested screen-space squares. A point covers every
/// pixel whose center lies within its projected footprint, and at least the
/// pixel containing its projection. Ties in depth go to the lower index.
pub fn rasterize_points(cloud: &PointCloud, camera: &Camera) -> PointRaster {
    let (w, h) = (camera.width, camera.height);
    let mut raster = PointRaster {
        width: w,
        height: h,
        depth: vec![f64::INFINITY; w * h],
        index: vec![PointRaster::NONE; w * h],
    };
    let w2c = camera.world_to_cam();
    for (i, p) in cloud.positions.iter().enumerate() {
        let c = w2c.apply(p);
        let Ok((u, v, z)) = camera.project_camera_point(&c) else {
            continue;
        };
        let fp = cloud.footprints.get(i).copied().unwrap_or(0.0).max(0.0);
        let hx = camera.fx * fp / z;
        let hy = camera.fy * fp / z;
        let Some((x0, x1)) = covered_range(u, hx, w) else {
            continue;
        };
        let Some((y0, y1)) = covered_range(v, hy, h) else {
            continue;
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let px = y * w + x;
                if z < raster.depth[px] {
                    raster.depth[px] = z;
                    raster.index[px] = i as u32;
                }
            }
        }
    }
    raster
}

fn covered_range(center: f64, half: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (center - half - 0.5).ceil();
    let hi = (center + half - 0.5).floor();
    let (lo, hi) = if lo > hi {
        let c = center.floor();
        (c, c)
    } else {
        (lo, hi)
    };
    if hi < 0.0 || lo >= size as f64 || !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    Some((lo.max(0.0) as usize, hi.min(size as f64 - 1.0) as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_point_wins_and_ties_go_to_lower_index() {
        let cam = Camera::looking_forward(10.0, 4, 4);
        let mut pc = PointCloud::default();
        pc.push(Vector3::new(0.0, 0.0, 5.0), [1.0, 0.0, 0.0], PointSource::Reference, 0.0);
        pc.push(Vector3::new(0.0, 0.0, 2.0), [0.0, 1.0, 0.0], PointSource::Reference, 0.0);
        pc.push(Vector3::new(0.0, 0.0, 2.0), [0.0, 0.0, 1.0], PointSource::Reference, 0.0);
        let r = rasterize_points(&pc, &cam);
        assert_eq!(r.hit(2 * 4 + 2), Some(1));
        assert_eq!(r.color_image(&pc).pixel(2, 2), [0.0, 1.0, 0.0]);
        assert_eq!(r.hit(0), None);
    }

    #[test]
    fn footprint_covers_neighbouring_pixels() {
        let cam = Camera::looking_forward(10.0, 8, 8);
        let mut pc = PointCloud::default();
        // Projects to (4, 4) with a half-width of 1.5 px.
        pc.push(Vector3::new(0.0, 0.0, 2.0), [1.0; 3], PointSource::Occlusion, 0.3);
        let r = rasterize_points(&pc, &cam);
        let covered = r.index.iter().filter(|&&i| i != PointRaster::NONE).count();
        assert_eq!(covered, 16);
    }

    #[test]
    fn source_tags_round_trip() {
        for s in [PointSource::Reference, PointSource::Aux(0), PointSource::Aux(7), PointSource::Occlusion] {
            assert_eq!(PointSource::from_tag(s.tag()), s);
        }
    }
}
