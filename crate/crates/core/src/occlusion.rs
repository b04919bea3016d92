//! Occlusion volume: voxels of the scene's occupancy grid that the reference
//! camera cannot see past the existing point cloud, found by drawing 3D
//! Bresenham lines from the camera to every voxel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::scene::{rasterize_points, Camera, MaskBuf, PointCloud, PointSource};

pub const OCCLUSION_GRAY: [f32; 3] = [0.5, 0.5, 0.5];
const GRID_MAGIC: &[u8; 4] = b"OCCG";
const GRID_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OcclusionError {
    #[error("cannot build an occupancy grid from an empty point cloud")]
    EmptyCloud,
    #[error("grid resolution must be at least 2 per axis, got {0:?}")]
    BadResolution([usize; 3]),
    #[error("malformed grid file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitset {
    len: usize,
    words: Vec<u64>,
}

impl Bitset {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }
}

/// Axis-aligned voxel grid with occupied and seen flags.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub dims: [usize; 3],
    pub occupied: Bitset,
    pub seen: Bitset,
}

impl OccupancyGrid {
    pub fn empty(min: Vector3<f64>, max: Vector3<f64>, dims: [usize; 3]) -> Result<Self, OcclusionError> {
        if dims.iter().any(|&d| d < 2) {
            return Err(OcclusionError::BadResolution(dims));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            min,
            max,
            dims,
            occupied: Bitset::new(n),
            seen: Bitset::new(n),
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_size(&self) -> Vector3<f64> {
        (self.max - self.min).component_div(&Vector3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ))
    }

    #[inline]
    pub fn linear(&self, v: [usize; 3]) -> usize {
        (v[2] * self.dims[1] + v[1]) * self.dims[0] + v[0]
    }

    #[inline]
    pub fn unlinear(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let y = (i / self.dims[0]) % self.dims[1];
        let z = i / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    /// Voxel containing `p`, clamping points on the far faces inward.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let size = self.voxel_size();
        let mut out = [0usize; 3];
        for a in 0..3 {
            if !(p[a] >= self.min[a] && p[a] <= self.max[a]) {
                return None;
            }
            let f = ((p[a] - self.min[a]) / size[a]).floor() as i64;
            out[a] = f.clamp(0, self.dims[a] as i64 - 1) as usize;
        }
        Some(out)
    }

    /// Like [`OccupancyGrid::voxel_of`] but clamps outside points to the border.
    pub fn clamped_voxel_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        let size = self.voxel_size();
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.min[a]) / size[a]).floor();
            out[a] = if f.is_nan() {
                0
            } else {
                f.clamp(0.0, self.dims[a] as f64 - 1.0) as usize
            };
        }
        out
    }

    pub fn center(&self, v: [usize; 3]) -> Vector3<f64> {
        let size = self.voxel_size();
        Vector3::new(
            self.min.x + (v[0] as f64 + 0.5) * size.x,
            self.min.y + (v[1] as f64 + 0.5) * size.y,
            self.min.z + (v[2] as f64 + 0.5) * size.z,
        )
    }

    pub fn is_occupied(&self, v: [usize; 3]) -> bool {
        self.occupied.get(self.linear(v))
    }

    pub fn is_seen(&self, v: [usize; 3]) -> bool {
        self.seen.get(self.linear(v))
    }

    /// Voxel where the segment from `from` to the center of `target` enters
    /// the grid; `from`'s own voxel when it is inside.
    pub fn entry_voxel(&self, from: &Vector3<f64>, target: [usize; 3]) -> [usize; 3] {
        if let Some(v) = self.voxel_of(from) {
            return v;
        }
        let to = self.center(target);
        let dir = to - from;
        let mut t_enter: f64 = 0.0;
        for a in 0..3 {
            if dir[a] != 0.0 {
                let t0 = (self.min[a] - from[a]) / dir[a];
                let t1 = (self.max[a] - from[a]) / dir[a];
                t_enter = t_enter.max(t0.min(t1));
            }
        }
        let entry = from + dir * t_enter.clamp(0.0, 1.0);
        self.clamped_voxel_of(&entry)
    }

    pub fn write(&self, path: &Path) -> Result<(), OcclusionError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, OcclusionError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Little-endian container: magic, version, dims (3 x u32), aabb (6 x f64),
    /// then the occupied and seen bitsets as u64 words.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.min.iter().chain(self.max.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for w in self.occupied.words.iter().chain(&self.seen.words) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, OcclusionError> {
        let bad = |m: &str| OcclusionError::Malformed(m.to_string());
        let header = 4 + 4 + 12 + 48;
        if bytes.len() < header || &bytes[0..4] != GRID_MAGIC {
            return Err(bad("missing header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(4) != GRID_VERSION {
            return Err(bad("unsupported version"));
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let min = Vector3::new(f64_at(20), f64_at(28), f64_at(36));
        let max = Vector3::new(f64_at(44), f64_at(52), f64_at(60));
        let mut grid = Self::empty(min, max, dims)?;
        let words = grid.occupied.words.len();
        if bytes.len() != header + 16 * words {
            return Err(bad("bitset length does not match dims"));
        }
        let word_at = |k: usize| u64::from_le_bytes(bytes[header + 8 * k..header + 8 * k + 8].try_into().unwrap());
        for k in 0..words {
            grid.occupied.words[k] = word_at(k);
            grid.seen.words[k] = word_at(words + k);
        }
        Ok(grid)
    }
}

/// Voxelizes `points` into a grid spanning their bounds inflated by 5% per
/// side. Every voxel starts unseen.
pub fn build_grid(points: &PointCloud, resolution: [usize; 3]) -> Result<OccupancyGrid, OcclusionError> {
    let (lo, hi) = points.bounds().ok_or(OcclusionError::EmptyCloud)?;
    let extent = hi - lo;
    let fallback = extent.max().max(1e-3);
    let mut min = lo;
    let mut max = hi;
    for a in 0..3 {
        let pad = if extent[a] > 0.0 { 0.05 * extent[a] } else { 0.05 * fallback };
        min[a] -= pad;
        max[a] += pad;
    }
    let mut grid = OccupancyGrid::empty(min, max, resolution)?;
    for p in &points.positions {
        if let Some(v) = grid.voxel_of(p) {
            let i = grid.linear(v);
            grid.occupied.set(i);
        }
    }
    Ok(grid)
}

/// Integer 3D Bresenham line from `start` to `end` inclusive. The driving axis
/// advances one voxel per step; minor axes follow round-half-up of the exact
/// line. `visit` returns `false` to stop early.
pub fn bresenham_3d(start: [i64; 3], end: [i64; 3], mut visit: impl FnMut([i64; 3]) -> bool) {
    let d = [end[0] - start[0], end[1] - start[1], end[2] - start[2]];
    let a = d.map(i64::abs);
    let s = d.map(i64::signum);
    let major = if a[0] >= a[1] && a[0] >= a[2] {
        0
    } else if a[1] >= a[2] {
        1
    } else {
        2
    };
    let n = a[major];
    let mut err = [2 * a[0] - n, 2 * a[1] - n, 2 * a[2] - n];
    let mut p = start;
    for step in 0..=n {
        if !visit(p) || step == n {
            return;
        }
        for k in 0..3 {
            if k == major {
                continue;
            }
            if err[k] >= 0 {
                p[k] += s[k];
                err[k] -= 2 * n;
            }
            err[k] += 2 * a[k];
        }
        p[major] += s[major];
    }
}

/// Marks every voxel reached from `camera_center` as seen. Each line stops
/// after marking the first occupied voxel it meets.
pub fn carve_visibility(grid: &mut OccupancyGrid, camera_center: &Vector3<f64>) {
    let seen: Vec<AtomicU64> = grid.seen.words.iter().map(|&w| AtomicU64::new(w)).collect();
    let g = &*grid;
    (0..g.voxel_count()).into_par_iter().for_each(|target| {
        let tv = g.unlinear(target);
        let start = g.entry_voxel(camera_center, tv);
        let to_i = |v: [usize; 3]| v.map(|c| c as i64);
        bresenham_3d(to_i(start), to_i(tv), |p| {
            let v = p.map(|c| c as usize);
            let i = g.linear(v);
            seen[i / 64].fetch_or(1 << (i % 64), Ordering::Relaxed);
            !g.occupied.get(i)
        });
    });
    for (w, a) in grid.seen.words.iter_mut().zip(seen) {
        *w = a.into_inner();
    }
}

/// Centers of every voxel never reached by carving, as mid-gray points.
pub fn occlusion_volume(grid: &OccupancyGrid) -> PointCloud {
    let footprint = 0.5 * grid.voxel_size().max();
    let mut out = PointCloud::default();
    for i in 0..grid.voxel_count() {
        if !grid.seen.get(i) {
            out.push(grid.center(grid.unlinear(i)), OCCLUSION_GRAY, PointSource::Occlusion, footprint);
        }
    }
    out
}

/// Inpainting mask for `camera`: 0 where the nearest rasterized point belongs
/// to the occlusion volume or nothing is hit, 1 where an observed point is
/// visible. The 0-region is then dilated by `dilation_px` (Euclidean disk).
pub fn render_inpaint_mask(
    observed: &PointCloud,
    occlusion: &PointCloud,
    camera: &Camera,
    dilation_px: usize,
) -> MaskBuf {
    let mut all = observed.clone();
    all.extend(occlusion);
    let n_observed = observed.len();
    let raster = rasterize_points(&all, camera);
    let mut mask = MaskBuf::new(camera.width, camera.height);
    for (px, m) in mask.data.iter_mut().enumerate() {
        *m = match raster.hit(px) {
            Some(i) if i < n_observed && all.sources[i] != PointSource::Occlusion => 1.0,
            _ => 0.0,
        };
    }
    erode_ones(&mask, dilation_px)
}

/// Keeps a 1 only where every in-image pixel within `radius` is also 1.
pub fn erode_ones(mask: &MaskBuf, radius: usize) -> MaskBuf {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width as i64, mask.height as i64);
    let r = radius as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.at(x as usize, y as usize) == 0.0 {
                continue;
            }
            let blocked = offsets.iter().any(|(dx, dy)| {
                let (xx, yy) = (x + dx, y + dy);
                xx >= 0 && yy >= 0 && xx < w && yy < h && mask.at(xx as usize, yy as usize) == 0.0
            });
            if blocked {
                out.set(x as usize, y as usize, 0.0);
            }
        }
    }
    out
}
