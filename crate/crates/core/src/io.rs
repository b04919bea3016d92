//! File formats at the pipeline boundary: binary PLY splat clouds in the
//! common Gaussian-splatting layout, JSON pose trajectories and 8-bit PNG.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use nalgebra::Vector3;

use crate::scene::{Camera, DepthMap, GeometryError, ImageBuf, MaskBuf, PointCloud, PointSource, Rigid, Splat, SplatCloud};

/// Zeroth-order spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.28209479177387814;

const PLY_FIELDS: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
    "rot_3",
];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("malformed PLY at byte {offset}: {message}")]
    MalformedPly { offset: usize, message: String },
    #[error("pose {id:?} is not a rigid transform (orthonormality error {error:e})")]
    NonRigidTransform { id: String, error: f64 },
    #[error("pose file must contain exactly one ref pose, found {0}")]
    MissingRefPose(usize),
    #[error("invalid pose {id:?}: {message}")]
    InvalidPose { id: String, message: String },
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

pub fn color_to_dc(c: f32) -> f32 {
    ((c as f64 - 0.5) / SH_C0) as f32
}

pub fn dc_to_color(dc: f32) -> f32 {
    (0.5 + SH_C0 * dc as f64) as f32
}

pub fn ply_bytes(cloud: &SplatCloud) -> Vec<u8> {
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len()).into_bytes();
    for f in PLY_FIELDS {
        out.extend_from_slice(format!("property float {f}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for s in &cloud.splats {
        let dc = s.color.map(color_to_dc);
        let row = [
            s.mu[0], s.mu[1], s.mu[2], dc[0], dc[1], dc[2], s.opacity_logit, s.log_scale[0], s.log_scale[1], s.log_scale[2],
            s.quat[0], s.quat[1], s.quat[2], s.quat[3],
        ];
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_ply(cloud: &SplatCloud, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, ply_bytes(cloud)).map_err(file_err(path))
}

pub fn read_ply(path: &Path) -> Result<SplatCloud, IoError> {
    parse_ply(&std::fs::read(path).map_err(file_err(path))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(ty: &str) -> Option<Self> {
        Some(match ty {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

/// Vertex table of a binary little-endian PLY.
struct VertexTable<'a> {
    count: usize,
    stride: usize,
    /// (name, type, byte offset within a row)
    props: Vec<(String, Scalar, usize)>,
    body: &'a [u8],
    body_offset: usize,
}

fn malformed(offset: usize, message: impl Into<String>) -> IoError {
    IoError::MalformedPly {
        offset,
        message: message.into(),
    }
}

impl<'a> VertexTable<'a> {
    fn parse(bytes: &'a [u8]) -> Result<Self, IoError> {
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<(usize, String), IoError> {
            let start = *pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| malformed(start, "header is not terminated"))?;
            *pos = start + end + 1;
            let line = std::str::from_utf8(&bytes[start..start + end]).map_err(|_| malformed(start, "header is not UTF-8"))?;
            Ok((start, line.trim_end_matches('\r').to_string()))
        };
        let (off, magic) = next_line(&mut pos)?;
        if magic != "ply" {
            return Err(malformed(off, "missing ply magic"));
        }
        let mut count = None;
        let mut props = Vec::new();
        let mut stride = 0;
        loop {
            let (off, line) = next_line(&mut pos)?;
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                ["end_header"] => break,
                ["comment", ..] | ["obj_info", ..] | [] => {}
                ["format", fmt, _] => {
                    if *fmt != "binary_little_endian" {
                        return Err(malformed(off, format!("unsupported format {fmt}")));
                    }
                }
                ["element", name, n] => {
                    if count.is_some() || *name != "vertex" {
                        return Err(malformed(off, format!("unsupported element {name}")));
                    }
                    count = Some(n.parse::<usize>().map_err(|_| malformed(off, "bad vertex count"))?);
                }
                ["property", ty, name] => {
                    if count.is_none() {
                        return Err(malformed(off, "property outside the vertex element"));
                    }
                    let s = Scalar::parse(ty).ok_or_else(|| malformed(off, format!("unsupported property type {ty}")))?;
                    props.push((name.to_string(), s, stride));
                    stride += s.size();
                }
                _ => return Err(malformed(off, format!("unrecognized header line {line:?}"))),
            }
        }
        let count = count.ok_or_else(|| malformed(pos, "no vertex element"))?;
        let body = &bytes[pos..];
        let need = count.checked_mul(stride).ok_or_else(|| malformed(pos, "vertex count overflows"))?;
        if body.len() < need {
            return Err(malformed(bytes.len(), format!("expected {need} bytes of vertex data, found {}", body.len())));
        }
        if body.len() > need {
            return Err(malformed(pos + need, "trailing bytes after vertex data"));
        }
        Ok(Self {
            count,
            stride,
            props,
            body,
            body_offset: pos,
        })
    }

    /// Locates a property, requiring the given type.
    fn column(&self, name: &str, ty: Scalar) -> Result<(Scalar, usize), IoError> {
        match self.props.iter().find(|p| p.0 == name) {
            Some((_, s, o)) if *s == ty => Ok((*s, *o)),
            Some(_) => Err(malformed(self.body_offset, format!("property {name} has the wrong type"))),
            None => Err(malformed(self.body_offset, format!("missing property {name}"))),
        }
    }

    fn row(&self, i: usize) -> &[u8] {
        &self.body[i * self.stride..(i + 1) * self.stride]
    }
}

/// Parses a binary little-endian vertex PLY. Extra vertex properties (normals,
/// higher-order harmonics) are skipped; the fourteen splat fields are
/// required as floats.
pub fn parse_ply(bytes: &[u8]) -> Result<SplatCloud, IoError> {
    let table = VertexTable::parse(bytes)?;
    let cols = PLY_FIELDS
        .iter()
        .map(|f| table.column(f, Scalar::F32).map(|c| c.1))
        .collect::<Result<Vec<_>, _>>()?;
    let splats = (0..table.count)
        .map(|i| {
            let row = table.row(i);
            let f = |k: usize| {
                let o = cols[k];
                f32::from_le_bytes([row[o], row[o + 1], row[o + 2], row[o + 3]])
            };
            Splat {
                mu: [f(0), f(1), f(2)],
                color: [dc_to_color(f(3)), dc_to_color(f(4)), dc_to_color(f(5))],
                opacity_logit: f(6),
                log_scale: [f(7), f(8), f(9)],
                quat: [f(10), f(11), f(12), f(13)],
            }
        })
        .collect();
    Ok(SplatCloud::new(splats))
}

/// Point cloud as PLY with double positions, float colors, the source tag and
/// the lifting footprint.
pub fn point_ply_bytes(points: &PointCloud) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property float red\nproperty float green\nproperty float blue\n\
         property ushort source\nproperty double footprint\nend_header\n",
        points.len()
    )
    .into_bytes();
    for i in 0..points.len() {
        let p = &points.positions[i];
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in points.colors[i] {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&points.sources[i].tag().to_le_bytes());
        out.extend_from_slice(&points.footprints[i].to_le_bytes());
    }
    out
}

pub fn parse_point_ply(bytes: &[u8]) -> Result<PointCloud, IoError> {
    let t = VertexTable::parse(bytes)?;
    let cols = [
        t.column("x", Scalar::F64)?,
        t.column("y", Scalar::F64)?,
        t.column("z", Scalar::F64)?,
        t.column("red", Scalar::F32)?,
        t.column("green", Scalar::F32)?,
        t.column("blue", Scalar::F32)?,
        t.column("source", Scalar::U16)?,
        t.column("footprint", Scalar::F64)?,
    ];
    let mut out = PointCloud::default();
    for i in 0..t.count {
        let row = t.row(i);
        let v: Vec<f64> = cols.iter().map(|(s, o)| s.read(&row[*o..])).collect();
        out.push(
            Vector3::new(v[0], v[1], v[2]),
            [v[3] as f32, v[4] as f32, v[5] as f32],
            PointSource::from_tag(v[6] as u16),
            v[7],
        );
    }
    if !out.is_valid() {
        return Err(malformed(t.body_offset, "point data is not finite"));
    }
    Ok(out)
}

pub fn write_point_ply(points: &PointCloud, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, point_ply_bytes(points)).map_err(file_err(path))
}

pub fn read_point_ply(path: &Path) -> Result<PointCloud, IoError> {
    parse_point_ply(&std::fs::read(path).map_err(file_err(path))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseRole {
    Ref,
    Aux,
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub id: String,
    pub role: PoseRole,
    /// Camera-to-world transform, row-major 4×4.
    pub cam_to_world: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PoseEntry {
    pub fn from_camera(id: impl Into<String>, role: PoseRole, camera: &Camera) -> Self {
        Self {
            id: id.into(),
            role,
            cam_to_world: camera.cam_to_world.to_row_major(),
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            width: camera.width,
            height: camera.height,
        }
    }

    pub fn camera(&self) -> Result<Camera, IoError> {
        let pose = Rigid::from_row_major(&self.cam_to_world).map_err(|e| self.geometry_error(e))?;
        Camera::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose).map_err(|e| self.geometry_error(e))
    }

    fn geometry_error(&self, e: GeometryError) -> IoError {
        match e {
            GeometryError::NonRigidTransform(error) => IoError::NonRigidTransform { id: self.id.clone(), error },
            other => IoError::InvalidPose {
                id: self.id.clone(),
                message: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub poses: Vec<PoseEntry>,
}

impl PoseFile {
    /// Exactly one reference pose, unique ids, rigid transforms and valid
    /// intrinsics.
    pub fn validate(&self) -> Result<(), IoError> {
        let refs = self.poses.iter().filter(|p| p.role == PoseRole::Ref).count();
        if refs != 1 {
            return Err(IoError::MissingRefPose(refs));
        }
        let mut ids = std::collections::HashSet::new();
        for p in &self.poses {
            if !ids.insert(p.id.as_str()) {
                return Err(IoError::InvalidPose {
                    id: p.id.clone(),
                    message: "duplicate id".into(),
                });
            }
            p.camera()?;
        }
        Ok(())
    }

    pub fn reference(&self) -> Option<&PoseEntry> {
        self.poses.iter().find(|p| p.role == PoseRole::Ref)
    }

    pub fn with_role(&self, role: PoseRole) -> impl Iterator<Item = &PoseEntry> {
        self.poses.iter().filter(move |p| p.role == role)
    }

    pub fn cameras(&self, role: PoseRole) -> Result<Vec<Camera>, IoError> {
        self.with_role(role).map(PoseEntry::camera).collect()
    }

    pub fn to_json(&self) -> Result<String, IoError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let f: PoseFile = serde_json::from_str(text)?;
        f.validate()?;
        Ok(f)
    }
}

pub fn write_poses(poses: &PoseFile, path: &Path) -> Result<(), IoError> {
    poses.validate()?;
    std::fs::write(path, poses.to_json()?).map_err(file_err(path))
}

pub fn read_poses(path: &Path) -> Result<PoseFile, IoError> {
    PoseFile::from_json(&std::fs::read_to_string(path).map_err(file_err(path))?)
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> IoError {
    IoError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_png(path: &Path) -> Result<ImageBuf, IoError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    ImageBuf::from_vec(w as usize, h as usize, data).map_err(|e| image_err(path, e))
}

pub fn write_png(img: &ImageBuf, path: &Path) -> Result<(), IoError> {
    let raw: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    image::save_buffer(path, &raw, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| image_err(path, e))
}

/// Mask as 8-bit grayscale, 0 or 255.
pub fn write_mask_png(mask: &MaskBuf, path: &Path) -> Result<(), IoError> {
    let raw: Vec<u8> = mask.data.iter().map(|&v| to_u8(v)).collect();
    image::save_buffer(path, &raw, mask.width as u32, mask.height as u32, image::ExtendedColorType::L8)
        .map_err(|e| image_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<MaskBuf, IoError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    MaskBuf::from_vec(w as usize, h as usize, data).map_err(|e| image_err(path, e))
}

/// Depth as 16-bit grayscale scaled so `max_depth` maps to 65535; returns the
/// scale used. Zero stays zero (no coverage).
pub fn write_depth_png(depth: &DepthMap, path: &Path) -> Result<f32, IoError> {
    let max = depth.data.iter().cloned().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
    let raw: Vec<u16> = depth.data.iter().map(|&d| ((d / max).clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(depth.width as u32, depth.height as u32, raw)
        .ok_or_else(|| image_err(path, "buffer size"))?;
    buf.save(path).map_err(|e| image_err(path, e))?;
    Ok(max)
}
