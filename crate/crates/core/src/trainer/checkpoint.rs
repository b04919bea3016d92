//! Resumable training state: the stage, the next iteration to run, every
//! splat parameter and the optimizer moments, in a little-endian container.

use std::path::Path;

use super::{Stage, TrainError};
use crate::scene::{OptimizerState, Splat, SplatCloud, PARAMS_PER_SPLAT};

const MAGIC: &[u8; 4] = b"OSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// First iteration that has not run yet.
    pub next_iteration: usize,
    pub cloud: SplatCloud,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.cloud.len();
        let mut out = Vec::with_capacity(32 + n * PARAMS_PER_SPLAT * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage.tag());
        out.extend_from_slice(&(self.next_iteration as u64).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.cloud.optimizer.step.to_le_bytes());
        let opt = &self.cloud.optimizer;
        let has_moments = opt.first.len() == n && opt.second.len() == n;
        out.push(has_moments as u8);
        for s in &self.cloud.splats {
            put_params(&mut out, &s.to_params());
        }
        if has_moments {
            for row in opt.first.iter().chain(&opt.second) {
                put_params(&mut out, row);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(r.error(&format!("unsupported version {version}")));
        }
        let tag = r.take(1)?[0];
        let stage = Stage::from_tag(tag).ok_or_else(|| r.error(&format!("unknown stage {tag}")))?;
        let next_iteration = u64::from_le_bytes(r.array()?) as usize;
        let n = u64::from_le_bytes(r.array()?) as usize;
        let step = u64::from_le_bytes(r.array()?);
        let has_moments = r.take(1)?[0] != 0;
        let rows = if has_moments { 3 * n } else { n };
        if rows.checked_mul(PARAMS_PER_SPLAT * 4) != Some(bytes.len() - r.pos) {
            return Err(r.error(&format!("payload does not hold {n} splats")));
        }
        let splats = (0..n).map(|_| r.params().map(|p| Splat::from_params(&p))).collect::<Result<Vec<_>, _>>()?;
        let mut optimizer = OptimizerState::zeros(n);
        optimizer.step = step;
        if has_moments {
            for row in optimizer.first.iter_mut().chain(optimizer.second.iter_mut()) {
                *row = r.params()?;
            }
        }
        Ok(Self {
            stage,
            next_iteration,
            cloud: SplatCloud { splats, optimizer },
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_params(out: &mut Vec<u8>, p: &[f32; PARAMS_PER_SPLAT]) {
    for v in p {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn error(&self, msg: &str) -> TrainError {
        TrainError::Checkpoint(format!("{msg} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], TrainError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn params(&mut self) -> Result<[f32; PARAMS_PER_SPLAT], TrainError> {
        let mut p = [0.0; PARAMS_PER_SPLAT];
        for v in &mut p {
            *v = f32::from_le_bytes(self.array()?);
        }
        Ok(p)
    }
}
