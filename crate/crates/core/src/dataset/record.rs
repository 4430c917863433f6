//! `.scr` tile records: one RGB tile and its raw population grid.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SCR1"             4 bytes
//! R                  u32   image side length
//! R_p                u32   population grid side length
//! image              3·R·R f32, channel-major, values in [-1, 1]
//! population         R_p·R_p f32, persons per cell, >= 0
//! id length          u16
//! tile id            UTF-8
//! ```

use std::path::Path;

use crate::dataset::Grid;
use crate::error::{Error, Result};
use crate::imagery::ImageTile;

pub const RECORD_MAGIC: &[u8; 4] = b"SCR1";

/// Paired image and population tile, stored at single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    pub tile_id: String,
    resolution: usize,
    pop_resolution: usize,
    image: Vec<f32>,
    pop: Vec<f32>,
}

impl TileRecord {
    pub fn new(tile_id: impl Into<String>, resolution: usize, image: Vec<f32>, pop_resolution: usize, pop: Vec<f32>) -> Result<Self> {
        let rec = Self {
            tile_id: tile_id.into(),
            resolution,
            pop_resolution,
            image,
            pop,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Builds a record from model-space values, rounding to single precision.
    pub fn from_tile(tile_id: impl Into<String>, image: &ImageTile, pop: &Grid) -> Result<Self> {
        if image.height() != image.width() || pop.height() != pop.width() {
            return Err(Error::Validation("records hold square tiles".into()));
        }
        Self::new(
            tile_id,
            image.height(),
            image.pixels().iter().map(|&v| v as f32).collect(),
            pop.height(),
            pop.data().iter().map(|&v| v as f32).collect(),
        )
    }

    fn validate(&self) -> Result<()> {
        let (r, rp) = (self.resolution, self.pop_resolution);
        if r == 0 || rp == 0 || rp > r {
            return Err(Error::Validation(format!("invalid resolutions R={r}, R_p={rp}")));
        }
        if self.image.len() != 3 * r * r || self.pop.len() != rp * rp {
            return Err(Error::Validation("payload length does not match resolutions".into()));
        }
        if let Some(v) = self.image.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("image value {v} outside [-1, 1]")));
        }
        if let Some(v) = self.pop.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Validation(format!("population value {v} is not a finite count")));
        }
        if self.tile_id.len() > u16::MAX as usize {
            return Err(Error::Validation("tile id longer than 65535 bytes".into()));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pop_resolution(&self) -> usize {
        self.pop_resolution
    }

    pub fn image(&self) -> ImageTile {
        let r = self.resolution;
        ImageTile::new(r, r, self.image.iter().map(|&v| v as f64).collect()).expect("validated record")
    }

    /// Raw population, persons per cell.
    pub fn pop(&self) -> Grid {
        let r = self.pop_resolution;
        Grid::new(r, r, self.pop.iter().map(|&v| v as f64).collect()).expect("validated record")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * (self.image.len() + self.pop.len()) + self.tile_id.len());
        out.extend_from_slice(RECORD_MAGIC);
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        out.extend_from_slice(&(self.pop_resolution as u32).to_le_bytes());
        for v in self.image.iter().chain(&self.pop) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tile_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.tile_id.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4)? != RECORD_MAGIC {
            return Err(Error::Format("bad record magic".into()));
        }
        let r = cur.u32()? as usize;
        let rp = cur.u32()? as usize;
        let floats = r
            .checked_mul(r)
            .and_then(|v| v.checked_mul(3))
            .and_then(|v| rp.checked_mul(rp).and_then(|p| v.checked_add(p)))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("record dimensions overflow".into()))?;
        if floats > bytes.len() {
            return Err(Error::Format("record truncated".into()));
        }
        let image = cur.f32s(3 * r * r)?;
        let pop = cur.f32s(rp * rp)?;
        let len = cur.u16()? as usize;
        let id = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("tile id is not UTF-8".into()))?
            .to_owned();
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        TileRecord::new(id, r, image, rp, pop)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("record truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
