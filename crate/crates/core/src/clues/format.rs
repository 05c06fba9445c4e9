//! Binary gallery container.
//!
//! ```text
//! "PCGL" | version u32 | id_len u16 | id utf8 | count u32 | record* | crc32 u32
//! record: kind u8 (0 proposal, 1 truth) | entity u16 (0xFFFF for proposals)
//!         | slice u16 | area u32 | stability f64 | mean_intensity f64
//!         | run_count u32 | runs u16*
//! ```
//! All integers little-endian; the CRC covers every preceding byte.

use std::path::Path;

use thiserror::Error;

use super::{Gallery, MaskCandidate, TruthMask};
use crate::clinic::SLICE_SIZE;
use crate::raster::Mask;

pub const MAGIC: &[u8; 4] = b"PCGL";
pub const VERSION: u32 = 1;
const NO_ENTITY: u16 = u16::MAX;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    Magic,
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error("truncated")]
    Truncated,
    #[error("malformed: {0}")]
    Malformed(String),
}

pub fn encode_gallery(g: &Gallery) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(g.sample_id.len() as u16).to_le_bytes());
    out.extend_from_slice(g.sample_id.as_bytes());
    out.extend_from_slice(&((g.candidates.len() + g.truths.len()) as u32).to_le_bytes());
    let mut record =
        |kind: u8, entity: u16, slice: usize, mask: &Mask, stability: f64, mean: f64| {
            out.push(kind);
            out.extend_from_slice(&entity.to_le_bytes());
            out.extend_from_slice(&(slice as u16).to_le_bytes());
            out.extend_from_slice(&(mask.area() as u32).to_le_bytes());
            out.extend_from_slice(&stability.to_le_bytes());
            out.extend_from_slice(&mean.to_le_bytes());
            let runs = mask.to_runs();
            out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
            for r in runs {
                out.extend_from_slice(&r.to_le_bytes());
            }
        };
    for c in &g.candidates {
        record(
            0,
            NO_ENTITY,
            c.slice_index,
            &c.mask,
            c.stability,
            c.mean_intensity,
        );
    }
    for t in &g.truths {
        record(
            1,
            t.entity_id as u16,
            t.slice_index,
            &t.mask,
            1.0,
            t.mean_intensity,
        );
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or(FormatError::Truncated)?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_gallery(bytes: &[u8]) -> Result<Gallery, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::Magic);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(FormatError::Checksum);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let id_len = r.u16()? as usize;
    let sample_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| FormatError::Malformed("sample id is not utf-8".into()))?;
    let count = r.u32()?;
    let mut g = Gallery {
        sample_id,
        ..Gallery::default()
    };
    for _ in 0..count {
        let kind = r.u8()?;
        let entity = r.u16()?;
        let slice_index = r.u16()? as usize;
        let area = r.u32()? as usize;
        let stability = r.f64()?;
        let mean_intensity = r.f64()?;
        let n_runs = r.u32()? as usize;
        let runs: Vec<u16> = (0..n_runs).map(|_| r.u16()).collect::<Result<_, _>>()?;
        let mask = Mask::from_runs(SLICE_SIZE, SLICE_SIZE, &runs)
            .ok_or_else(|| FormatError::Malformed("run lengths do not cover the grid".into()))?;
        if mask.area() != area {
            return Err(FormatError::Malformed("area disagrees with mask".into()));
        }
        match (kind, entity) {
            (0, NO_ENTITY) => g.candidates.push(MaskCandidate {
                slice_index,
                mask,
                area,
                stability,
                mean_intensity,
            }),
            (1, e) if e != NO_ENTITY => g.truths.push(TruthMask {
                entity_id: e as usize,
                slice_index,
                mask,
                mean_intensity,
            }),
            _ => return Err(FormatError::Malformed(format!("bad record kind {kind}"))),
        }
    }
    if r.pos != body.len() {
        return Err(FormatError::Malformed("trailing bytes".into()));
    }
    Ok(g)
}

pub fn write_gallery(path: &Path, g: &Gallery) -> Result<(), FormatError> {
    std::fs::write(path, encode_gallery(g))?;
    Ok(())
}

pub fn read_gallery(path: &Path) -> Result<Gallery, FormatError> {
    decode_gallery(&std::fs::read(path)?)
}
