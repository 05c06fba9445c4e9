//! Binary checkpoint container.
//!
//! ```text
//! "PCRL" | version u32 | header_len u32 | header json | array_count u32
//! | (name_len u16 | name | dtype u8 | rank u8 | extents u32* | data)*
//! | crc32 u32
//! ```
//! The header carries the model config, vocabulary and instruction ids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{InstructionSet, ModelConfig};
use super::state::ModelState;
use super::ModelError;
use crate::tensor::{Real, Tensor};
use crate::text::Vocab;

pub const MAGIC: &[u8; 4] = b"PCRL";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    instructions: InstructionSet,
}

pub fn encode_checkpoint<T: Real>(state: &ModelState<T>) -> Result<Vec<u8>, ModelError> {
    let header = serde_json::to_vec(&Header {
        config: state.config.clone(),
        vocab: state.vocab.clone(),
        instructions: state.instructions.clone(),
    })
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(state.params().len() as u32).to_le_bytes());
    for (name, p) in state.names().iter().zip(state.params()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.push(p.rank() as u8);
        for &e in p.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| ModelError::Checkpoint("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_array<S: Real, T: Real>(c: &mut Cursor, n: usize) -> Result<Vec<T>, ModelError> {
    let bytes = c.take(n * S::BYTES)?;
    Ok(bytes
        .chunks_exact(S::BYTES)
        .map(|b| T::from_f64_lossy(S::read_le(b).as_f64()))
        .collect())
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ModelState<T>, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 12 {
        return Err(bad("truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(bad("checksum mismatch"));
    }
    let mut c = Cursor { buf: body, pos: 4 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let hlen = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(hlen)?)
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    let count = c.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| bad("array name is not utf-8"))?;
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => read_array::<f32, T>(&mut c, n)?,
            1 => read_array::<f64, T>(&mut c, n)?,
            other => return Err(ModelError::Checkpoint(format!("unknown dtype {other}"))),
        };
        names.push(name);
        params.push(Tensor::new(shape, data)?);
    }
    if c.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    let state = ModelState::from_parts(
        header.config,
        header.vocab,
        header.instructions,
        names,
        params,
    );
    state.check_layout()?;
    if !state.is_finite() {
        return Err(bad("non-finite parameter"));
    }
    Ok(state)
}

pub fn save_checkpoint<T: Real>(state: &ModelState<T>, path: &Path) -> Result<(), ModelError> {
    let bytes = encode_checkpoint(state)?;
    std::fs::write(path, bytes)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelState<T>, ModelError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// Loads and insists on a particular model config.
pub fn load_checkpoint_for<T: Real>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<ModelState<T>, ModelError> {
    let state = load_checkpoint(path)?;
    if &state.config != expected {
        return Err(ModelError::ConfigMismatch(format!(
            "checkpoint config {:?} differs from expected {:?}",
            state.config, expected
        )));
    }
    Ok(state)
}
