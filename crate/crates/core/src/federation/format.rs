//! The `.fdrl` model file format.
//!
//! All integers little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `FDRL` |
//! | 2 | version (`1`) |
//! | 2 | cell id |
//! | 2 | slice id |
//! | 2 | number of layer dims `n` |
//! | 4·n | dims, `u32` each |
//! | 8 | sample count |
//! | 4·P | parameters as `f32`, canonical order |

use thiserror::Error;

use super::{AgentId, ModelSnapshot};

pub const MAGIC: [u8; 4] = *b"FDRL";
pub const FORMAT_VERSION: u16 = 1;

const FIXED_HEADER: usize = 4 + 2 + 2 + 2 + 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected {FORMAT_VERSION}")]
    VersionMismatch(u16),
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("invalid layer dims {0:?}")]
    InvalidDims(Vec<u32>),
    #[error("length mismatch: dims imply {expected} bytes, payload has {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

pub fn serialize_model(snapshot: &ModelSnapshot) -> Vec<u8> {
    let mut out = Vec::with_capacity(FIXED_HEADER + 4 * snapshot.layer_dims.len() + 8 + 4 * snapshot.params.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&snapshot.id.cell_id.to_le_bytes());
    out.extend_from_slice(&snapshot.id.slice_id.to_le_bytes());
    out.extend_from_slice(&(snapshot.layer_dims.len() as u16).to_le_bytes());
    for d in &snapshot.layer_dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&snapshot.sample_count.to_le_bytes());
    for p in &snapshot.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parameter count implied by dims, or `None` on overflow.
fn checked_param_count(dims: &[u32]) -> Option<usize> {
    dims.windows(2).try_fold(0usize, |acc, w| {
        let (i, o) = (w[0] as usize, w[1] as usize);
        i.checked_mul(o)?.checked_add(o)?.checked_add(acc)
    })
}

pub fn deserialize_model(bytes: &[u8]) -> Result<ModelSnapshot, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch(version));
    }
    let cell_id = r.u16()?;
    let slice_id = r.u16()?;
    let n_dims = r.u16()? as usize;
    let layer_dims = (0..n_dims).map(|_| r.u32()).collect::<Result<Vec<u32>, _>>()?;
    let sample_count = r.u64()?;
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(FormatError::InvalidDims(layer_dims));
    }
    let count = checked_param_count(&layer_dims).ok_or_else(|| FormatError::InvalidDims(layer_dims.clone()))?;
    let expected = count
        .checked_mul(4)
        .and_then(|b| b.checked_add(r.pos))
        .ok_or_else(|| FormatError::InvalidDims(layer_dims.clone()))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated { needed: expected, available: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(FormatError::LengthMismatch { expected, actual: bytes.len() });
    }
    let params = r
        .take(count * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(ModelSnapshot {
        id: AgentId { cell_id, slice_id },
        layer_dims,
        params,
        sample_count,
    })
}
