//! `BGV1` checkpoint container:
//!
//! ```text
//! magic "BGV1" | config hash u64 | config json (u32 len + bytes) | role u8
//! | layout: u32 count, then per entry (u16 name len, name, u8 rank,
//!   u64 dims.., u64 offset) | u64 param count | f64 params
//! ```
//! All integers and floats little-endian.

use std::io::{Read, Write};

use super::{EncoderConfig, ModelSnapshot, ParamEntry, ParamLayout, Role};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BGV1";

pub(crate) fn io_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_snapshot<W: Write>(w: &mut W, m: &ModelSnapshot) -> Result<()> {
    let cfg = serde_json::to_vec(&m.config).expect("config serializes");
    let layout = m.layout();
    let mut buf = Vec::with_capacity(64 + cfg.len() + m.params.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&m.config.hash().to_le_bytes());
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.push(match m.role {
        Role::Random => 0,
        Role::Pretrained => 1,
        Role::Finetuned => 2,
    });
    buf.extend_from_slice(&(layout.entries.len() as u32).to_le_bytes());
    for e in &layout.entries {
        buf.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.shape.len() as u8);
        for &dim in &e.shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(e.offset as u64).to_le_bytes());
    }
    write_f64_block(&mut buf, &m.params);
    w.write_all(&buf).map_err(io_err)
}

pub(crate) fn write_f64_block(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(b)
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

pub(crate) fn read_f64_block<R: Read>(r: &mut R, limit: usize) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    if n > limit {
        return Err(Error::Format(format!(
            "block of {n} values exceeds {limit}"
        )));
    }
    (0..n).map(|_| read_f64(r)).collect()
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<ModelSnapshot> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let hash = read_u64(r)?;
    let cfg_len = read_u32(r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg).map_err(io_err)?;
    let config: EncoderConfig =
        serde_json::from_slice(&cfg).map_err(|e| Error::Format(format!("config: {e}")))?;
    if config.hash() != hash {
        return Err(Error::Format("config hash does not match header".into()));
    }
    let role = match read_array::<1, _>(r)?[0] {
        0 => Role::Random,
        1 => Role::Pretrained,
        2 => Role::Finetuned,
        x => return Err(Error::Format(format!("unknown role tag {x}"))),
    };
    let count = read_u32(r)? as usize;
    let mut layout = ParamLayout::default();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let rank = read_array::<1, _>(r)?[0] as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = read_u64(r)? as usize;
        layout.entries.push(ParamEntry {
            name: String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?,
            shape,
            offset,
        });
    }
    if layout != config.layout() {
        return Err(Error::Format("layout table does not match config".into()));
    }
    let params = read_f64_block(r, layout.total())?;
    ModelSnapshot::new(config, role, params).map_err(|e| Error::Format(e.to_string()))
}
