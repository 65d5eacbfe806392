use std::fs;
use std::path::Path;

use super::RepresentationSet;
use crate::error::{Error, Result};
use crate::tensor::io::Reader;
use crate::tensor::DType;

pub const ACTV_MAGIC: &[u8; 4] = b"ACTV";
pub const ACTV_VERSION: u32 = 1;

/// Serializes a set as ACTV: magic, version u32, dtype u8, n u64, dim u64,
/// label length u32 + UTF-8 label, row-major little-endian values.
pub fn encode_activations(set: &RepresentationSet, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + set.label.len() + set.data().len() * dtype.width());
    out.extend_from_slice(ACTV_MAGIC);
    out.extend_from_slice(&ACTV_VERSION.to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u64).to_le_bytes());
    out.extend_from_slice(&(set.label.len() as u32).to_le_bytes());
    out.extend_from_slice(set.label.as_bytes());
    for &v in set.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn save_activations(path: &Path, set: &RepresentationSet, dtype: DType) -> Result<()> {
    fs::write(path, encode_activations(set, dtype)).map_err(|e| Error::io(path, e))
}

/// Parses ACTV bytes; values are widened to f64.
pub fn decode_activations(buf: &[u8]) -> Result<RepresentationSet> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != ACTV_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected ACTV")));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != ACTV_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let code = r.u8("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::format(at, format!("unknown dtype code {code}")))?;
    let n = r.u64("n_samples")? as usize;
    let dim = r.u64("dim")? as usize;
    let label_len = r.u32("label length")? as usize;
    let at = r.offset();
    let label = std::str::from_utf8(r.take(label_len, "label")?)
        .map_err(|_| Error::format(at, "label is not UTF-8"))?
        .to_string();
    let count = n.checked_mul(dim).ok_or_else(|| Error::format(r.offset(), format!("{n} x {dim} overflows")))?;
    let data = r.values::<f64>(dtype, count)?;
    r.finish()?;
    RepresentationSet::new(n, dim, data, &label).map_err(|e| Error::format(r.offset(), e.to_string()))
}

pub fn load_activations(path: &Path) -> Result<RepresentationSet> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_activations(&buf)
}
