//! TNSR binary tensor format (all integers little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `TNSR` |
//! | 4     | format version (u32) |
//! | 1     | dtype (0 = f32, 1 = f64) |
//! | 4     | rank (u32) |
//! | 8·rank| dims (u64 each) |
//! | …     | row-major values |

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{numel, DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u32 = 1;

pub fn write_tensor_to<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TNSR_MAGIC);
    out.extend_from_slice(&TNSR_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + t.len() * 8);
    write_tensor_to(t, &mut buf);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor that reports the byte offset of any failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes for {what}, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// Reads `n` values of `dtype`, widening into `T`. Narrowing f64 into f32
    /// is refused so a read is always lossless.
    pub(crate) fn values<T: Scalar>(&mut self, dtype: DType, n: usize) -> Result<Vec<T>> {
        if T::DTYPE == DType::F32 && dtype == DType::F64 {
            return Err(Error::format(self.offset(), "f64 payload cannot be read losslessly as f32"));
        }
        let bytes =
            n.checked_mul(dtype.width()).ok_or_else(|| Error::format(self.offset(), "value count overflows"))?;
        let raw = self.take(bytes, "values")?;
        Ok(match dtype {
            DType::F32 => {
                raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect()
            }
            DType::F64 => {
                raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect()
            }
        })
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.offset(), format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn read_tensor_from<T: Scalar>(buf: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != TNSR_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != TNSR_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let code = r.u8("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::format(at, format!("unknown dtype code {code}")))?;
    let rank = r.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        let at = r.offset();
        let d = r.u64("dim")?;
        shape.push(usize::try_from(d).map_err(|_| Error::format(at, "dimension too large"))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(r.offset(), "element count overflows"))?;
    debug_assert_eq!(n, numel(&shape));
    let data = r.values::<T>(dtype, n)?;
    r.finish()?;
    Ok(Tensor::raw(shape, data))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[2, 1], Init::Values(vec![1.0, -2.0])).unwrap();
        let mut b = Vec::new();
        write_tensor_to(&t, &mut b);
        let mut expect = b"TNSR".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(0);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn widening_read_and_refused_narrowing() {
        let t = Tensor::<f32>::new(&[3], Init::Values(vec![0.1, 0.2, 0.3])).unwrap();
        let mut b = Vec::new();
        write_tensor_to(&t, &mut b);
        let wide: Tensor<f64> = read_tensor_from(&b).unwrap();
        assert_eq!(wide.data()[0], 0.1f32 as f64);
        let d = t.cast::<f64>();
        let mut b64 = Vec::new();
        write_tensor_to(&d, &mut b64);
        assert!(matches!(read_tensor_from::<f32>(&b64), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_and_magic_errors_carry_offsets() {
        let t = Tensor::<f32>::new(&[4], Init::Ones).unwrap();
        let mut b = Vec::new();
        write_tensor_to(&t, &mut b);
        match read_tensor_from::<f32>(&b[..b.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4 + 4 + 1 + 4 + 8),
            other => panic!("{other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor_from::<f32>(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
