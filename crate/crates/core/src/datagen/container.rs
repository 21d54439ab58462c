//! LGNK binary tensor container.
//!
//! ```text
//! "LGNK" | u32 version=1 | u32 dtype | u32 ndim | ndim x u64 extents | payload
//! ```
//! All integers and payload values are little-endian; the payload is row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkern::{Complex64, Tensor};

pub const MAGIC: &[u8; 4] = b"LGNK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileDtype {
    Real32 = 1,
    Real64 = 2,
    Complex128 = 3,
}

impl FileDtype {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(FileDtype::Real32),
            2 => Some(FileDtype::Real64),
            3 => Some(FileDtype::Complex128),
            _ => None,
        }
    }

    pub fn element_bytes(self) -> usize {
        match self {
            FileDtype::Real32 => 4,
            FileDtype::Real64 => 8,
            FileDtype::Complex128 => 16,
        }
    }

    /// Lossless file dtype for an in-memory tensor.
    pub fn native(t: &Tensor) -> Self {
        if t.is_complex() {
            FileDtype::Complex128
        } else {
            FileDtype::Real64
        }
    }
}

pub fn header_len(ndim: usize) -> usize {
    16 + 8 * ndim
}

/// Appends one tensor record. Real32 narrows the values.
pub fn encode_tensor(out: &mut Vec<u8>, tensor: &Tensor, dtype: FileDtype) -> Result<()> {
    if tensor.is_complex() != (dtype == FileDtype::Complex128) {
        return Err(Error::Contract(format!(
            "cannot store {:?} tensor as {:?}",
            tensor.dtype(),
            dtype
        )));
    }
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.reserve(tensor.numel() * dtype.element_bytes());
    match dtype {
        FileDtype::Real32 => {
            for &v in tensor.re() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        FileDtype::Real64 => {
            for &v in tensor.re() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        FileDtype::Complex128 => {
            for z in tensor.cx() {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::Parse {
                offset: self.pos as u64,
                reason: format!("truncated {}: expected {} bytes, found {}", what, len, available),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes the record starting at `offset`; returns the tensor (real32
/// promoted to real64), its stored dtype, and the offset just past it.
pub fn decode_tensor(bytes: &[u8], offset: usize) -> Result<(Tensor, FileDtype, usize)> {
    let mut cur = Cursor { bytes, pos: offset };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: offset as u64,
            reason: format!("bad magic {:?}, expected \"LGNK\"", String::from_utf8_lossy(magic)),
        });
    }
    let at = cur.pos as u64;
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: at,
            reason: format!("unsupported version {}, expected {}", version, VERSION),
        });
    }
    let at = cur.pos as u64;
    let code = cur.u32("dtype")?;
    let dtype = FileDtype::from_code(code).ok_or_else(|| Error::Parse {
        offset: at,
        reason: format!("unknown dtype code {}", code),
    })?;
    let ndim = cur.u32("ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(cur.u64("extent")? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|c| c.checked_mul(dtype.element_bytes()))
        .ok_or_else(|| Error::Parse {
            offset: cur.pos as u64,
            reason: format!("extents {:?} overflow", shape),
        })?;
    let payload = cur.take(count, "payload")?;
    let tensor = match dtype {
        FileDtype::Real32 => Tensor::from_real(
            &shape,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        )?,
        FileDtype::Real64 => Tensor::from_real(
            &shape,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        )?,
        FileDtype::Complex128 => Tensor::from_complex(
            &shape,
            payload
                .chunks_exact(16)
                .map(|c| {
                    Complex64::new(
                        f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                        f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                    )
                })
                .collect(),
        )?,
    };
    Ok((tensor, dtype, cur.pos))
}

pub fn write_tensor_file(path: &Path, tensor: &Tensor, dtype: FileDtype) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(&mut buf, tensor, dtype)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<(Tensor, FileDtype)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tensor, dtype, end) = decode_tensor(&bytes, 0)?;
    if end != bytes.len() {
        return Err(Error::Parse {
            offset: end as u64,
            reason: format!("{} trailing bytes after payload", bytes.len() - end),
        });
    }
    Ok((tensor, dtype))
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_arithmetic() {
        let t = Tensor::from_real(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&mut buf, &t, FileDtype::Real32).unwrap();
        assert_eq!(header_len(2), 32);
        assert_eq!(buf.len(), 32 + 6 * 4);
        assert_eq!(&buf[..4], b"LGNK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[24..32].try_into().unwrap()), 3);
    }

    #[test]
    fn complex_roundtrip_bit_identical() {
        let data: Vec<Complex64> = (0..12).map(|i| Complex64::new(i as f64 / 7.0, -(i as f64).sqrt())).collect();
        let t = Tensor::from_complex(&[3, 4], data).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&mut buf, &t, FileDtype::Complex128).unwrap();
        let (back, dtype, end) = decode_tensor(&buf, 0).unwrap();
        assert_eq!(dtype, FileDtype::Complex128);
        assert_eq!(end, buf.len());
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let t = Tensor::from_real(&[4], vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&mut buf, &t, FileDtype::Real64).unwrap();
        buf.truncate(buf.len() - 3);
        let err = decode_tensor(&buf, 0).unwrap_err();
        match err {
            Error::Parse { offset, reason } => {
                assert_eq!(offset, 24);
                assert!(reason.contains("expected 32 bytes, found 29"), "{}", reason);
            }
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let t = Tensor::from_real(&[1], vec![1.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&mut buf, &t, FileDtype::Real64).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad, 0), Err(Error::Parse { offset: 0, .. })));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(decode_tensor(&bad, 0), Err(Error::Parse { offset: 4, .. })));
        let mut bad = buf;
        bad[8] = 7;
        assert!(matches!(decode_tensor(&bad, 0), Err(Error::Parse { offset: 8, .. })));
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let t = Tensor::from_real(&[1], vec![1.0]).unwrap();
        assert!(encode_tensor(&mut Vec::new(), &t, FileDtype::Complex128).is_err());
    }
}
