//! Binary tensor blobs.
//!
//! `UHRT` layout: the four magic bytes, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the values as little-endian `f32`.
//! Values are narrowed from `f64` on write.
//!
//! `UHRD` is the same layout with `f64` payload. Checkpoints use it so a
//! resumed run continues from exactly the stored parameters.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const UHRT_MAGIC: &[u8; 4] = b"UHRT";
pub const UHRD_MAGIC: &[u8; 4] = b"UHRD";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn magic(self) -> &'static [u8; 4] {
        match self {
            Precision::F32 => UHRT_MAGIC,
            Precision::F64 => UHRD_MAGIC,
        }
    }
}

/// Appends one encoded tensor to `out`.
pub fn encode_into(out: &mut Vec<u8>, tensor: &Tensor, precision: Precision) {
    out.extend_from_slice(precision.magic());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match precision {
        Precision::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

pub fn encode(tensor: &Tensor, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(&mut out, tensor, precision);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: self.pos,
                msg: format!("unexpected end of data (need {n} more bytes)"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes one tensor starting at `offset`; returns it with the offset just
/// past its payload. `path` only labels errors.
pub fn decode_at(bytes: &[u8], offset: usize, path: &Path) -> Result<(Tensor, usize)> {
    let mut cur = Cursor {
        bytes,
        pos: offset,
        path,
    };
    let magic = cur.take(4)?;
    let precision = if magic == UHRT_MAGIC {
        Precision::F32
    } else if magic == UHRD_MAGIC {
        Precision::F64
    } else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg: format!("bad magic {magic:?}"),
        });
    };
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match precision {
        Precision::F32 => {
            let raw = cur.take(n * 4)?;
            for c in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        Precision::F64 => {
            let raw = cur.take(n * 8)?;
            for c in raw.chunks_exact(8) {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                data.push(f64::from_le_bytes(b));
            }
        }
    }
    Ok((Tensor::new(shape, data)?, cur.pos))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, _) = decode_at(bytes, 0, Path::new("<memory>"))?;
    Ok(t)
}

pub fn write_file(path: &Path, tensor: &Tensor, precision: Precision) -> Result<()> {
    fs::write(path, encode(tensor, precision)).map_err(|e| Error::io(path, e))
}

/// Writes several tensors back to back into one file.
pub fn write_many(path: &Path, tensors: &[&Tensor], precision: Precision) -> Result<()> {
    let mut out = Vec::new();
    for t in tensors {
        encode_into(&mut out, t, precision);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, _) = decode_at(&bytes, 0, path)?;
    Ok(t)
}

pub fn read_many(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (t, next) = decode_at(&bytes, pos, path)?;
        out.push(t);
        pos = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uhrt_header_layout() {
        let t = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode(&t, Precision::F32);
        assert_eq!(&bytes[0..4], b"UHRT");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 4 + 4 + 8 + 6 * 4);
    }

    #[test]
    fn f32_dump_truncates() {
        let t = Tensor::new([1], vec![0.1]).unwrap();
        let back = decode(&encode(&t, Precision::F32)).unwrap();
        assert_eq!(back.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn f64_blob_is_exact() {
        let t = Tensor::new([3], vec![0.1, -1.0 / 3.0, 1e-300]).unwrap();
        let back = decode(&encode(&t, Precision::F64)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_blob_reports_offset() {
        let t = Tensor::new([4], vec![1.0; 4]).unwrap();
        let bytes = encode(&t, Precision::F32);
        let err = decode(&bytes[..bytes.len() - 2]).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(decode(b"NOPE\0\0\0\0").is_err());
    }
}
