//! Binary parameter checkpoints.
//!
//! Layout, little-endian throughout: magic `EVLT`, `u32` version, `u32`
//! parameter count, then per parameter a `u16` name length, the UTF-8 name,
//! a `u8` rank, `rank` × `u32` extents and the raw `f64` data.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EVLT";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid("tensor extent exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn err(&self, message: String) -> Error {
        Error::Parse {
            what: "checkpoint",
            offset: self.pos as u64,
            message,
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected EVLT".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let start = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Parse {
                what: "checkpoint",
                offset: start as u64,
                message: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > buf.len() - r.pos {
            return Err(r.err(format!("truncated data for `{name}`")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        let t = Tensor::new(shape, data).map_err(|e| r.err(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last parameter".into()));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let entries: Vec<(&str, &Tensor)> = store.iter().map(|p| (p.name.as_str(), &p.tensor)).collect();
    fs::write(path, encode(&entries)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads `path` into `store`, which must have exactly the same parameter names.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    store.load(read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let a = Tensor::new(vec![2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 3.0]).unwrap();
        let b = Tensor::scalar(std::f64::consts::PI);
        let bytes = encode(&[("enc.0.w", &a), ("t", &b)]).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].0, "enc.0.w");
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[0].1.shape(), a.shape());
        assert_eq!(bits(&back[1].1), bits(&b));
        assert_eq!(encode(&[("enc.0.w", &back[0].1), ("t", &back[1].1)]).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::scalar(1.0);
        let bytes = encode(&[("ab", &t)]).unwrap();
        assert_eq!(&bytes[..4], b"EVLT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &2u16.to_le_bytes());
        assert_eq!(&bytes[14..16], b"ab");
        assert_eq!(bytes[16], 1);
        assert_eq!(bytes.len(), 16 + 1 + 4 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::scalar(1.0);
        let mut bytes = encode(&[("a", &t)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
