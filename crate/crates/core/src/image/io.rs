//! Netpbm (P5/P6, 8-bit) and PFM (32-bit float) images.

use std::fs;
use std::path::Path;

use super::ImageTensor;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Refuse headers describing more samples than this.
const MAX_SAMPLES: usize = 1 << 28;

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            what: "image",
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.buf[start..self.pos]).map_err(|_| self.err("non-ASCII header token"))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        self.skip_space_and_comments();
        let start = self.pos;
        let tok = self.token()?.to_string();
        tok.parse().map_err(|_| Error::Parse {
            what: "image",
            offset: start as u64,
            message: format!("invalid {what} `{tok}`"),
        })
    }

    /// Consumes the single whitespace byte that ends every header.
    fn end(&mut self) -> Result<()> {
        match self.buf.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err("missing whitespace after header")),
        }
    }
}

fn checked_samples(h: &Header, w: usize, ht: usize, c: usize) -> Result<usize> {
    if w == 0 || ht == 0 {
        return Err(h.err("zero image dimension"));
    }
    w.checked_mul(ht)
        .and_then(|n| n.checked_mul(c))
        .filter(|&n| n <= MAX_SAMPLES)
        .ok_or_else(|| h.err(format!("dimension overflow: {w}x{ht}x{c}")))
}

pub fn decode_image(buf: &[u8]) -> Result<ImageTensor> {
    let mut h = Header { buf, pos: 0 };
    let magic = h.token()?.to_string();
    match magic.as_str() {
        "P5" | "P6" => {
            let c = if magic == "P6" { 3 } else { 1 };
            let w: usize = h.number("width")?;
            let ht: usize = h.number("height")?;
            let maxval: usize = h.number("maxval")?;
            if !(1..=255).contains(&maxval) {
                return Err(h.err(format!("only 8-bit images are supported, maxval {maxval}")));
            }
            h.end()?;
            let n = checked_samples(&h, w, ht, c)?;
            let body = &buf[h.pos..];
            if body.len() < n {
                return Err(Error::Parse {
                    what: "image",
                    offset: buf.len() as u64,
                    message: format!("truncated pixel data: need {n} bytes, found {}", body.len()),
                });
            }
            let data = body[..n].iter().map(|&b| b as f64 / maxval as f64).collect();
            ImageTensor::new(Tensor::new(vec![ht, w, c], data)?)
        }
        "PF" | "Pf" => {
            let c = if magic == "PF" { 3 } else { 1 };
            let w: usize = h.number("width")?;
            let ht: usize = h.number("height")?;
            let scale: f64 = h.number("scale")?;
            if scale == 0.0 || !scale.is_finite() {
                return Err(h.err("PFM scale must be non-zero"));
            }
            h.end()?;
            let n = checked_samples(&h, w, ht, c)?;
            let body = &buf[h.pos..];
            if body.len() < 4 * n {
                return Err(Error::Parse {
                    what: "image",
                    offset: buf.len() as u64,
                    message: format!("truncated float data: need {} bytes, found {}", 4 * n, body.len()),
                });
            }
            let little = scale < 0.0;
            let mut data = vec![0.0; n];
            let row = w * c;
            // PFM stores rows bottom to top
            for (i, chunk) in body[..4 * n].chunks_exact(4).enumerate() {
                let bytes: [u8; 4] = chunk.try_into().unwrap();
                let v = if little { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) };
                let (r, col) = (i / row, i % row);
                data[(ht - 1 - r) * row + col] = v as f64;
            }
            ImageTensor::new(Tensor::new(vec![ht, w, c], data)?)
        }
        _ => Err(Error::Parse {
            what: "image",
            offset: 0,
            message: format!("bad magic `{magic}`, expected P5, P6, PF or Pf"),
        }),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary PPM (P6); values are clamped and rounded.
pub fn encode_ppm(img: &ImageTensor) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::dim("encode_ppm", "2 (channels)", 3, img.channels()));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// 8-bit binary PGM (P5).
pub fn encode_pgm(img: &ImageTensor) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::dim("encode_pgm", "2 (channels)", 1, img.channels()));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Little-endian PFM; values are stored as `f32` without clamping.
pub fn encode_pfm(img: &ImageTensor) -> Vec<u8> {
    let magic = if img.channels() == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row = img.width() * img.channels();
    for r in (0..img.height()).rev() {
        for &v in &img.data()[r * row..][..row] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    decode_image(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Format by extension: `.ppm`, `.pgm` or `.pfm`.
pub fn write_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "ppm" => encode_ppm(img)?,
        "pgm" => encode_pgm(img)?,
        "pfm" => encode_pfm(img),
        _ => return Err(Error::invalid(format!("unknown image extension for {}", path.display()))),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(9, 13, c, |_| rng.random::<f32>() as f64).unwrap()
    }

    #[test]
    fn pfm_roundtrip_bit_exact() {
        for c in [1, 3] {
            let img = random_image(c, c as u64);
            let back = decode_image(&encode_pfm(&img)).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn pfm_reads_big_endian() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.25f32.to_be_bytes());
        bytes.extend_from_slice(&0.5f32.to_be_bytes());
        assert_eq!(decode_image(&bytes).unwrap().data(), &[0.25, 0.5]);
    }

    #[test]
    fn ppm_roundtrip_within_quantization() {
        let img = random_image(3, 7);
        let back = decode_image(&encode_ppm(&img).unwrap()).unwrap();
        assert!(img.tensor().max_abs_diff(back.tensor()).unwrap() <= 1.0 / 510.0 + 1e-12);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        assert_eq!(decode_image(&bytes).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let err = decode_image(b"P7\n1 1\n255\n\0").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");

        let err = decode_image(b"P6\n2 x\n255\n").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 5, .. }), "{err}");

        let err = decode_image(b"P6\n99999999 99999999\n255\n").unwrap_err();
        assert!(err.to_string().contains("overflow"), "{err}");

        let err = decode_image(b"P6\n2 2\n255\n\0\0\0").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
