//! Binary netpbm images: P5 (gray) and P6 (RGB), maxval up to 65535.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
}

fn header_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() && buf[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Data("netpbm header truncated".into()));
    }
    Ok(&buf[start..*pos])
}

fn header_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(buf, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data(format!("netpbm {what} `{}` is not a number", String::from_utf8_lossy(tok))))
}

pub fn decode_pnm(buf: &[u8]) -> Result<Pnm> {
    let channels = match buf.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Data("not a binary netpbm image (expected P5 or P6)".into())),
    };
    let mut pos = 2;
    let width = header_number(buf, &mut pos, "width")?;
    let height = header_number(buf, &mut pos, "height")?;
    let maxval = header_number(buf, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Data(format!("netpbm image has empty extent {width}×{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Data(format!("netpbm maxval {maxval} outside 1..=65535")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match buf.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Data("netpbm header not terminated".into())),
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Data("netpbm extent overflow".into()))?;
    let wide = maxval > 255;
    let bytes = if wide { 2 * n } else { n };
    let raster = buf
        .get(pos..pos + bytes)
        .ok_or_else(|| Error::Data(format!("netpbm raster truncated: need {bytes} bytes, have {}", buf.len() - pos)))?;
    let samples: Vec<u16> = if wide {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    if let Some(&v) = samples.iter().find(|&&v| v as usize > maxval) {
        return Err(Error::Data(format!("netpbm sample {v} exceeds maxval {maxval}")));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_pnm(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        for &s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(img.samples.iter().map(|&s| s as u8));
    }
    out
}

impl Pnm {
    /// `3×H×W` tensor in `[0, 1]`; gray images are replicated to three
    /// channels.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let scale = 1.0 / self.maxval as f64;
        Tensor::from_fn(vec![3, h, w], |i| {
            let ch = i / (h * w);
            let px = i % (h * w);
            let src = if c == 1 { px } else { px * 3 + ch };
            T::of(self.samples[src] as f64 * scale)
        })
    }

    /// 8-bit P6 image from a `3×H×W` tensor, values clamped to `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Pnm> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim("from_tensor", format!("expected 3×H×W, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let mut samples = vec![0u16; 3 * h * w];
        for (i, v) in t.data().iter().enumerate() {
            let ch = i / (h * w);
            let px = i % (h * w);
            samples[px * 3 + ch] = (v.f64().clamp(0.0, 1.0) * 255.0).round() as u16;
        }
        Ok(Pnm {
            width: w,
            height: h,
            channels: 3,
            maxval: 255,
            samples,
        })
    }
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Pnm> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_pnm(path: impl AsRef<Path>, img: &Pnm) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_pixel_scales_to_unit() {
        let img = decode_pnm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        let t: Tensor<f32> = img.to_tensor();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn comments_and_gray() {
        let img = decode_pnm(b"P5 # c\n2 # w\n1\n# m\n4\n\x00\x04").unwrap();
        assert_eq!((img.width, img.height, img.channels, img.maxval), (2, 1, 1, 4));
        let t: Tensor<f64> = img.to_tensor();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_pnm(b"P6\n2 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_pnm(b"P5\n1 1\n10\n\x0b").is_err());
        assert!(decode_pnm(b"P5\n1 1\n0\n\x00").is_err());
        assert!(decode_pnm(b"P5\n1").is_err());
    }

    #[test]
    fn sixteen_bit_roundtrip() {
        let img = Pnm {
            width: 2,
            height: 1,
            channels: 1,
            maxval: 1000,
            samples: vec![7, 1000],
        };
        assert_eq!(decode_pnm(&encode_pnm(&img)).unwrap(), img);
    }
}
