//! `CANT` binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CANT" | u32 version = 1 | u32 ndim | u64 extent × ndim | f32 payload (row-major)
//! ```

use std::path::Path;

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

pub const CANT_MAGIC: &[u8; 4] = b"CANT";
pub const CANT_VERSION: u32 = 1;

pub fn encode_cant<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(CANT_MAGIC);
    out.extend_from_slice(&CANT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data(format!("CANT stream truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_cant<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CANT_MAGIC {
        return Err(Error::Data("not a CANT stream (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CANT_VERSION {
        return Err(Error::Data(format!("unsupported CANT version {version}")));
    }
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        let e = r.u64()?;
        shape.push(usize::try_from(e).map_err(|_| Error::Data(format!("extent {e} too large")))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Data("CANT extents overflow".into()))?;
    let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Data("CANT payload overflow".into()))?)?;
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after CANT payload",
            bytes.len() - r.pos
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect::<Vec<_>>();
    debug_assert_eq!(numel(&shape), data.len());
    Ok(Tensor::from_parts(shape, data))
}

pub fn write_cant<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_cant(t)).map_err(|e| Error::io(path, e))
}

pub fn read_cant<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cant(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode_cant(&t);
        let mut want = Vec::new();
        want.extend_from_slice(b"CANT");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let t = Tensor::<f32>::ones(vec![3]);
        let good = encode_cant(&t);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_cant::<f32>(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_cant::<f32>(&bad).is_err());
        assert!(decode_cant::<f32>(&good[..good.len() - 1]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_cant::<f32>(&long).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            (shape, data) in prop::collection::vec(0usize..5, 0..4).prop_flat_map(|shape| {
                let n: usize = shape.iter().product();
                (Just(shape), prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO, n))
            })
        ) {
            let t = Tensor::new(shape, data).unwrap();
            let back: Tensor<f32> = decode_cant(&encode_cant(&t)).unwrap();
            prop_assert_eq!(t.shape(), back.shape());
            let same = t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
