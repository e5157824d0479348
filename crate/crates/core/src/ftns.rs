//! The FTNS binary tensor format.
//!
//! Layout: magic `FTNS`, `u8` version (1), `u8` dtype, `u8` ndim, `ndim`
//! little-endian `u32` dimensions, then the row-major payload in little
//! endian. dtype 0 is `f32`; dtype 1 is `u32`, used for integer label maps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTNS";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U32: u8 = 1;

/// An integer tensor stored with dtype 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u32>,
}

fn header(dtype: u8, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::dim("FTNS supports at most 255 dimensions"));
    }
    let mut out = Vec::with_capacity(7 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::dim(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_f32(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_F32, t.shape())?;
    out.reserve(4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_u32(t: &LabelTensor) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_U32, &t.shape)?;
    out.reserve(4 * t.data.len());
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "FTNS",
        reason: reason.into(),
    }
}

/// Parses the header and returns `(dtype, shape, payload)`.
fn parse(bytes: &[u8]) -> Result<(u8, Vec<usize>, &[u8])> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("missing FTNS magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    let ndim = bytes[6] as usize;
    let body = &bytes[7..];
    if body.len() < 4 * ndim {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = body[..4 * ndim]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = &body[4 * ndim..];
    let n: usize = shape.iter().product();
    if payload.len() != 4 * n {
        return Err(bad(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    Ok((dtype, shape, payload))
}

pub fn decode_f32(bytes: &[u8]) -> Result<Tensor> {
    let (dtype, shape, payload) = parse(bytes)?;
    if dtype != DTYPE_F32 {
        return Err(bad(format!("expected dtype 0, found {dtype}")));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn decode_u32(bytes: &[u8]) -> Result<LabelTensor> {
    let (dtype, shape, payload) = parse(bytes)?;
    if dtype != DTYPE_U32 {
        return Err(bad(format!("expected dtype 1, found {dtype}")));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(LabelTensor { shape, data })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_bytes(path.as_ref(), &encode_f32(t)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_f32(&read_bytes(path.as_ref())?)
}

pub fn write_labels(path: impl AsRef<Path>, t: &LabelTensor) -> Result<()> {
    write_bytes(path.as_ref(), &encode_u32(t)?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelTensor> {
    decode_u32(&read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode_f32(&t).unwrap();
        assert_eq!(&b[..7], b"FTNS\x01\x00\x02");
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 7 + 8 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros(&[3]);
        let mut b = encode_f32(&t).unwrap();
        assert!(decode_f32(&b[..b.len() - 1]).is_err());
        assert!(decode_u32(&b).is_err());
        b[0] = b'X';
        assert!(decode_f32(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = Tensor::new(shape.clone(), data).unwrap();
            prop_assert_eq!(decode_f32(&encode_f32(&t).unwrap()).unwrap(), t);
            let l = LabelTensor { shape, data: (0..n as u32).map(|i| i ^ seed).collect() };
            prop_assert_eq!(decode_u32(&encode_u32(&l).unwrap()).unwrap(), l);
        }
    }
}
