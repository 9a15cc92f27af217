//! Binary tensor files.
//!
//! Layout: `b"DRST"`, `u8` version (1), `u8` rank, `rank × u32` dims (LE),
//! then the elements as little-endian `f32`. Writing a value that `f32`
//! cannot hold exactly is an error, so every file reads back bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"DRST";
pub const VERSION: u8 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.shape().len() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("rank {} does not fit the header", t.shape().len())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (i, v) in t.data().iter().enumerate() {
        let wide = v.as_f64();
        let narrow = wide as f32;
        if narrow as f64 != wide && !wide.is_nan() {
            return Err(Error::InvalidArgument(format!("element {i} = {wide:e} is not representable as f32")));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<T: Scalar>(mut bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |detail: &str| Error::Format { what: "tensor file", detail: detail.to_string() };
    let mut head = [0u8; 6];
    bytes.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if head[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        bytes.read_exact(&mut d).map_err(|_| bad("truncated dims"))?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(bad(&format!("expected {} data bytes, found {}", numel * 4, bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
