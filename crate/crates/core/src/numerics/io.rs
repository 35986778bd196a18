//! Little-endian tensor binary format.
//!
//! Layout: magic `PDTN`, rank as `u64`, each dim as `u64`, then the values
//! as `f32` in row-major order.

use std::io::{Read, Write};

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PDTN";

/// Byte length of the header for a tensor of the given rank.
pub fn header_len(rank: usize) -> usize {
    4 + 8 + 8 * rank
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.rank()) + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let fail = |m: &str| Error::Format(format!("tensor: {m}"));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let word = |i: usize| -> Result<u64> {
        let b = bytes.get(i..i + 8).ok_or_else(|| fail("truncated header"))?;
        Ok(u64::from_le_bytes(b.try_into().expect("8-byte slice")))
    };
    let rank = word(4)? as usize;
    if rank > 16 {
        return Err(fail("implausible rank"));
    }
    let shape = (0..rank)
        .map(|i| word(12 + 8 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let body = &bytes[header_len(rank)..];
    if body.len() != 4 * n {
        return Err(fail(&format!("expected {} payload bytes, found {}", 4 * n, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor<T: Scalar, W: Write>(t: &Tensor<T>, mut w: W) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}
