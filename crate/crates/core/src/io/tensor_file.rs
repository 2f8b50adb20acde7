//! Tensor files: the magic `CQTNSR1`, the rank and each extent as little-endian
//! `u64`, then the values as little-endian `f64` in row-major order.

use std::path::Path;

use super::{write_bytes, IoError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"CQTNSR1";

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], IoError> {
    if bytes.len() < n {
        return Err(IoError::invalid("tensor file", format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8], what: &str) -> Result<u64, IoError> {
    Ok(u64::from_le_bytes(take(bytes, 8, what)?.try_into().expect("8 bytes")))
}

pub fn tensor_from_bytes(mut bytes: &[u8]) -> Result<Tensor, IoError> {
    if take(&mut bytes, MAGIC.len(), "magic")? != MAGIC {
        return Err(IoError::invalid("tensor file", "bad magic, expected CQTNSR1"));
    }
    let rank = take_u64(&mut bytes, "rank")?;
    if rank > 16 {
        return Err(IoError::invalid("tensor file", format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for i in 0..rank {
        let d = take_u64(&mut bytes, &format!("extent {i}"))?;
        shape.push(usize::try_from(d).map_err(|_| IoError::invalid("tensor file", "extent too large"))?);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(8).is_some_and(|b| b == bytes.len()))
        .ok_or_else(|| {
            IoError::invalid("tensor file", format!("data section of {} bytes does not match shape {shape:?}", bytes.len()))
        })?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    debug_assert_eq!(data.len(), len);
    Tensor::new(shape, data).map_err(|e| IoError::invalid("tensor file", e))
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<(), IoError> {
    write_bytes(path, &tensor_to_bytes(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, IoError> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    tensor_from_bytes(&bytes).map_err(|e| e.in_file(path))
}
