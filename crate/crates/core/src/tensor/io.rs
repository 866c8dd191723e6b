//! Binary tensor files.
//!
//! Layout: magic `CSTN`, `u8` dtype code, `u8` rank, `rank` little-endian
//! `u32` dimensions, then the values in row-major order, little-endian.

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"CSTN";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(TensorError::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Format(format!("rank {} exceeds 255", t.rank())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8, rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * dtype.width());
    match dtype {
        DType::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format(format!("truncated while reading {what}")),
        _ => TensorError::Io(e),
    })
}

/// Reads one tensor; `f32` payloads are widened to `f64`.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut head = [0u8; 2];
    read_exact(r, &mut head, "header")?;
    let dtype = DType::from_code(head[0])?;
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        read_exact(r, &mut d, "dimensions")?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::Format(format!("shape {shape:?} overflows")))?;
    let mut bytes = vec![0u8; n * dtype.width()];
    read_exact(r, &mut bytes, "values")?;
    let data = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(shape, data)
}
