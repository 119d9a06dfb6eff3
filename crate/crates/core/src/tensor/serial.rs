//! `TNSR0001` container: 8-byte magic, u32 rank, u64 extents, then the
//! little-endian f64 payload. All integers little-endian.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TNSR0001";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", magic)));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        let d = u64::from_le_bytes(b8);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
}
