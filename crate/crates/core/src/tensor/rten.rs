//! `.rten` raw tensor files: magic `RTEN`, `u8` version, `u8` rank, `rank`
//! little-endian `u32` extents, then the row-major little-endian `f32`
//! payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RTEN";
const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |m: &str| Error::Format(format!("rten: {m}"));
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(fmt(&format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    if rank > 4 {
        return Err(fmt(&format!("rank {rank} exceeds 4")));
    }
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(fmt("truncated header"));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    if bytes.len() != header + 4 * numel {
        return Err(fmt(&format!(
            "payload is {} bytes, dims {dims:?} need {}",
            bytes.len() - header,
            4 * numel
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&dims, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..6], b"RTEN\x01\x02");
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
