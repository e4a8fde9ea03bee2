//! `AFPT` tensor blobs: magic, version u32, dtype u8 (0 = f32), rank u8,
//! dims u32[rank], little-endian f32 payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};
use crate::tensor::{Tensor, MAX_RANK};

pub const BLOB_MAGIC: &[u8; 4] = b"AFPT";
pub const BLOB_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    let bad = |msg: &str| Error::format(origin, msg);
    if bytes.len() < 10 || &bytes[..4] != BLOB_MAGIC {
        return Err(bad("not a tensor blob (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(bad(&format!("unsupported blob version {version}")));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(bad(&format!("unsupported dtype code {}", bytes[8])));
    }
    let rank = bytes[9] as usize;
    if rank > MAX_RANK {
        return Err(bad(&format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let header = 10 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated dims"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[10 + 4 * i..14 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad(&format!("payload is {} bytes, expected {}", bytes.len() - header, 4 * n)));
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&dims, data)
}

pub fn save(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode(t))
}

pub fn load(path: &Path) -> Result<Tensor<f32>> {
    decode(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_as_documented() {
        let t = Tensor::new(&[2, 1], vec![1.0f32, -0.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"AFPT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 0);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 26);
        assert_eq!(decode(&b, Path::new("x")).unwrap(), t);
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let b = encode(&Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap());
        assert!(decode(&b[..b.len() - 1], Path::new("x")).is_err());
        let mut m = b.clone();
        m[0] = b'X';
        assert!(decode(&m, Path::new("x")).is_err());
        let mut d = b.clone();
        d[8] = 1;
        assert!(decode(&d, Path::new("x")).is_err());
    }
}
