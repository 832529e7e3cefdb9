//! Tensor container files.
//!
//! An ASCII header `tensor v1 f32 <rank> <d0> <d1> ...\n` followed by the
//! elements as little-endian `f32` in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut header = format!("tensor v1 f32 {}", t.rank());
    for d in t.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    let mut out = Vec::with_capacity(header.len() + 4 * t.numel());
    out.extend_from_slice(header.as_bytes());
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing header line")?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not ASCII")?;
    let mut fields = header.split(' ');
    if fields.next() != Some("tensor") || fields.next() != Some("v1") || fields.next() != Some("f32") {
        return Err(format!("unrecognized header {header:?}"));
    }
    let rank: usize = fields
        .next()
        .and_then(|r| r.parse().ok())
        .ok_or("missing rank")?;
    let shape = fields
        .map(|d| d.parse::<usize>().map_err(|_| format!("bad extent {d:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if shape.len() != rank {
        return Err(format!("rank {rank} but {} extents", shape.len()));
    }
    let body = &bytes[nl + 1..];
    let n: usize = shape.iter().product();
    if body.len() != 4 * n {
        return Err(format!("expected {} payload bytes, found {}", 4 * n, body.len()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode(&t);
        assert!(bytes.starts_with(b"tensor v1 f32 2 2 1\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.5f32).to_le_bytes());
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn scalar_has_rank_zero() {
        let bytes = encode(&Tensor::scalar(3.0f32));
        assert!(bytes.starts_with(b"tensor v1 f32 0\n"));
        assert_eq!(decode(&bytes).unwrap().item(), 3.0);
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = encode(&Tensor::ones(&[3]));
        bytes.pop();
        assert!(decode(&bytes).unwrap_err().contains("payload"));
    }
}
