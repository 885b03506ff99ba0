//! Binary tensor files.
//!
//! ```text
//! "LSDT"            4 bytes magic
//! version   u32 LE  = 1
//! rank      u32 LE  1..=5
//! extents   rank × u32 LE
//! payload   product(extents) × f32 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"LSDT";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * tensor.rank() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, FormatError> {
    if bytes.len() < 12 {
        return Err(FormatError::BadHeader(format!(
            "{} bytes is shorter than the fixed header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = read_u32(bytes, 4).unwrap_or_default();
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let rank = read_u32(bytes, 8).unwrap_or_default();
    if rank == 0 {
        return Err(FormatError::BadHeader("empty shape".into()));
    }
    if rank as usize > MAX_RANK {
        return Err(FormatError::RankOutOfRange(rank));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for r in 0..rank as usize {
        let d = read_u32(bytes, 12 + 4 * r)
            .ok_or_else(|| FormatError::BadHeader("extents cut short".into()))?;
        if d == 0 {
            return Err(FormatError::BadHeader(format!("extent {r} is zero")));
        }
        shape.push(d as usize);
    }
    let header = 12 + 4 * rank as usize;
    let count: usize = shape.iter().product();
    let expected = count * 4;
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(FormatError::TruncatedPayload { expected, actual });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(&shape, data).map_err(|e| FormatError::BadHeader(e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_fill;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"LSDT");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn empty_shape_is_bad_header() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LSDT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(FormatError::BadHeader(_))));
        assert!(matches!(decode(&[]), Err(FormatError::BadHeader(_))));
    }

    #[test]
    fn distinct_error_codes() {
        let t = gaussian_fill::<f32>(&[3, 3], 1, 0.0, 1.0).unwrap();
        let good = encode(&t);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let e1 = decode(&bad_magic).unwrap_err();
        assert_eq!(e1, FormatError::BadMagic);

        let mut big_rank = good.clone();
        big_rank[8..12].copy_from_slice(&6u32.to_le_bytes());
        let e2 = decode(&big_rank).unwrap_err();
        assert_eq!(e2, FormatError::RankOutOfRange(6));

        let short = &good[..good.len() - 4];
        let e3 = decode(short).unwrap_err();
        assert_eq!(
            e3,
            FormatError::TruncatedPayload {
                expected: 36,
                actual: 32
            }
        );
        let mut long = good.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode(&long), Err(FormatError::TruncatedPayload { .. })));

        let codes = [e1.code(), e2.code(), e3.code()];
        assert_eq!(codes, [1, 4, 5]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = gaussian_fill::<f32>(&[2, 3, 4, 5, 1], 3, 0.0, 1.0).unwrap();
        let path = dir.path().join("t.lsdt");
        write_tensor(&path, &t).unwrap();
        assert!(read_tensor(&path).unwrap().bitwise_eq(&t));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(shape in proptest::collection::vec(1usize..4, 1..=5), bits in any::<u32>()) {
            let len: usize = shape.iter().product();
            let data: Vec<f32> = (0..len)
                .map(|i| f32::from_bits(bits.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919)))
                .map(|v| if v.is_nan() { 1.5 } else { v })
                .collect();
            let t = Tensor::new(&shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert!(back.bitwise_eq(&t));
        }
    }
}
