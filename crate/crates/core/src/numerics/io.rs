//! Binary tensor files.
//!
//! Layout: magic `WKT1`, `u32` rank, `u32` per dimension, `u8` dtype code
//! (0 = f32, 1 = f64), then the little-endian row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::scalar::{DType, Scalar};
use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WKT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE.code());
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

/// Decode into `T`, converting if the stored precision differs.
pub fn decode<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Tensor<T>> {
    let bad = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(bad("missing WKT1 magic"));
    }
    let read_u32 = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = read_u32(4)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(read_u32(8 + 4 * i)? as usize);
    }
    let code_at = 8 + 4 * rank;
    let code = *bytes.get(code_at).ok_or_else(|| bad("truncated header"))?;
    let dtype = DType::from_code(code).ok_or_else(|| bad("unknown dtype code"))?;
    let numel: usize = shape.iter().product();
    let payload = &bytes[code_at + 1..];
    if payload.len() != numel * dtype.size() {
        return Err(bad("payload length does not match shape"));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::of(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::of(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"WKT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], 0);
        assert_eq!(&b[17..21], &1.0f32.to_le_bytes());
        assert_eq!(&b[21..25], &(-2.0f32).to_le_bytes());
        assert_eq!(b.len(), 25);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = Path::new("mem");
        assert!(decode::<f32>(b"NOPE\0\0\0\0\0", p).is_err());
        let mut b = encode(&Tensor::<f64>::from_f64(&[3], &[1., 2., 3.]).unwrap());
        b.pop();
        assert!(decode::<f64>(&b, p).is_err());
        let mut b = encode(&Tensor::<f64>::from_f64(&[1], &[1.]).unwrap());
        b[12] = 7;
        assert!(decode::<f64>(&b, p).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let mut rng = crate::numerics::rng::SeededRng::new(seed);
            let t = Tensor::<f64>::randn(&dims, 1.0, &mut rng).unwrap();
            let back: Tensor<f64> = decode(&encode(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn f32_round_trip_through_files(n in 1usize..40, seed in any::<u64>()) {
            let mut rng = crate::numerics::rng::SeededRng::new(seed);
            let t = Tensor::<f32>::randn(&[n], 3.0, &mut rng).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.wkt");
            write_tensor(&path, &t).unwrap();
            prop_assert_eq!(read_tensor::<f32>(&path).unwrap(), t);
        }
    }
}
