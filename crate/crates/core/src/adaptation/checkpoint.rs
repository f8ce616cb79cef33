//! Adapter checkpoints: factor tensors, the subject embedding and a manifest
//! tied to the base model's fingerprint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};
use crate::store::{self, TensorEntry};

use super::lora::{LoraAdapter, Projection, SubjectToken};

pub const MANIFEST: &str = "manifest.toml";
const FORMAT: &str = "warpkit-adapters";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterRecord {
    layer: usize,
    target: Projection,
    scale: f64,
    a: TensorEntry,
    b: TensorEntry,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    dtype: DType,
    base_checksum: String,
    token_id: usize,
    token: TensorEntry,
    adapters: Vec<AdapterRecord>,
}

pub fn save_adapters<T: Scalar>(
    dir: &Path,
    adapters: &[LoraAdapter<T>],
    token: &SubjectToken<T>,
    base_checksum: &str,
) -> Result<()> {
    let mut records = Vec::with_capacity(adapters.len());
    for ad in adapters {
        let stem = format!("layers.{}.{}", ad.layer(), ad.target());
        let entries = store::write_entries(
            dir,
            &[(format!("{stem}.lora_a"), &ad.a), (format!("{stem}.lora_b"), &ad.b)],
        )?;
        let [a, b]: [TensorEntry; 2] = entries.try_into().expect("two entries written");
        records.push(AdapterRecord {
            layer: ad.layer(),
            target: ad.target(),
            scale: ad.scale().to_f64(),
            a,
            b,
        });
    }
    let token_entry = store::write_entries(dir, &[("subject".to_string(), &token.embedding)])?.remove(0);
    store::write_toml(
        &dir.join(MANIFEST),
        &Manifest {
            format: FORMAT.into(),
            version: VERSION,
            dtype: T::DTYPE,
            base_checksum: base_checksum.into(),
            token_id: token.id,
            token: token_entry,
            adapters: records,
        },
    )
}

/// Load adapters; fails if they were trained against a different base model.
pub fn load_adapters<T: Scalar>(dir: &Path, base_checksum: &str) -> Result<(Vec<LoraAdapter<T>>, SubjectToken<T>)> {
    let path = dir.join(MANIFEST);
    let m: Manifest = store::read_toml(&path)?;
    store::check_header(&path, &m.format, m.version, FORMAT, VERSION)?;
    if m.base_checksum != base_checksum {
        return Err(Error::format(&path, "adapters belong to a different base model"));
    }
    let adapters = m
        .adapters
        .iter()
        .map(|r| {
            let a: Tensor<T> = store::read_entry(dir, &r.a, m.dtype)?;
            let b: Tensor<T> = store::read_entry(dir, &r.b, m.dtype)?;
            LoraAdapter::from_factors(r.layer, r.target, a, b, r.scale)
        })
        .collect::<Result<Vec<_>>>()?;
    let token = SubjectToken {
        id: m.token_id,
        embedding: store::read_entry(dir, &m.token, m.dtype)?,
    };
    Ok((adapters, token))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(1);
        let ads = vec![
            LoraAdapter::<f32>::new(0, Projection::Key, 8, 2, 1.0, &mut rng).unwrap(),
            LoraAdapter::<f32>::new(1, Projection::Output, 8, 2, 0.5, &mut rng).unwrap(),
        ];
        let tok = SubjectToken {
            id: 1,
            embedding: Tensor::randn(&[1, 8], 1.0, &mut rng).unwrap(),
        };
        save_adapters(dir.path(), &ads, &tok, "abc").unwrap();
        let (back, t2) = load_adapters::<f32>(dir.path(), "abc").unwrap();
        assert_eq!(back, ads);
        assert_eq!(t2, tok);
        assert!(matches!(load_adapters::<f32>(dir.path(), "xyz"), Err(Error::Format { .. })));
    }
}
