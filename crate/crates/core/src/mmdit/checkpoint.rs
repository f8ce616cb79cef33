//! Model checkpoints: a directory of tensor files plus `manifest.toml`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar};
use crate::store::{self, TensorEntry};

use super::config::ModelConfig;
use super::model::Mmdit;
use super::weights::Weights;

pub const MANIFEST: &str = "manifest.toml";
const FORMAT: &str = "warpkit-model";
const VERSION: u32 = 1;
const SUBJECT: &str = "subject";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    dtype: DType,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_model<T: Scalar>(model: &Mmdit<T>, dir: &Path) -> Result<()> {
    let mut named = model.weights().named();
    if let Some(s) = model.subject_embedding() {
        named.push((SUBJECT.to_string(), s));
    }
    let tensors = store::write_entries(dir, &named)?;
    let m = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE,
        config: model.config().clone(),
        tensors,
    };
    store::write_toml(&dir.join(MANIFEST), &m)
}

pub fn load_model<T: Scalar>(dir: &Path) -> Result<Mmdit<T>> {
    let path = dir.join(MANIFEST);
    let m: Manifest = store::read_toml(&path)?;
    store::check_header(&path, &m.format, m.version, FORMAT, VERSION)?;
    m.config.validate()?;
    let mut weights = Weights::<T>::zeros(&m.config)?;
    let mut subject = None;
    let mut seen = std::collections::BTreeSet::new();
    for e in &m.tensors {
        let t = store::read_entry::<T>(dir, e, m.dtype)?;
        if e.name == SUBJECT {
            subject = Some(t);
        } else {
            let slot = weights
                .named_mut(&e.name)
                .ok_or_else(|| Error::format(&path, format!("unknown tensor {}", e.name)))?;
            if slot.shape() != t.shape() {
                return Err(Error::format(&path, format!("{} has the wrong shape", e.name)));
            }
            *slot = t;
        }
        seen.insert(e.name.clone());
    }
    for (name, _) in Weights::<T>::shapes(&m.config) {
        if !seen.contains(&name) {
            return Err(Error::format(&path, format!("missing tensor {name}")));
        }
    }
    let mut model = Mmdit::new(m.config, weights)?;
    model.set_subject_embedding(subject)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn round_trip_with_subject() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            layers: 2,
            ..ModelConfig::default()
        };
        let mut m = Mmdit::<f32>::init(cfg, 5).unwrap();
        m.set_subject_embedding(Some(Tensor::full(&[1, 64], 0.25).unwrap())).unwrap();
        save_model(&m, dir.path()).unwrap();
        let back: Mmdit<f32> = load_model(dir.path()).unwrap();
        assert_eq!(back, m);
        let wide: Mmdit<f64> = load_model(dir.path()).unwrap();
        assert_eq!(wide.weights().layers[1].wq, m.weights().layers[1].wq.cast());
    }

    #[test]
    fn tampered_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            layers: 1,
            ..ModelConfig::default()
        };
        let m = Mmdit::<f32>::init(cfg, 5).unwrap();
        save_model(&m, dir.path()).unwrap();
        let other = Tensor::<f32>::zeros(&[64, 64]).unwrap();
        crate::numerics::io::write_tensor(&dir.path().join("layers.0.wq.wkt"), &other).unwrap();
        assert!(matches!(load_model::<f32>(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_model::<f32>(dir.path()), Err(Error::Io { .. })));
    }
}
