use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::adaptation::{attach, load_adapters, save_adapters, LoraAdapter, SubjectToken};
use crate::error::{Error, Result};
use crate::mmdit::checkpoint::{load_model, save_model};
use crate::mmdit::{Mmdit, ModelConfig};
use crate::numerics::Scalar;
use crate::scenes::Scene;

const MODEL_DIR: &str = "model";
const ADAPTER_DIR: &str = "adapters";

/// Where the subject embedding comes from at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectSource {
    /// The trained token of the checkpoint, or the base table row without one.
    Checkpoint,
    /// The scene's mean sprite features, an analytic stand-in for a trained token.
    Analytic,
}

impl FromStr for SubjectSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkpoint" => Ok(SubjectSource::Checkpoint),
            "analytic" => Ok(SubjectSource::Analytic),
            _ => Err(Error::Config(format!("unknown subject source {s:?}"))),
        }
    }
}

impl fmt::Display for SubjectSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubjectSource::Checkpoint => "checkpoint",
            SubjectSource::Analytic => "analytic",
        })
    }
}

/// A base model and, after adaptation, its adapters and subject token.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub base: Mmdit<T>,
    pub adapters: Option<(Vec<LoraAdapter<T>>, SubjectToken<T>)>,
}

pub fn base_checksum<T: Scalar>(model: &Mmdit<T>) -> String {
    model.weights().checksum_excluding(|_| false)
}

fn cast_parts<T: Scalar, U: Scalar>(
    adapters: &[LoraAdapter<T>],
    token: &SubjectToken<T>,
) -> Result<(Vec<LoraAdapter<U>>, SubjectToken<U>)> {
    let adapters = adapters
        .iter()
        .map(|ad| LoraAdapter::from_factors(ad.layer(), ad.target(), ad.a.cast(), ad.b.cast(), ad.scale().to_f64()))
        .collect::<Result<Vec<_>>>()?;
    let token = SubjectToken {
        id: token.id,
        embedding: token.embedding.cast(),
    };
    Ok((adapters, token))
}

/// Write a freshly initialized base model.
pub fn init_checkpoint(cfg: &ModelConfig, seed: u64, dir: &Path) -> Result<Mmdit<f32>> {
    let model = Mmdit::<f32>::init(cfg.clone(), seed)?;
    Checkpoint {
        base: model.clone(),
        adapters: None,
    }
    .save(dir)?;
    Ok(model)
}

impl<T: Scalar> Checkpoint<T> {
    /// Checkpoints are stored in `f32` whatever the working precision.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let base = self.base.cast::<f32>();
        save_model(&base, &dir.join(MODEL_DIR))?;
        if let Some((adapters, token)) = &self.adapters {
            let (adapters, token) = cast_parts::<T, f32>(adapters, token)?;
            save_adapters(&dir.join(ADAPTER_DIR), &adapters, &token, &base_checksum(&base))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model_dir = dir.join(MODEL_DIR);
        if !model_dir.is_dir() {
            return Err(Error::io(model_dir, std::io::ErrorKind::NotFound.into()));
        }
        // Fingerprints are taken at the stored precision.
        let stored: Mmdit<f32> = load_model(&model_dir)?;
        let base = stored.cast::<T>();
        let adapter_dir = dir.join(ADAPTER_DIR);
        let adapters = if adapter_dir.is_dir() {
            let (a, t) = load_adapters::<f32>(&adapter_dir, &base_checksum(&stored))?;
            Some(cast_parts(&a, &t)?)
        } else {
            None
        };
        Ok(Checkpoint { base, adapters })
    }

    pub fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    /// The inference model: adapters merged, subject embedding per `source`.
    pub fn model(&self, source: SubjectSource, scene: Option<&Scene>) -> Result<Mmdit<T>> {
        let mut model = match &self.adapters {
            Some((adapters, token)) => attach(&self.base, adapters.clone(), token.clone())?.merged()?,
            None => self.base.clone(),
        };
        if source == SubjectSource::Analytic {
            let scene = scene.ok_or_else(|| Error::Config("an analytic subject needs a scene reference".into()))?;
            model.set_subject_embedding(Some(scene.subject_embedding(model.config())?))?;
        }
        Ok(model)
    }
}
