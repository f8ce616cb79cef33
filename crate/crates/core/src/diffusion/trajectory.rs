use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};
use crate::store::{self, TensorEntry};

use super::schedule::Schedule;

const FORMAT: &str = "warpkit-trajectory";
const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";

/// Latents `x_T … x_0` labelled by strictly decreasing timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    timesteps: Vec<usize>,
    latents: Vec<Tensor<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    dtype: DType,
    schedule_hash: String,
    timesteps: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(start_t: usize, x: Tensor<T>) -> Self {
        Trajectory {
            timesteps: vec![start_t],
            latents: vec![x],
        }
    }

    /// From latents ordered `x_0, x_1, …, x_T`.
    pub fn from_ascending(mut latents: Vec<Tensor<T>>) -> Result<Self> {
        if latents.is_empty() {
            return Err(Error::Input("empty trajectory".into()));
        }
        latents.reverse();
        let n = latents.len();
        let mut traj = Trajectory::new(n - 1, latents.remove(0));
        for (i, x) in latents.into_iter().enumerate() {
            traj.push(n - 2 - i, x)?;
        }
        Ok(traj)
    }

    pub fn push(&mut self, t: usize, x: Tensor<T>) -> Result<()> {
        if t >= *self.timesteps.last().unwrap() {
            return Err(Error::Contract(format!("timestep {t} does not decrease")));
        }
        if x.shape() != self.latents[0].shape() {
            return Err(Error::shape(format!(
                "trajectory latent {:?} vs {:?}",
                x.shape(),
                self.latents[0].shape()
            )));
        }
        self.timesteps.push(t);
        self.latents.push(x);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn latents(&self) -> &[Tensor<T>] {
        &self.latents
    }

    pub fn last(&self) -> &Tensor<T> {
        self.latents.last().unwrap()
    }

    /// The latent at the lowest timestep reached.
    pub fn final_latent(&self) -> &Tensor<T> {
        self.last()
    }

    pub fn at(&self, t: usize) -> Option<&Tensor<T>> {
        self.timesteps.iter().position(|&s| s == t).map(|i| &self.latents[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.timesteps.iter().copied().zip(&self.latents)
    }

    pub fn save(&self, dir: &Path, schedule: &Schedule) -> Result<()> {
        let named: Vec<(String, &Tensor<T>)> = self
            .iter()
            .enumerate()
            .map(|(i, (t, x))| (format!("{i:03}_t{t:03}"), x))
            .collect();
        let tensors = store::write_entries(dir, &named)?;
        store::write_toml(
            &dir.join(MANIFEST),
            &Manifest {
                format: FORMAT.into(),
                version: VERSION,
                dtype: T::DTYPE,
                schedule_hash: schedule.hash(),
                timesteps: self.timesteps.clone(),
                tensors,
            },
        )
    }

    /// Load a trajectory saved under the same schedule.
    pub fn load(dir: &Path, schedule: &Schedule) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let m: Manifest = store::read_toml(&path)?;
        store::check_header(&path, &m.format, m.version, FORMAT, VERSION)?;
        if m.schedule_hash != schedule.hash() {
            return Err(Error::format(&path, "trajectory was produced under another schedule"));
        }
        if m.tensors.len() != m.timesteps.len() || m.tensors.is_empty() {
            return Err(Error::format(&path, "timestep and tensor counts differ"));
        }
        let mut latents = m
            .tensors
            .iter()
            .map(|e| store::read_entry::<T>(dir, e, m.dtype))
            .collect::<Result<Vec<_>>>()?;
        let mut traj = Trajectory::new(m.timesteps[0], latents.remove(0));
        for (t, x) in m.timesteps[1..].iter().zip(latents) {
            traj.push(*t, x).map_err(|e| Error::format(&path, e.to_string()))?;
        }
        Ok(traj)
    }
}
