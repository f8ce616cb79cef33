//! Axial 3D rotary position embedding for video tokens.
//!
//! Each head's channels are split into frame, row and column sections; every
//! section rotates its adjacent channel pairs by `position · ω_k` with
//! `ω_k = base^(-2k/section)`. All heads share the same tables. Text tokens
//! are never rotated.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{PairRotation, Scalar, Tensor};

use super::config::ModelConfig;
use super::tokens::{Lattice, TokenPos};

#[derive(Debug, Clone, PartialEq)]
pub struct RopeFrequencies {
    /// Inverse frequencies for the frame, row and column sections.
    pub axes: [Vec<f64>; 3],
    heads: usize,
}

impl RopeFrequencies {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let axis = |len: usize| -> Result<Vec<f64>> {
            if !len.is_multiple_of(2) {
                return Err(Error::Config(format!("rope section of width {len} is odd")));
            }
            Ok((0..len / 2)
                .map(|k| cfg.rope_base.powf(-2.0 * k as f64 / len as f64))
                .collect())
        };
        let [f, r, c] = cfg.rope_split;
        Ok(RopeFrequencies {
            axes: [axis(f)?, axis(r)?, axis(c)?],
            heads: cfg.heads,
        })
    }

    pub fn pairs_per_head(&self) -> usize {
        self.axes.iter().map(Vec::len).sum()
    }

    /// Rotation angles for one position, in per-head channel-pair order.
    pub fn angles(&self, p: TokenPos) -> Vec<f64> {
        let coords = [p.frame as f64, p.row as f64, p.col as f64];
        let mut out = Vec::with_capacity(self.pairs_per_head() * self.heads);
        for _ in 0..self.heads {
            for (axis, freqs) in self.axes.iter().enumerate() {
                out.extend(freqs.iter().map(|w| coords[axis] * w));
            }
        }
        out
    }

    /// Rotation covering the video rows of a `[video; text]` sequence.
    pub fn rotation<T: Scalar>(&self, lattice: &Lattice) -> Result<Arc<PairRotation<T>>> {
        let mut angles = Vec::with_capacity(lattice.len() * self.pairs_per_head() * self.heads);
        for p in lattice.positions() {
            angles.extend(self.angles(p));
        }
        let cols = 2 * self.pairs_per_head() * self.heads;
        Ok(Arc::new(PairRotation::from_angles(lattice.len(), cols, &angles)?))
    }
}

/// Rotate queries and keys of a `[video; text]` sequence.
pub fn apply_rope<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    freqs: &RopeFrequencies,
    lattice: &Lattice,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let rot = freqs.rotation::<T>(lattice)?;
    Ok((rot.apply(q)?, rot.apply(k)?))
}
