use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Scaled Gaussian weights.
    Random,
    /// Hand-built weights whose pre-rotary query/key features are the token
    /// content, with a strong position-only component in the rotary channels.
    /// Used by matching oracles.
    ContentIdentity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub text_len: usize,
    pub vocab: usize,
    /// Per-head rotary channel split for the (frame, row, col) axes.
    pub rope_split: [usize; 3],
    pub rope_base: f64,
    pub latent_channels: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub init: InitMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 8,
            dim: 64,
            heads: 4,
            frames: 4,
            grid_h: 8,
            grid_w: 8,
            text_len: 8,
            vocab: 64,
            rope_split: [6, 6, 4],
            rope_base: 10_000.0,
            latent_channels: 4,
            patch: 2,
            mlp_ratio: 2,
            init: InitMode::Random,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.dim == 0 || self.heads == 0 {
            return bad("layers, dim and heads must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.rope_split.iter().any(|p| p % 2 != 0) {
            return bad(format!("rope split {:?} has an odd part", self.rope_split));
        }
        if self.rope_split.iter().sum::<usize>() != self.head_dim() {
            return bad(format!(
                "rope split {:?} does not sum to head dim {}",
                self.rope_split,
                self.head_dim()
            ));
        }
        if self.frames == 0 || self.grid_h == 0 || self.grid_w == 0 || self.patch == 0 {
            return bad("frames, grid and patch must be positive".into());
        }
        if self.text_len == 0 || self.vocab < 3 {
            return bad("text length must be positive and vocab at least 3".into());
        }
        if self.latent_channels == 0 || self.mlp_ratio == 0 {
            return bad("latent channels and mlp ratio must be positive".into());
        }
        if self.init == InitMode::ContentIdentity {
            // Content lanes need room in both the hidden and per-head layouts.
            let feat = self.token_features();
            if 2 * feat > self.dim || feat > self.heads * self.rope_split[0] {
                return bad(format!(
                    "content-identity init needs 2*{feat} <= dim and {feat} <= heads*frame_split"
                ));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Features per patch token: `channels · patch²`.
    pub fn token_features(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn mlp_hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Latent shape for `frames` frames: `[F, H·p, W·p, c]`.
    pub fn latent_shape(&self, frames: usize) -> [usize; 4] {
        [
            frames,
            self.grid_h * self.patch,
            self.grid_w * self.patch,
            self.latent_channels,
        ]
    }

    /// Mid-depth layer used for matching descriptors.
    pub fn default_descriptor_layer(&self) -> usize {
        (self.layers / 2).saturating_sub(1)
    }
}
