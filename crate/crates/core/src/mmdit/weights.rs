use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tensor};

use super::config::{InitMode, ModelConfig};

/// Projections of one transformer block. Query/key/value/output are `d × d`
/// and shared between video and text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    /// `[c·p², d]`, bias-free.
    pub patch_embed: Tensor<T>,
    /// `[d, d]`, applied to the sinusoidal timestep embedding.
    pub time_embed: Tensor<T>,
    /// `[1, d]` modality embedding added to every video token.
    pub video_bias: Tensor<T>,
    /// `[vocab, d]`.
    pub text_table: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    /// `[d, c·p²]`.
    pub head_out: Tensor<T>,
}

// Content-identity gains.
const POS_GAIN: f64 = 3.0;
const ATTN_GAIN: f64 = 0.1;
const TEXT_STD: f64 = 0.3;
const OUT_GAIN: f64 = 0.5;

impl<T: Scalar> Weights<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        match cfg.init {
            InitMode::Random => Self::random(cfg, seed),
            InitMode::ContentIdentity => Self::content_identity(cfg, seed),
        }
    }

    fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let root = SeededRng::new(seed);
        let d = cfg.dim;
        let feat = cfg.token_features();
        let hid = cfg.mlp_hidden();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = inv(d) / (2.0 * cfg.layers as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut r = root.fork(&format!("layer{l}"));
                Ok(LayerWeights {
                    wq: Tensor::randn(&[d, d], inv(d), &mut r)?,
                    wk: Tensor::randn(&[d, d], inv(d), &mut r)?,
                    wv: Tensor::randn(&[d, d], inv(d), &mut r)?,
                    wo: Tensor::randn(&[d, d], resid, &mut r)?,
                    w1: Tensor::randn(&[d, hid], inv(d), &mut r)?,
                    w2: Tensor::randn(&[hid, d], inv(hid) / (2.0 * cfg.layers as f64).sqrt(), &mut r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Weights {
            patch_embed: Tensor::randn(&[feat, d], inv(feat), &mut root.fork("patch"))?,
            time_embed: Tensor::randn(&[d, d], 0.5 * inv(d), &mut root.fork("time"))?,
            video_bias: Tensor::randn(&[1, d], 0.02, &mut root.fork("video_bias"))?,
            text_table: Tensor::randn(&[cfg.vocab, d], 1.0, &mut root.fork("text"))?,
            layers,
            head_out: Tensor::randn(&[d, feat], 0.5 * inv(d), &mut root.fork("head"))?,
        })
    }

    /// Query/key see token content on the frame-section channels and a
    /// constant, position-only vector on the row/column sections, so rotary
    /// similarity is dominated by position while pre-rotary similarity is
    /// dominated by content.
    fn content_identity(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let d = cfg.dim;
        let hd = cfg.head_dim();
        let feat = cfg.token_features();
        let [frame_split, row_split, col_split] = cfg.rope_split;
        let pos_pairs_per_head = (row_split + col_split) / 2;
        let pos_lane0 = d / 2;
        if pos_lane0 + cfg.heads * pos_pairs_per_head > d || feat > hd {
            return Err(Error::Config(format!(
                "content-identity init does not fit dim {d} with {} heads",
                cfg.heads
            )));
        }
        let per_head_content = feat.div_ceil(cfg.heads);
        if per_head_content > frame_split {
            return Err(Error::Config("frame section too narrow for content lanes".into()));
        }
        let t = T::of;

        let mut patch_embed = Tensor::zeros(&[feat, d])?;
        for j in 0..feat {
            patch_embed.data_mut()[j * d + j] = T::one();
        }
        let mut video_bias = Tensor::zeros(&[1, d])?;
        // Alternating signs keep the lanes' mean at zero so layer norm does
        // not leak position into the content lanes.
        for m in 0..cfg.heads * pos_pairs_per_head {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            video_bias.data_mut()[pos_lane0 + m] = t(sign * POS_GAIN);
        }

        let mut qk = Tensor::zeros(&[d, d])?;
        for h in 0..cfg.heads {
            for s in 0..per_head_content {
                let lane = h * per_head_content + s;
                if lane < feat {
                    qk.data_mut()[lane * d + h * hd + s] = T::one();
                }
            }
            for m in 0..pos_pairs_per_head {
                let lane = pos_lane0 + h * pos_pairs_per_head + m;
                let slot = h * hd + frame_split + 2 * m;
                qk.data_mut()[lane * d + slot] = T::one();
            }
        }
        let mut wv = Tensor::zeros(&[d, d])?;
        let mut wo = Tensor::zeros(&[d, d])?;
        for h in 0..cfg.heads {
            for j in 0..feat {
                wv.data_mut()[j * d + h * hd + j] = T::one();
                wo.data_mut()[(h * hd + j) * d + j] = t(ATTN_GAIN / cfg.heads as f64);
            }
        }
        let mut head_out = Tensor::zeros(&[d, feat])?;
        for j in 0..feat {
            head_out.data_mut()[j * feat + j] = t(OUT_GAIN);
        }

        let mut rng = SeededRng::new(seed).fork("text");
        let mut text_table = Tensor::zeros(&[cfg.vocab, d])?;
        for v in 2..cfg.vocab {
            for j in 0..feat {
                text_table.data_mut()[v * d + j] = t(TEXT_STD * rng.normal());
            }
        }
        let layer = LayerWeights {
            wq: qk.clone(),
            wk: qk,
            wv,
            wo,
            w1: Tensor::zeros(&[d, cfg.mlp_hidden()])?,
            w2: Tensor::zeros(&[cfg.mlp_hidden(), d])?,
        };
        Ok(Weights {
            patch_embed,
            time_embed: Tensor::zeros(&[d, d])?,
            video_bias,
            text_table,
            layers: vec![layer; cfg.layers],
            head_out,
        })
    }

    /// Expected `(name, shape)` of every tensor for `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.dim;
        let feat = cfg.token_features();
        let hid = cfg.mlp_hidden();
        let mut out = vec![
            ("patch_embed".to_string(), vec![feat, d]),
            ("time_embed".to_string(), vec![d, d]),
            ("video_bias".to_string(), vec![1, d]),
            ("text_table".to_string(), vec![cfg.vocab, d]),
        ];
        for i in 0..cfg.layers {
            for (n, s) in [
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("w1", vec![d, hid]),
                ("w2", vec![hid, d]),
            ] {
                out.push((format!("layers.{i}.{n}"), s));
            }
        }
        out.push(("head_out".to_string(), vec![d, feat]));
        out
    }

    /// All-zero weights shaped for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let hid = cfg.mlp_hidden();
        let layer = LayerWeights {
            wq: Tensor::zeros(&[d, d])?,
            wk: Tensor::zeros(&[d, d])?,
            wv: Tensor::zeros(&[d, d])?,
            wo: Tensor::zeros(&[d, d])?,
            w1: Tensor::zeros(&[d, hid])?,
            w2: Tensor::zeros(&[hid, d])?,
        };
        Ok(Weights {
            patch_embed: Tensor::zeros(&[cfg.token_features(), d])?,
            time_embed: Tensor::zeros(&[d, d])?,
            video_bias: Tensor::zeros(&[1, d])?,
            text_table: Tensor::zeros(&[cfg.vocab, d])?,
            layers: vec![layer; cfg.layers],
            head_out: Tensor::zeros(&[d, cfg.token_features()])?,
        })
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("time_embed".to_string(), &self.time_embed),
            ("video_bias".to_string(), &self.video_bias),
            ("text_table".to_string(), &self.text_table),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("w1", &l.w1),
                ("w2", &l.w2),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("head_out".to_string(), &self.head_out));
        out
    }

    pub(crate) fn named_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            "patch_embed" => Some(&mut self.patch_embed),
            "time_embed" => Some(&mut self.time_embed),
            "video_bias" => Some(&mut self.video_bias),
            "text_table" => Some(&mut self.text_table),
            "head_out" => Some(&mut self.head_out),
            _ => {
                let rest = name.strip_prefix("layers.")?;
                let (idx, field) = rest.split_once('.')?;
                let layer = self.layers.get_mut(idx.parse::<usize>().ok()?)?;
                match field {
                    "wq" => Some(&mut layer.wq),
                    "wk" => Some(&mut layer.wk),
                    "wv" => Some(&mut layer.wv),
                    "wo" => Some(&mut layer.wo),
                    "w1" => Some(&mut layer.w1),
                    "w2" => Some(&mut layer.w2),
                    _ => None,
                }
            }
        }
    }

    /// Combined fingerprint of all tensors except those whose name is excluded.
    pub fn checksum_excluding(&self, exclude: impl Fn(&str) -> bool) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            if !exclude(&name) {
                h.update(name.as_bytes());
                h.update(t.checksum().as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            patch_embed: self.patch_embed.cast(),
            time_embed: self.time_embed.cast(),
            video_bias: self.video_bias.cast(),
            text_table: self.text_table.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w1: l.w1.cast(),
                    w2: l.w2.cast(),
                })
                .collect(),
            head_out: self.head_out.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::default();
        let a = Weights::<f32>::init(&cfg, 1).unwrap();
        let b = Weights::<f32>::init(&cfg, 1).unwrap();
        let c = Weights::<f32>::init(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers[0].wq, c.layers[0].wq);
        assert_eq!(a.named().len(), 4 + 6 * cfg.layers + 1);
    }

    #[test]
    fn named_mut_reaches_every_tensor() {
        let cfg = ModelConfig::default();
        let mut w = Weights::<f32>::init(&cfg, 1).unwrap();
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        for n in names {
            assert!(w.named_mut(&n).is_some(), "{n}");
        }
        assert!(w.named_mut("layers.99.wq").is_none());
        assert!(w.named_mut("layers.0.bogus").is_none());
    }

    #[test]
    fn content_identity_layout() {
        let cfg = ModelConfig {
            init: InitMode::ContentIdentity,
            ..ModelConfig::default()
        };
        let w = Weights::<f64>::init(&cfg, 0).unwrap();
        assert_eq!(w.layers[0].wq, w.layers[0].wk);
        // Zero latent rows stay zero after the embedding.
        assert_eq!(w.patch_embed.data()[0], 1.0);
        assert_eq!(w.text_table.row(1).iter().filter(|&&v| v != 0.0).count(), 0);
    }
}
