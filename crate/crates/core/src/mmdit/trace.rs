use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Which layers to snapshot during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceSpec {
    pub layers: BTreeSet<usize>,
    /// Also keep per-head attention probabilities (the largest part of a trace).
    pub probs: bool,
}

impl TraceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(layers: usize, probs: bool) -> Self {
        TraceSpec {
            layers: (0..layers).collect(),
            probs,
        }
    }

    pub fn layers(layers: impl IntoIterator<Item = usize>, probs: bool) -> Self {
        TraceSpec {
            layers: layers.into_iter().collect(),
            probs,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Snapshot of one layer. Rows are the full `[video; text]` sequence; key-side
/// tensors may be wider when extra keys were attended.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T> {
    pub q_pre: Tensor<T>,
    pub k_pre: Tensor<T>,
    pub v: Tensor<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    /// Per head `[rows × keys]`, present when requested.
    pub probs: Option<Vec<Tensor<T>>>,
    /// Values actually attended, after any edit.
    pub v_used: Tensor<T>,
    /// Attention output before the output projection, after any edit.
    pub out: Tensor<T>,
    /// Post-block activations.
    pub hidden: Tensor<T>,
    pub n_video: usize,
}

/// Traces of one forward pass, keyed by layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace<T> {
    pub layers: BTreeMap<usize, LayerTrace<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn layer(&self, layer: usize) -> Result<&LayerTrace<T>> {
        self.layers.get(&layer).ok_or(Error::MissingTrace { layer })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    Intermediate,
    Qk,
    QkRopefree,
}

impl DescriptorKind {
    pub const ALL: [DescriptorKind; 3] = [
        DescriptorKind::Intermediate,
        DescriptorKind::Qk,
        DescriptorKind::QkRopefree,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DescriptorKind::Intermediate => "intermediate",
            DescriptorKind::Qk => "qk",
            DescriptorKind::QkRopefree => "qk_ropefree",
        }
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DescriptorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DescriptorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown descriptor kind {s:?}")))
    }
}

/// Video-token matching features. For query/key kinds `query` matches against
/// the other branch's `key`; intermediate activations serve as both.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorPair<T> {
    pub query: Tensor<T>,
    pub key: Tensor<T>,
}

pub fn extract_descriptors<T: Scalar>(
    trace: &Trace<T>,
    layer: usize,
    kind: DescriptorKind,
) -> Result<DescriptorPair<T>> {
    let t = trace.layer(layer)?;
    let n = t.n_video;
    let (query, key) = match kind {
        DescriptorKind::Intermediate => {
            let h = t.hidden.slice_rows(0, n)?;
            (h.clone(), h)
        }
        DescriptorKind::Qk => (t.q.slice_rows(0, n)?, t.k.slice_rows(0, n)?),
        DescriptorKind::QkRopefree => (t.q_pre.slice_rows(0, n)?, t.k_pre.slice_rows(0, n)?),
    };
    Ok(DescriptorPair { query, key })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_layer_is_reported() {
        let t = Trace::<f32>::default();
        assert!(matches!(
            extract_descriptors(&t, 2, DescriptorKind::Qk),
            Err(Error::MissingTrace { layer: 2 })
        ));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in DescriptorKind::ALL {
            assert_eq!(k.as_str().parse::<DescriptorKind>().unwrap(), k);
        }
        assert!("qkv".parse::<DescriptorKind>().is_err());
    }
}
