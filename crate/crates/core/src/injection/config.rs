use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::mmdit::DescriptorKind;

/// How reference appearance enters the generation branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    /// Warp reference values along the flow and blend them under the mask.
    #[default]
    ValueWarp,
    /// Attend foreground queries to reference keys/values and background
    /// queries to generation keys/values.
    KvReplace,
    /// Append reference video tokens to the key/value sequence.
    TokenConcat,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::None,
        Strategy::ValueWarp,
        Strategy::KvReplace,
        Strategy::TokenConcat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::ValueWarp => "value_warp",
            Strategy::KvReplace => "kv_replace",
            Strategy::TokenConcat => "token_concat",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Exact rational in `[0, 1]`, written `"num/den"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num > den {
            return Err(Error::Config(format!("fraction {num}/{den} outside [0, 1]")));
        }
        Ok(Fraction { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `⌈self·n⌉`, exact.
    pub fn ceil_of(self, n: usize) -> usize {
        (self.num as u128 * n as u128).div_ceil(self.den as u128) as usize
    }

    /// `⌊self·n⌋`, exact.
    pub fn floor_of(self, n: usize) -> usize {
        (self.num as u128 * n as u128 / self.den as u128) as usize
    }

    fn lt(self, other: Fraction) -> bool {
        (self.num as u128) * (other.den as u128) < (other.num as u128) * (self.den as u128)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (n, d) = s
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("fraction {s:?} is not num/den")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("fraction {s:?} is not num/den")))
        };
        Fraction::new(parse(n)?, parse(d)?)
    }
}

impl TryFrom<String> for Fraction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> String {
        f.to_string()
    }
}

/// Inclusive index band `⌈start·n⌉ ..= ⌊end·n⌋` stored as fractions of the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub start: Fraction,
    pub end: Fraction,
}

impl Band {
    pub fn new(start: Fraction, end: Fraction) -> Result<Self> {
        let b = Band { start, end };
        b.validate()?;
        Ok(b)
    }

    pub fn parse(start: &str, end: &str) -> Result<Self> {
        Band::new(start.parse()?, end.parse()?)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.start.lt(self.end) {
            return Err(Error::Config(format!("band start {} must precede end {}", self.start, self.end)));
        }
        Ok(())
    }

    /// Indices covered for a total of `n`; the last valid index is `n − 1`.
    pub fn indices(&self, n: usize) -> RangeInclusive<usize> {
        let hi = self.end.floor_of(n).min(n.saturating_sub(1));
        self.start.ceil_of(n)..=hi
    }

    pub fn contains(&self, n: usize, i: usize) -> bool {
        self.indices(n).contains(&i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    pub strategy: Strategy,
    /// Sampler steps, as fractions of the step count.
    pub steps: Band,
    /// Transformer layers, as fractions of the depth.
    pub layers: Band,
    pub mask: MaskConfig,
    /// Layer supplying matching descriptors; the model's mid layer when absent.
    pub descriptor_layer: Option<usize>,
    pub descriptor_kind: DescriptorKind,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            strategy: Strategy::ValueWarp,
            steps: Band::parse("3/50", "19/50").expect("valid default"),
            layers: Band::parse("20/42", "29/42").expect("valid default"),
            mask: MaskConfig::default(),
            descriptor_layer: None,
            descriptor_kind: DescriptorKind::QkRopefree,
        }
    }
}

impl InjectionConfig {
    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        self.steps.validate()?;
        self.layers.validate()?;
        self.mask.validate()?;
        if let Some(l) = self.descriptor_layer {
            if l >= layers {
                return Err(Error::Config(format!("descriptor layer {l} outside {layers} layers")));
            }
        }
        if let Some(&l) = self.mask.layers.iter().find(|&&l| l >= layers) {
            return Err(Error::Config(format!("mask layer {l} outside {layers} layers")));
        }
        if self.layer_indices(layers).is_empty() {
            return Err(Error::Config(format!("layer band covers no layer of {layers}")));
        }
        Ok(())
    }

    pub fn layer_indices(&self, layers: usize) -> Vec<usize> {
        self.layers.indices(layers).collect()
    }

    pub fn step_indices(&self, steps: usize) -> Vec<usize> {
        self.steps.indices(steps).collect()
    }

    /// Layers averaged for the foreground mask.
    pub fn mask_layers(&self, layers: usize) -> Vec<usize> {
        if self.mask.layers.is_empty() {
            self.layer_indices(layers)
        } else {
            self.mask.layers.clone()
        }
    }
}
