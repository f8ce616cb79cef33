use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdit::{LayerWeights, SUBJECT_ID};
use crate::numerics::{Scalar, SeededRng, Tensor};

/// Attention projection of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    /// Projections an adapter may target.
    pub const ADAPTABLE: [Projection; 3] = [Projection::Key, Projection::Value, Projection::Output];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
        }
    }

    pub fn weight<T>(self, layer: &LayerWeights<T>) -> &Tensor<T> {
        match self {
            Projection::Query => &layer.wq,
            Projection::Key => &layer.wk,
            Projection::Value => &layer.wv,
            Projection::Output => &layer.wo,
        }
    }

    pub fn weight_mut<T>(self, layer: &mut LayerWeights<T>) -> &mut Tensor<T> {
        match self {
            Projection::Query => &mut layer.wq,
            Projection::Key => &mut layer.wk,
            Projection::Value => &mut layer.wv,
            Projection::Output => &mut layer.wo,
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Projection::Query),
            "key" => Ok(Projection::Key),
            "value" => Ok(Projection::Value),
            "output" => Ok(Projection::Output),
            _ => Err(Error::Config(format!("unknown projection {s:?}"))),
        }
    }
}

/// Low-rank update `W + scale·B·A` of one key, value or output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    layer: usize,
    target: Projection,
    /// Down factor `[r, d]`.
    pub a: Tensor<T>,
    /// Up factor `[d, r]`.
    pub b: Tensor<T>,
    scale: T,
}

/// Standard deviation of the initial down factor.
pub const A_INIT_STD: f64 = 0.02;

impl<T: Scalar> LoraAdapter<T> {
    /// `B = 0`, `A ~ N(0, 0.02²)`, so the adapter starts as a no-op.
    pub fn new(layer: usize, target: Projection, dim: usize, rank: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        if rank == 0 || dim == 0 {
            return Err(Error::Config("adapter rank and dim must be positive".into()));
        }
        let a = Tensor::randn(&[rank, dim], A_INIT_STD, rng)?;
        let b = Tensor::zeros(&[dim, rank])?;
        Self::from_factors(layer, target, a, b, scale)
    }

    pub fn from_factors(layer: usize, target: Projection, a: Tensor<T>, b: Tensor<T>, scale: f64) -> Result<Self> {
        if target == Projection::Query {
            return Err(Error::Wiring(format!(
                "layer {layer}: adapters may target key, value or output only"
            )));
        }
        let (r, d) = a.dims2()?;
        if b.shape() != [d, r] {
            return Err(Error::shape(format!(
                "up factor {:?} does not pair with down factor {:?}",
                b.shape(),
                a.shape()
            )));
        }
        Ok(LoraAdapter {
            layer,
            target,
            a,
            b,
            scale: T::of(scale),
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn target(&self) -> Projection {
        self.target
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> T {
        self.scale
    }
}

/// `W + scale·B·A`; `W` itself is untouched.
pub fn apply_lora<T: Scalar>(w: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let (rows, cols) = w.dims2()?;
    let d = adapter.b.shape()[0];
    if rows != d || cols != adapter.a.shape()[1] {
        return Err(Error::Wiring(format!(
            "adapter for layer {} {} is {d}x{} but the projection is {rows}x{cols}",
            adapter.layer,
            adapter.target,
            adapter.a.shape()[1]
        )));
    }
    w.add(&adapter.b.matmul(&adapter.a)?.scale(adapter.scale))
}

/// Trainable embedding of the reserved subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectToken<T> {
    pub id: usize,
    /// `[1, d]`.
    pub embedding: Tensor<T>,
}

impl<T: Scalar> SubjectToken<T> {
    /// Starts from the model's own table row for the subject id.
    pub fn from_table(text_table: &Tensor<T>) -> Result<Self> {
        Ok(SubjectToken {
            id: SUBJECT_ID,
            embedding: text_table.gather_rows(&[SUBJECT_ID])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank_of(m: &Tensor<f64>) -> usize {
        // Gaussian elimination with partial pivoting.
        let (r, c) = m.dims2().unwrap();
        let mut a: Vec<Vec<f64>> = (0..r).map(|i| m.row(i).to_vec()).collect();
        let scale = m.max_abs().max(1e-300);
        let mut rank = 0;
        for col in 0..c {
            let Some(p) = (rank..r).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())) else {
                break;
            };
            if a[p][col].abs() < 1e-9 * scale {
                continue;
            }
            a.swap(rank, p);
            for i in rank + 1..r {
                let f = a[i][col] / a[rank][col];
                let pivot = a[rank].clone();
                for (x, &y) in a[i][col..c].iter_mut().zip(&pivot[col..c]) {
                    *x -= f * y;
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn zero_up_factor_is_bit_exact_noop() {
        let mut rng = SeededRng::new(1);
        let w = Tensor::<f32>::randn(&[8, 8], 1.0, &mut rng).unwrap();
        let ad = LoraAdapter::<f32>::new(0, Projection::Key, 8, 4, 1.0, &mut rng).unwrap();
        assert_eq!(apply_lora(&w, &ad).unwrap(), w);
    }

    #[test]
    fn full_rank_cancellation() {
        let mut rng = SeededRng::new(2);
        let w = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng).unwrap();
        let ad = LoraAdapter::from_factors(0, Projection::Value, Tensor::eye(4), w.scale(-1.0), 1.0).unwrap();
        assert!(apply_lora(&w, &ad).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn update_rank_is_bounded() {
        let mut rng = SeededRng::new(3);
        for r in [1, 2, 5] {
            let w = Tensor::<f64>::randn(&[12, 12], 1.0, &mut rng).unwrap();
            let a = Tensor::randn(&[r, 12], 1.0, &mut rng).unwrap();
            let b = Tensor::randn(&[12, r], 1.0, &mut rng).unwrap();
            let ad = LoraAdapter::from_factors(0, Projection::Output, a, b, 0.7).unwrap();
            let delta = apply_lora(&w, &ad).unwrap().sub(&w).unwrap();
            assert_eq!(rank_of(&delta), r);
        }
    }

    #[test]
    fn query_target_is_rejected() {
        let mut rng = SeededRng::new(4);
        assert!(matches!(
            LoraAdapter::<f32>::new(0, Projection::Query, 8, 2, 1.0, &mut rng),
            Err(Error::Wiring(_))
        ));
    }

    #[test]
    fn mismatched_projection_is_a_wiring_error() {
        let mut rng = SeededRng::new(5);
        let ad = LoraAdapter::<f32>::new(0, Projection::Key, 8, 2, 1.0, &mut rng).unwrap();
        let w = Tensor::zeros(&[6, 6]).unwrap();
        assert!(matches!(apply_lora(&w, &ad), Err(Error::Wiring(_))));
    }

    #[test]
    fn projection_names() {
        for p in [Projection::Query, Projection::Key, Projection::Value, Projection::Output] {
            assert_eq!(p.as_str().parse::<Projection>().unwrap(), p);
        }
    }
}
