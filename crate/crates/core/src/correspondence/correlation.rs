use crate::error::{Error, Result};
use crate::mmdit::Lattice;
use crate::numerics::{argmax_slice, Scalar, Tensor};

use super::flow::{FlowDirection, FlowField};

/// Per-frame `(H·W)×(H·W)` similarity matrices. Rows index the generation
/// branch and columns the reference branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation<T> {
    pub rows: usize,
    pub cols: usize,
    frames: Vec<Tensor<T>>,
}

impl<T: Scalar> Correlation<T> {
    pub fn from_frames(rows: usize, cols: usize, frames: Vec<Tensor<T>>) -> Result<Self> {
        let per = rows * cols;
        if let Some(bad) = frames.iter().find(|m| m.shape() != [per, per]) {
            return Err(Error::shape(format!(
                "correlation frame {:?} for a {rows}x{cols} grid",
                bad.shape()
            )));
        }
        Ok(Correlation { rows, cols, frames })
    }

    pub fn frames(&self) -> &[Tensor<T>] {
        &self.frames
    }

    pub fn frame(&self, f: usize) -> &Tensor<T> {
        &self.frames[f]
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn transpose(&self) -> Result<Self> {
        let frames = self.frames.iter().map(Tensor::transpose).collect::<Result<_>>()?;
        Ok(Correlation {
            rows: self.rows,
            cols: self.cols,
            frames,
        })
    }
}

/// Row-wise `softmax(q·kᵀ/√D)` per frame, where `D` is the descriptor width.
/// Both inputs hold one row per video token in lattice order.
pub fn directional_correlation<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, lattice: Lattice) -> Result<Correlation<T>> {
    let (nq, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    if nq != lattice.len() || nk != lattice.len() {
        return Err(Error::Branch(format!(
            "descriptors have {nq} and {nk} rows but the lattice has {} tokens in {} frames",
            lattice.len(),
            lattice.frames
        )));
    }
    if dq != dk {
        return Err(Error::shape(format!("descriptor widths {dq} and {dk} differ")));
    }
    let per = lattice.per_frame();
    let scale = T::of(1.0 / (dq as f64).sqrt());
    let frames = (0..lattice.frames)
        .map(|f| {
            let qf = q.slice_rows(f * per, (f + 1) * per)?;
            let kf = k.slice_rows(f * per, (f + 1) * per)?;
            qf.matmul_nt(&kf)?.scale(scale).softmax_rows()
        })
        .collect::<Result<_>>()?;
    Correlation::from_frames(lattice.rows, lattice.cols, frames)
}

/// `Ĉ = ½(C_gr + C_rgᵀ)`.
pub fn symmetric_correlation<T: Scalar>(c_gr: &Correlation<T>, c_rg: &Correlation<T>) -> Result<Correlation<T>> {
    if c_gr.frames.len() != c_rg.frames.len() || (c_gr.rows, c_gr.cols) != (c_rg.rows, c_rg.cols) {
        return Err(Error::shape(format!(
            "correlations of {} and {} frames on {}x{} and {}x{} grids",
            c_gr.frames.len(),
            c_rg.frames.len(),
            c_gr.rows,
            c_gr.cols,
            c_rg.rows,
            c_rg.cols
        )));
    }
    let half = T::of(0.5);
    let frames = c_gr
        .frames
        .iter()
        .zip(&c_rg.frames)
        .map(|(a, b)| a.zip_map(&b.transpose()?, |x, y| half * (x + y)))
        .collect::<Result<_>>()?;
    Correlation::from_frames(c_gr.rows, c_gr.cols, frames)
}

/// Hard argmax matching. Generation tokens take the best column of their row;
/// reference tokens take the best row of their column. Ties go to the smallest
/// index.
pub fn extract_flow<T: Scalar>(c: &Correlation<T>, direction: FlowDirection) -> Result<FlowField> {
    let axis = match direction {
        FlowDirection::GenToRef => 1,
        FlowDirection::RefToGen => 0,
    };
    let mut matches = Vec::with_capacity(c.frames.len() * c.rows * c.cols);
    for m in &c.frames {
        matches.extend_from_slice(m.argmax(axis)?.data());
    }
    FlowField::from_matches(direction, c.frames.len(), c.rows, c.cols, matches)
}

/// Exhaustive-scan reference for [`extract_flow`].
pub fn brute_force_match<T: Scalar>(c: &Correlation<T>, direction: FlowDirection) -> Result<FlowField> {
    let per = c.rows * c.cols;
    let mut matches = Vec::with_capacity(c.frames.len() * per);
    for m in &c.frames {
        for i in 0..per {
            let line: Vec<T> = match direction {
                FlowDirection::GenToRef => m.row(i).to_vec(),
                FlowDirection::RefToGen => (0..per).map(|r| m.data()[r * per + i]).collect(),
            };
            matches.push(argmax_slice(&line)?);
        }
    }
    FlowField::from_matches(direction, c.frames.len(), c.rows, c.cols, matches)
}
