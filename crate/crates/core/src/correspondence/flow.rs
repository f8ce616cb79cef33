use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which branch a flow starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowDirection {
    /// Each generation token points at its reference match.
    GenToRef,
    /// Each reference token points at its generation match.
    RefToGen,
}

impl FlowDirection {
    pub fn reverse(self) -> Self {
        match self {
            FlowDirection::GenToRef => FlowDirection::RefToGen,
            FlowDirection::RefToGen => FlowDirection::GenToRef,
        }
    }
}

impl fmt::Display for FlowDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowDirection::GenToRef => "gen_to_ref",
            FlowDirection::RefToGen => "ref_to_gen",
        })
    }
}

/// Wrap a lattice offset into `[−n/2, n/2)`.
pub fn wrap_offset(d: i64, n: usize) -> i64 {
    let n = n as i64;
    (d + n / 2).rem_euclid(n) - n / 2
}

/// Per-token integer correspondences between two same-sized token lattices,
/// matched frame by frame.
///
/// Displacements are `pos(match) − pos(token)` taken on the torus, i.e.
/// wrapped into `[−H/2, H/2) × [−W/2, W/2)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowField {
    pub direction: FlowDirection,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    /// Matched in-frame index (`row·W + col`) per token, frame-major.
    matches: Vec<usize>,
    disp: Vec<(i64, i64)>,
}

impl FlowField {
    pub fn from_matches(direction: FlowDirection, frames: usize, rows: usize, cols: usize, matches: Vec<usize>) -> Result<Self> {
        let per = rows * cols;
        if matches.len() != frames * per {
            return Err(Error::shape(format!(
                "{} matches for {frames} frames of {rows}x{cols}",
                matches.len()
            )));
        }
        if let Some(bad) = matches.iter().find(|&&m| m >= per) {
            return Err(Error::Domain(format!("match index {bad} outside a {rows}x{cols} frame")));
        }
        let disp = matches
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let own = i % per;
                let dr = (m / cols) as i64 - (own / cols) as i64;
                let dc = (m % cols) as i64 - (own % cols) as i64;
                (wrap_offset(dr, rows), wrap_offset(dc, cols))
            })
            .collect();
        Ok(FlowField {
            direction,
            frames,
            rows,
            cols,
            matches,
            disp,
        })
    }

    /// Flow moving every token by the same toroidal offset.
    pub fn uniform(direction: FlowDirection, frames: usize, rows: usize, cols: usize, offset: (i64, i64)) -> Result<Self> {
        let per = rows * cols;
        let matches = (0..frames * per)
            .map(|i| {
                let own = i % per;
                let r = ((own / cols) as i64 + offset.0).rem_euclid(rows as i64) as usize;
                let c = ((own % cols) as i64 + offset.1).rem_euclid(cols as i64) as usize;
                r * cols + c
            })
            .collect();
        Self::from_matches(direction, frames, rows, cols, matches)
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn per_frame(&self) -> usize {
        self.rows * self.cols
    }

    /// In-frame match index of token `i` (global, frame-major).
    pub fn matched(&self, i: usize) -> usize {
        self.matches[i]
    }

    /// Global index of the match of token `i`.
    pub fn matched_global(&self, i: usize) -> usize {
        (i / self.per_frame()) * self.per_frame() + self.matches[i]
    }

    pub fn matches(&self) -> &[usize] {
        &self.matches
    }

    pub fn displacement(&self, i: usize) -> (i64, i64) {
        self.disp[i]
    }

    pub fn displacements(&self) -> &[(i64, i64)] {
        &self.disp
    }

    pub fn same_layout(&self, other: &FlowField) -> bool {
        (self.frames, self.rows, self.cols) == (other.frames, other.rows, other.cols)
    }

    /// Most frequent displacement, ties broken by the smallest `(drow, dcol)`.
    pub fn modal_displacement(&self, select: impl Fn(usize) -> bool) -> Option<(i64, i64)> {
        let mut counts = std::collections::BTreeMap::new();
        for i in (0..self.len()).filter(|&i| select(i)) {
            *counts.entry(self.disp[i]).or_insert(0usize) += 1;
        }
        let best = counts.values().copied().max()?;
        counts.into_iter().find(|&(_, c)| c == best).map(|(d, _)| d)
    }
}
