use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdit::Lattice;

/// What a mask was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Foreground,
    Cycle,
    Combined,
    /// Analytic sprite footprint of a synthetic scene.
    GroundTruth,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Foreground => "foreground",
            MaskKind::Cycle => "cycle",
            MaskKind::Combined => "combined",
            MaskKind::GroundTruth => "ground_truth",
        })
    }
}

/// Binary map over the `F×H×W` video-token lattice, frame-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub kind: MaskKind,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(kind: MaskKind, lattice: Lattice, values: Vec<bool>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::shape(format!(
                "mask of {} values for a {}x{}x{} lattice",
                values.len(),
                lattice.frames,
                lattice.rows,
                lattice.cols
            )));
        }
        Ok(Mask {
            kind,
            frames: lattice.frames,
            rows: lattice.rows,
            cols: lattice.cols,
            values,
        })
    }

    pub fn filled(kind: MaskKind, lattice: Lattice, value: bool) -> Self {
        Mask {
            kind,
            frames: lattice.frames,
            rows: lattice.rows,
            cols: lattice.cols,
            values: vec![value; lattice.len()],
        }
    }

    pub fn lattice(&self) -> Lattice {
        Lattice::new(self.frames, self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn per_frame(&self) -> usize {
        self.rows * self.cols
    }

    pub fn get(&self, i: usize) -> bool {
        self.values[i]
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn frame_count(&self, frame: usize) -> usize {
        let per = self.per_frame();
        self.values[frame * per..(frame + 1) * per].iter().filter(|&&v| v).count()
    }

    pub fn none_set(&self) -> bool {
        !self.values.iter().any(|&v| v)
    }

    pub fn with_kind(mut self, kind: MaskKind) -> Self {
        self.kind = kind;
        self
    }

    /// Whether every set token of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.values.len() == other.values.len() && self.values.iter().zip(&other.values).all(|(&a, &b)| !a || b)
    }

    /// One frame as a plain graymap with maxval 1.
    pub fn write_pgm(&self, path: &Path, frame: usize) -> Result<()> {
        if frame >= self.frames {
            return Err(Error::Domain(format!("frame {frame} of {}", self.frames)));
        }
        let per = self.per_frame();
        let mut text = format!("P2\n{} {}\n1\n", self.cols, self.rows);
        for r in 0..self.rows {
            let row: Vec<&str> = (0..self.cols)
                .map(|c| if self.values[frame * per + r * self.cols + c] { "1" } else { "0" })
                .collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_subsets() {
        let lat = Lattice::new(2, 2, 2);
        let a = Mask::new(MaskKind::Foreground, lat, vec![true, false, false, false, true, true, false, false]).unwrap();
        assert_eq!(a.count(), 3);
        assert_eq!(a.frame_count(0), 1);
        assert_eq!(a.frame_count(1), 2);
        assert!(a.is_subset_of(&Mask::filled(MaskKind::Cycle, lat, true)));
        assert!(!a.is_subset_of(&Mask::filled(MaskKind::Cycle, lat, false)));
        assert!(Mask::new(MaskKind::Cycle, lat, vec![true; 3]).is_err());
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::new(MaskKind::Combined, Lattice::new(1, 2, 3), vec![true, false, true, false, false, true]).unwrap();
        let p = dir.path().join("m.pgm");
        m.write_pgm(&p, 0).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "P2\n3 2\n1\n1 0 1\n0 0 1\n");
    }
}
