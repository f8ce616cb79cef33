use crate::error::{Error, Result};
use crate::masking::Mask;

use super::flow::{wrap_offset, FlowField};

/// Default PCK threshold relative to the frame size.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Correct and evaluated foreground-token counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PckCounts {
    pub correct: usize,
    pub evaluated: usize,
}

impl PckCounts {
    pub fn ratio(self) -> f64 {
        self.correct as f64 / self.evaluated as f64
    }
}

/// Counts foreground tokens whose displacement error, measured in pixels
/// (`patch` pixels per token) on the torus, is within `α·max(H_px, W_px)`.
pub fn pck_counts(pred: &FlowField, gt: &FlowField, fg: &Mask, alpha: f64, patch: usize) -> Result<PckCounts> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0, 1]")));
    }
    if pred.direction != gt.direction {
        return Err(Error::Contract(format!(
            "predicted flow is {} but ground truth is {}",
            pred.direction, gt.direction
        )));
    }
    if !pred.same_layout(gt) || (fg.frames, fg.rows, fg.cols) != (gt.frames, gt.rows, gt.cols) {
        return Err(Error::shape("flow and mask layouts differ"));
    }
    let evaluated = fg.count();
    if evaluated == 0 {
        return Err(Error::UndefinedMetric("PCK over an empty foreground".into()));
    }
    let p = patch as f64;
    let threshold = alpha * (gt.rows as f64 * p).max(gt.cols as f64 * p);
    let correct = (0..gt.len())
        .filter(|&i| fg.get(i))
        .filter(|&i| {
            let (a, b) = (pred.displacement(i), gt.displacement(i));
            let dr = wrap_offset(a.0 - b.0, gt.rows) as f64 * p;
            let dc = wrap_offset(a.1 - b.1, gt.cols) as f64 * p;
            dr.hypot(dc) <= threshold
        })
        .count();
    Ok(PckCounts { correct, evaluated })
}

pub fn pck(pred: &FlowField, gt: &FlowField, fg: &Mask, alpha: f64, patch: usize) -> Result<f64> {
    pck_counts(pred, gt, fg, alpha, patch).map(PckCounts::ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::FlowDirection;
    use crate::masking::MaskKind;
    use crate::mmdit::Lattice;

    fn fg4() -> Mask {
        let mut v = vec![false; 16];
        for i in [5, 6, 9, 10] {
            v[i] = true;
        }
        Mask::new(MaskKind::GroundTruth, Lattice::new(1, 4, 4), v).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = FlowField::uniform(FlowDirection::GenToRef, 1, 4, 4, (1, 0)).unwrap();
        assert_eq!(pck(&gt, &gt, &fg4(), DEFAULT_ALPHA, 2).unwrap(), 1.0);
    }

    #[test]
    fn one_of_four_wrong() {
        let gt = FlowField::uniform(FlowDirection::GenToRef, 1, 4, 4, (0, 0)).unwrap();
        let mut m: Vec<usize> = (0..16).collect();
        m[6] = 7;
        let pred = FlowField::from_matches(FlowDirection::GenToRef, 1, 4, 4, m).unwrap();
        assert_eq!(pck(&pred, &gt, &fg4(), DEFAULT_ALPHA, 2).unwrap(), 0.75);
        // Errors outside the foreground do not count.
        let mut m: Vec<usize> = (0..16).collect();
        m[0] = 1;
        let pred = FlowField::from_matches(FlowDirection::GenToRef, 1, 4, 4, m).unwrap();
        assert_eq!(pck(&pred, &gt, &fg4(), DEFAULT_ALPHA, 2).unwrap(), 1.0);
    }

    #[test]
    fn loose_threshold_accepts_one_token_error() {
        let gt = FlowField::uniform(FlowDirection::GenToRef, 1, 4, 4, (0, 0)).unwrap();
        let pred = FlowField::uniform(FlowDirection::GenToRef, 1, 4, 4, (0, 1)).unwrap();
        // Threshold 0.25·8 = 2 px covers a one-token (2 px) miss.
        assert_eq!(pck(&pred, &gt, &fg4(), 0.25, 2).unwrap(), 1.0);
        assert_eq!(pck(&pred, &gt, &fg4(), 0.2, 2).unwrap(), 0.0);
    }

    #[test]
    fn empty_foreground_is_undefined() {
        let gt = FlowField::uniform(FlowDirection::GenToRef, 1, 4, 4, (0, 0)).unwrap();
        let fg = Mask::filled(MaskKind::GroundTruth, Lattice::new(1, 4, 4), false);
        assert!(matches!(pck(&gt, &gt, &fg, 0.05, 2), Err(Error::UndefinedMetric(_))));
        assert!(pck(&gt, &gt, &fg4(), 0.0, 2).is_err());
    }
}
