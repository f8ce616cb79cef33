//! Spatial reliability gating: foreground masks from video→subject attention,
//! cycle-consistency masks from bidirectional flows, and their intersection.

mod mask;

pub use mask::{Mask, MaskKind};

use serde::{Deserialize, Serialize};

use crate::correspondence::{wrap_offset, FlowField};
use crate::error::{Error, Result};
use crate::mmdit::{Lattice, Prompt, Trace};
use crate::numerics::{Scalar, Tensor};

/// How the averaged subject attention is turned into a foreground mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Min-max normalize each frame to `[0, 1]` before thresholding.
    #[default]
    Normalized,
    /// Threshold the raw averaged probabilities.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub tau_fg: f64,
    pub tau_cc: f64,
    pub normalization: Normalization,
    /// A frame whose attention spread `max − min` is at most
    /// `min_contrast·max` counts as degenerate.
    pub min_contrast: f64,
    /// Layers averaged for the foreground map; empty means the injection layer band.
    pub layers: Vec<usize>,
    /// Number of most recent completed steps averaged; `None` means all of them.
    pub window: Option<usize>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            tau_fg: 0.3,
            tau_cc: 0.1,
            normalization: Normalization::Normalized,
            min_contrast: 0.05,
            layers: Vec::new(),
            window: None,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_fg > 0.0 && self.tau_fg < 1.0) {
            return Err(Error::Config(format!("tau_fg {} outside (0, 1)", self.tau_fg)));
        }
        if !(self.tau_cc > 0.0 && self.tau_cc.is_finite()) {
            return Err(Error::Config(format!("tau_cc {} must be positive", self.tau_cc)));
        }
        if !(self.min_contrast >= 0.0 && self.min_contrast < 1.0) {
            return Err(Error::Config(format!("min_contrast {} outside [0, 1)", self.min_contrast)));
        }
        if self.window == Some(0) {
            return Err(Error::Config("foreground window must be positive".into()));
        }
        Ok(())
    }
}

/// Foreground mask plus the map it was thresholded from.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub mask: Mask,
    /// Averaged (and, when configured, normalized) attention per video token.
    pub map: Vec<f64>,
    /// Some frame had no usable contrast; its mask is all zero.
    pub degenerate: bool,
}

/// Attention from every video query to the subject text key, averaged over
/// `layers` and heads.
pub fn subject_attention_map<T: Scalar>(trace: &Trace<T>, layers: &[usize], prompt: &Prompt) -> Result<Vec<f64>> {
    let pos = prompt
        .subject_position()
        .ok_or_else(|| Error::Input("prompt has no subject token".into()))?;
    if layers.is_empty() {
        return Err(Error::Config("foreground aggregation needs at least one layer".into()));
    }
    let mut acc: Vec<f64> = Vec::new();
    let mut terms = 0usize;
    for &l in layers {
        let lt = trace.layer(l)?;
        let probs = lt.probs.as_ref().ok_or(Error::MissingTrace { layer: l })?;
        if acc.is_empty() {
            acc = vec![0.0; lt.n_video];
        }
        for p in probs {
            let (_, keys) = p.dims2()?;
            // Text keys always close the key axis.
            let col = keys - prompt.ids.len() + pos;
            for (i, a) in acc.iter_mut().enumerate() {
                *a += p.data()[i * keys + col].to_f64();
            }
            terms += 1;
        }
    }
    Ok(acc.into_iter().map(|a| a / terms as f64).collect())
}

/// Average per-step maps and threshold them.
pub fn foreground_from_maps(maps: &[Vec<f64>], lattice: Lattice, cfg: &MaskConfig) -> Result<ForegroundMask> {
    cfg.validate()?;
    let recent = match cfg.window {
        Some(w) if w < maps.len() => &maps[maps.len() - w..],
        _ => maps,
    };
    if recent.is_empty() {
        return Err(Error::Contract("foreground mask needs at least one completed step".into()));
    }
    if let Some(bad) = recent.iter().find(|m| m.len() != lattice.len()) {
        return Err(Error::shape(format!(
            "attention map of {} tokens for a lattice of {}",
            bad.len(),
            lattice.len()
        )));
    }
    let mut map: Vec<f64> = (0..lattice.len())
        .map(|i| recent.iter().map(|m| m[i]).sum::<f64>() / recent.len() as f64)
        .collect();
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("foreground map"));
    }
    let per = lattice.per_frame();
    let mut values = vec![false; lattice.len()];
    let mut degenerate = false;
    for f in 0..lattice.frames {
        let frame = &mut map[f * per..(f + 1) * per];
        let lo = frame.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = frame.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= cfg.min_contrast * hi.abs() || hi == lo {
            degenerate = true;
            continue;
        }
        if cfg.normalization == Normalization::Normalized {
            for v in frame.iter_mut() {
                *v = (*v - lo) / (hi - lo);
            }
        }
        for (i, &v) in frame.iter().enumerate() {
            values[f * per + i] = v > cfg.tau_fg;
        }
    }
    Ok(ForegroundMask {
        mask: Mask::new(MaskKind::Foreground, lattice, values)?,
        map,
        degenerate,
    })
}

/// Foreground mask from the traces of completed denoising steps.
pub fn foreground_mask<T: Scalar>(
    traces: &[&Trace<T>],
    layers: &[usize],
    prompt: &Prompt,
    lattice: Lattice,
    cfg: &MaskConfig,
) -> Result<ForegroundMask> {
    let maps = traces
        .iter()
        .map(|t| subject_attention_map(t, layers, prompt))
        .collect::<Result<Vec<_>>>()?;
    foreground_from_maps(&maps, lattice, cfg)
}

/// Round-trip distance `‖p − F_rg(F_gr(p))‖₂` per token of the first flow's
/// branch, in token units on the torus.
pub fn cycle_error(forward: &FlowField, backward: &FlowField) -> Result<Tensor<f64>> {
    if forward.direction == backward.direction {
        return Err(Error::Contract(format!(
            "cycle needs opposite flows, both are {}",
            forward.direction
        )));
    }
    if !forward.same_layout(backward) {
        return Err(Error::shape("flows have different layouts"));
    }
    let per = forward.per_frame();
    let err: Vec<f64> = (0..forward.len())
        .map(|i| {
            let back = backward.matched(forward.matched_global(i));
            let own = i % per;
            let dr = wrap_offset((back / forward.cols) as i64 - (own / forward.cols) as i64, forward.rows);
            let dc = wrap_offset((back % forward.cols) as i64 - (own % forward.cols) as i64, forward.cols);
            (dr as f64).hypot(dc as f64)
        })
        .collect();
    Tensor::new(&[forward.frames, forward.rows, forward.cols], err)
}

/// Tokens with cycle error below `θ_f = τ_cc·H·|M_fg,f|/(H·W)`, per frame.
pub fn cycle_mask(err: &Tensor<f64>, fg: &Mask, cfg: &MaskConfig) -> Result<Mask> {
    cfg.validate()?;
    if err.shape() != [fg.frames, fg.rows, fg.cols] {
        return Err(Error::shape(format!(
            "cycle error {:?} for a {}x{}x{} mask",
            err.shape(),
            fg.frames,
            fg.rows,
            fg.cols
        )));
    }
    let per = fg.per_frame();
    let values = (0..fg.len())
        .map(|i| {
            let f = i / per;
            let theta = cfg.tau_cc * fg.rows as f64 * (fg.frame_count(f) as f64 / per as f64);
            err.data()[i] < theta
        })
        .collect();
    Mask::new(MaskKind::Cycle, fg.lattice(), values)
}

/// Elementwise AND.
pub fn combine(fg: &Mask, cc: &Mask) -> Result<Mask> {
    if fg.lattice() != cc.lattice() {
        return Err(Error::shape("masks cover different lattices"));
    }
    let values = fg.values().iter().zip(cc.values()).map(|(&a, &b)| a && b).collect();
    Mask::new(MaskKind::Combined, fg.lattice(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::FlowDirection;

    fn lat() -> Lattice {
        Lattice::new(1, 8, 8)
    }

    fn block_mask(lattice: Lattice, cells: &[usize]) -> Mask {
        let mut v = vec![false; lattice.len()];
        for &c in cells {
            v[c] = true;
        }
        Mask::new(MaskKind::Foreground, lattice, v).unwrap()
    }

    #[test]
    fn default_thresholds() {
        let c = MaskConfig::default();
        assert_eq!(c.tau_fg, 0.3);
        assert_eq!(c.tau_cc, 0.1);
        assert_eq!(c.normalization, Normalization::Normalized);
    }

    #[test]
    fn concentrated_attention_marks_exactly_the_block() {
        let l = Lattice::new(1, 4, 4);
        let block = [5, 6, 9, 10];
        let map: Vec<f64> = (0..16).map(|i| if block.contains(&i) { 0.4 } else { 0.01 }).collect();
        let fg = foreground_from_maps(&[map], l, &MaskConfig::default()).unwrap();
        assert!(!fg.degenerate);
        assert_eq!(fg.mask, block_mask(l, &block));
    }

    #[test]
    fn uniform_attention_is_degenerate() {
        let l = Lattice::new(2, 4, 4);
        let fg = foreground_from_maps(&[vec![1.0 / 40.0; 32]], l, &MaskConfig::default()).unwrap();
        assert!(fg.degenerate);
        assert!(fg.mask.none_set());
    }

    #[test]
    fn raw_mode_thresholds_probabilities() {
        let l = Lattice::new(1, 2, 2);
        let cfg = MaskConfig {
            normalization: Normalization::Raw,
            ..MaskConfig::default()
        };
        let fg = foreground_from_maps(&[vec![0.1, 0.35, 0.2, 0.9]], l, &cfg).unwrap();
        assert_eq!(fg.mask.values(), &[false, true, false, true]);
    }

    #[test]
    fn window_keeps_recent_steps() {
        let l = Lattice::new(1, 1, 2);
        let cfg = MaskConfig {
            window: Some(1),
            ..MaskConfig::default()
        };
        let fg = foreground_from_maps(&[vec![1.0, 0.0], vec![0.0, 1.0]], l, &cfg).unwrap();
        assert_eq!(fg.mask.values(), &[false, true]);
    }

    #[test]
    fn thresholding_is_idempotent() {
        let l = Lattice::new(1, 4, 4);
        let map: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let cfg = MaskConfig::default();
        let a = foreground_from_maps(&[map], l, &cfg).unwrap();
        let b = foreground_from_maps(std::slice::from_ref(&a.map), l, &cfg).unwrap();
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn cycle_error_cases() {
        let f = FlowField::uniform(FlowDirection::GenToRef, 2, 8, 8, (2, 3)).unwrap();
        let b = FlowField::uniform(FlowDirection::RefToGen, 2, 8, 8, (-2, -3)).unwrap();
        assert!(cycle_error(&f, &b).unwrap().data().iter().all(|&e| e == 0.0));
        let f = FlowField::uniform(FlowDirection::GenToRef, 1, 8, 8, (1, 0)).unwrap();
        let b = FlowField::uniform(FlowDirection::RefToGen, 1, 8, 8, (0, 0)).unwrap();
        assert!(cycle_error(&f, &b).unwrap().data().iter().all(|&e| e == 1.0));
        assert!(matches!(cycle_error(&f, &f), Err(Error::Contract(_))));
    }

    #[test]
    fn constructed_cycle_threshold() {
        // 16 of 64 tokens in the foreground: θ = 0.1·8·0.25 = 0.2.
        let fg_cells: Vec<usize> = (0..16).map(|i| (i / 4 + 2) * 8 + i % 4 + 2).collect();
        let fg = block_mask(lat(), &fg_cells);
        let err: Vec<f64> = (0..64).map(|i| [0.0, 1.0, 2.0f64.sqrt(), 0.0][i % 4]).collect();
        let err = Tensor::new(&[1, 8, 8], err).unwrap();
        let cc = cycle_mask(&err, &fg, &MaskConfig::default()).unwrap();
        for i in 0..64 {
            assert_eq!(cc.get(i), err.data()[i] == 0.0);
        }
        let empty = Mask::filled(MaskKind::Foreground, lat(), false);
        assert!(cycle_mask(&err, &empty, &MaskConfig::default()).unwrap().none_set());
    }

    #[test]
    fn combination_counts() {
        let a = block_mask(lat(), &[1, 2, 3, 4]);
        let b = block_mask(lat(), &[3, 4, 5]);
        let c = combine(&a, &b).unwrap();
        assert_eq!(c.count(), 2);
        assert!(c.count() <= a.count().min(b.count()));
        assert!(c.is_subset_of(&a));
        assert_eq!(combine(&a, &Mask::filled(MaskKind::Cycle, lat(), true)).unwrap().values(), a.values());
        assert!(combine(&a, &block_mask(lat(), &[9])).unwrap().none_set());
    }
}
