use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::diffusion::{ddim_invert, InvertOptions, Schedule, Trajectory};
use crate::error::{Error, Result};
use crate::mmdit::{extract_descriptors, DescriptorKind, Lattice, Mmdit, ModelInput, Prompt, Trace, TraceSpec};
use crate::numerics::{Scalar, Tensor};
use crate::scenes::{GroundTruth, Scene};

use super::correlation::{directional_correlation, extract_flow, symmetric_correlation, Correlation};
use super::flow::{FlowDirection, FlowField};
use super::pck::{pck_counts, DEFAULT_ALPHA};

/// Bidirectional matches between two traced branches at one layer.
#[derive(Debug, Clone)]
pub struct BranchMatch<T> {
    pub symmetric: Correlation<T>,
    pub gen_to_ref: FlowField,
    pub ref_to_gen: FlowField,
}

/// Correlate the generation and reference traces of one layer and extract
/// flows in both directions from the symmetric map.
pub fn match_branches<T: Scalar>(
    gen: &Trace<T>,
    reference: &Trace<T>,
    layer: usize,
    kind: DescriptorKind,
    lattice: Lattice,
) -> Result<BranchMatch<T>> {
    let g = extract_descriptors(gen, layer, kind)?;
    let r = extract_descriptors(reference, layer, kind)?;
    let c_gr = directional_correlation(&g.query, &r.key, lattice)?;
    let c_rg = directional_correlation(&r.query, &g.key, lattice)?;
    let symmetric = symmetric_correlation(&c_gr, &c_rg)?;
    Ok(BranchMatch {
        gen_to_ref: extract_flow(&symmetric, FlowDirection::GenToRef)?,
        ref_to_gen: extract_flow(&symmetric, FlowDirection::RefToGen)?,
        symmetric,
    })
}

/// One cell of a descriptor sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchEvalRow {
    pub layer: usize,
    pub kind: DescriptorKind,
    pub timestep: usize,
    /// `None` when the cell failed.
    pub pck: Option<f64>,
    pub fg_count: usize,
    pub evaluated: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchEvalReport {
    pub rows: Vec<MatchEvalRow>,
}

impl MatchEvalReport {
    /// `layer,kind,timestep,pck,fg_count`; failed cells read `invalid`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,timestep,pck,fg_count\n");
        for r in &self.rows {
            let pck = r.pck.map_or_else(|| "invalid".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{},{},{},{},{}", r.layer, r.kind, r.timestep, pck, r.fg_count);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, layer: usize, kind: DescriptorKind, timestep: usize) -> Option<&MatchEvalRow> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.kind == kind && r.timestep == timestep)
    }

    /// Mean PCK of one kind over its valid cells.
    pub fn mean_pck(&self, kind: DescriptorKind) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.kind == kind).filter_map(|r| r.pck).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `(layer, kind)` with the highest PCK averaged over timesteps; ties go
    /// to the earlier layer, then kind order.
    pub fn best(&self) -> Option<(usize, DescriptorKind, f64)> {
        let mut best: Option<(usize, DescriptorKind, f64)> = None;
        let mut keys: Vec<(usize, DescriptorKind)> = self.rows.iter().map(|r| (r.layer, r.kind)).collect();
        keys.sort();
        keys.dedup();
        for (layer, kind) in keys {
            let v: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.layer == layer && r.kind == kind)
                .filter_map(|r| r.pck)
                .collect();
            if v.is_empty() {
                continue;
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            if best.is_none_or(|(_, _, b)| m > b) {
                best = Some((layer, kind, m));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub layers: Vec<usize>,
    pub kinds: Vec<DescriptorKind>,
    pub timesteps: Vec<usize>,
    pub alpha: f64,
    pub invert: InvertOptions,
}

impl SweepOptions {
    /// Every layer and kind at timesteps 10, 20, 30 and 40.
    pub fn all_layers(layers: usize) -> Self {
        SweepOptions {
            layers: (0..layers).collect(),
            kinds: DescriptorKind::ALL.to_vec(),
            timesteps: vec![10, 20, 30, 40],
            alpha: DEFAULT_ALPHA,
            invert: InvertOptions::default(),
        }
    }
}

/// Inverted trajectories of a scene: the video itself for the generation
/// branch and the repeated reference image for the reference branch.
pub fn scene_trajectories<T: Scalar>(
    scene: &Scene,
    model: &Mmdit<T>,
    schedule: &Schedule,
    prompt: &Prompt,
    opts: InvertOptions,
) -> Result<(Trajectory<T>, Trajectory<T>)> {
    let gen = ddim_invert(model, schedule, &scene.render_latent()?, prompt, opts)?;
    let reference = ddim_invert(model, schedule, &scene.render_repeated_reference()?, prompt, opts)?;
    Ok((gen, reference))
}

fn latent_at<T: Scalar>(tr: &Trajectory<T>, t: usize) -> Result<&Tensor<T>> {
    tr.at(t)
        .ok_or_else(|| Error::Domain(format!("timestep {t} is not on the trajectory")))
}

/// PCK of every `(layer, kind, timestep)` cell against the ground truth.
/// A failing cell is reported as invalid instead of aborting the sweep.
#[allow(clippy::too_many_arguments)]
pub fn sweep_trajectories<T: Scalar>(
    model: &Mmdit<T>,
    gen: &Trajectory<T>,
    reference: &Trajectory<T>,
    prompt: &Prompt,
    gt: &GroundTruth,
    opts: &SweepOptions,
) -> Result<MatchEvalReport> {
    let cfg = model.config();
    let lattice = gt.mask.lattice();
    let spec = TraceSpec::layers(opts.layers.iter().copied(), false);
    let fg_count = gt.mask.count();
    let mut report = MatchEvalReport::default();
    for &t in &opts.timesteps {
        let traces = (|| -> Result<(Trace<T>, Trace<T>)> {
            let run = |x| {
                model
                    .forward(ModelInput { latent: x, t, prompt }, None, &spec)
                    .map(|o| o.trace)
            };
            Ok((run(latent_at(gen, t)?)?, run(latent_at(reference, t)?)?))
        })();
        for &layer in &opts.layers {
            for &kind in &opts.kinds {
                let cell = match &traces {
                    Ok((g, r)) => match_branches(g, r, layer, kind, lattice)
                        .and_then(|m| pck_counts(&m.gen_to_ref, &gt.flow, &gt.mask, opts.alpha, cfg.patch))
                        .map_err(|e| e.to_string()),
                    Err(e) => Err(e.to_string()),
                };
                let (pck, evaluated, error) = match cell {
                    Ok(c) => (Some(c.ratio()), c.evaluated, None),
                    Err(e) => (None, 0, Some(e)),
                };
                report.rows.push(MatchEvalRow {
                    layer,
                    kind,
                    timestep: t,
                    pck,
                    fg_count,
                    evaluated,
                    error,
                });
            }
        }
    }
    Ok(report)
}

/// Invert a scene's two branches and sweep descriptors over them.
pub fn descriptor_sweep<T: Scalar>(
    scene: &Scene,
    model: &Mmdit<T>,
    schedule: &Schedule,
    prompt: &Prompt,
    opts: &SweepOptions,
) -> Result<MatchEvalReport> {
    let (gen, reference) = scene_trajectories(scene, model, schedule, prompt, opts.invert)?;
    sweep_trajectories(model, &gen, &reference, prompt, &scene.ground_truth()?, opts)
}
