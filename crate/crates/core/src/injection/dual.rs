use std::collections::BTreeSet;

use serde::Serialize;

use crate::correspondence::{match_branches, pck, FlowField, DEFAULT_ALPHA};
use crate::diffusion::{sample_with, Schedule, Trajectory};
use crate::error::{Error, Result};
use crate::masking::{combine, cycle_error, cycle_mask, foreground_from_maps, subject_attention_map, Mask};
use crate::mmdit::{
    attend, AttentionEdit, AttentionHook, AttentionIo, LayerTrace, Lattice, Mmdit, ModelConfig, ModelInput, Prompt,
    Trace, TraceSpec,
};
use crate::numerics::{Scalar, SeededRng, Tensor};
use crate::scenes::GroundTruth;

use super::config::{InjectionConfig, Strategy};
use super::ops::{blend_values, kv_replacement_attention, warp_values, BranchQkv};

/// Standard-normal starting latent for a generation of `cfg.frames` frames.
pub fn seeded_noise<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Tensor<T>> {
    let mut rng = SeededRng::new(seed).fork("generation.noise");
    Tensor::randn(&cfg.latent_shape(cfg.frames), 1.0, &mut rng)
}

/// (step, layer) pairs already injected. Applying one twice is an error.
#[derive(Debug, Clone, Default)]
pub struct AppliedLog {
    applied: BTreeSet<(usize, usize)>,
}

impl AppliedLog {
    fn record(&mut self, step: usize, layer: usize) -> Result<()> {
        if !self.applied.insert((step, layer)) {
            return Err(Error::Injection(format!("step {step} layer {layer} was already injected")));
        }
        Ok(())
    }

    pub fn contains(&self, step: usize, layer: usize) -> bool {
        self.applied.contains(&(step, layer))
    }

    pub fn len(&self) -> usize {
        self.applied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.applied.is_empty()
    }
}

/// Applies one strategy at the band layers of one denoising step, reading the
/// reference branch from its trace of the same step.
pub struct InjectionHook<'a, T> {
    pub step: usize,
    pub strategy: Strategy,
    pub layers: &'a BTreeSet<usize>,
    pub reference: &'a Trace<T>,
    /// Generation-to-reference matches.
    pub flow: &'a FlowField,
    /// Generation tokens to inject.
    pub combined: &'a Mask,
    /// Reference foreground, used by key/value replacement.
    pub reference_fg: &'a Mask,
    pub log: &'a mut AppliedLog,
}

impl<T: Scalar> AttentionHook<T> for InjectionHook<'_, T> {
    fn attention(&mut self, io: &AttentionIo<'_, T>) -> Result<AttentionEdit<T>> {
        if self.strategy == Strategy::None || !self.layers.contains(&io.layer) {
            return Ok(AttentionEdit::Keep);
        }
        self.log.record(self.step, io.layer)?;
        let r = self.reference.layer(io.layer)?;
        let n = io.n_video;
        if r.n_video != n {
            return Err(Error::Branch(format!(
                "reference has {} video tokens, generation {n}",
                r.n_video
            )));
        }
        let k_ref = r.k.slice_rows(0, n)?;
        let v_ref = r.v.slice_rows(0, n)?;
        Ok(match self.strategy {
            Strategy::None => AttentionEdit::Keep,
            Strategy::ValueWarp => {
                let warped = warp_values(&v_ref, self.flow)?;
                AttentionEdit::VideoValues(blend_values(&warped, &io.v.slice_rows(0, n)?, self.combined)?)
            }
            Strategy::KvReplace => {
                let gen = BranchQkv {
                    q: io.q,
                    k: io.k,
                    v: io.v,
                    n_video: n,
                };
                AttentionEdit::VideoOutput(kv_replacement_attention(
                    gen,
                    &k_ref,
                    &v_ref,
                    self.reference_fg,
                    self.combined,
                    io.heads,
                )?)
            }
            Strategy::TokenConcat => AttentionEdit::ExtraKeys {
                keys: k_ref,
                values: v_ref,
                mask: None,
            },
        })
    }
}

/// Why a step ran without injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    OutsideBand,
    StrategyNone,
    /// No previous step supplied descriptors.
    NoDescriptors,
    DegenerateForeground,
    EmptyMask,
}

/// One record per denoising step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: usize,
    pub injected: bool,
    pub skip: Option<SkipReason>,
    pub fg_count: usize,
    pub cc_count: usize,
    pub combined_count: usize,
    pub reference_fg_count: usize,
    pub degenerate: bool,
    /// Flow accuracy against the ground truth, when one is given.
    pub pck: Option<f64>,
    /// Edited video rows outside the foreground mask, summed over band layers.
    pub leakage: usize,
    /// Whether the attention probabilities of the injected layers equal those
    /// of the generation branch's own queries and keys.
    pub routing_preserved: Option<bool>,
    /// Mean cosine between attended generation values and reference values at
    /// the true match, over ground-truth foreground tokens and band layers.
    pub value_fidelity: Option<f64>,
    /// The same for attention outputs.
    pub output_fidelity: Option<f64>,
}

/// Masks and flows computed for one in-band step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMatch {
    pub step: usize,
    pub gen_to_ref: FlowField,
    pub ref_to_gen: FlowField,
    pub foreground: Mask,
    pub cycle: Mask,
    pub combined: Mask,
}

#[derive(Debug, Clone)]
pub struct DualOutput<T> {
    pub trajectory: Trajectory<T>,
    pub steps: Vec<StepDiagnostics>,
    pub matches: Vec<StepMatch>,
    pub log: AppliedLog,
}

impl<T: Scalar> DualOutput<T> {
    pub fn latent(&self) -> &Tensor<T> {
        self.trajectory.final_latent()
    }

    /// Mean of a per-step metric over the steps that report it.
    pub fn mean_of(&self, metric: impl Fn(&StepDiagnostics) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.steps.iter().filter_map(metric).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn total_leakage(&self) -> usize {
        self.steps.iter().map(|s| s.leakage).sum()
    }
}

/// Inputs shared by both branches.
#[derive(Debug, Clone, Copy)]
pub struct DualBranch<'a, T> {
    /// Model with adapters merged and the subject token installed.
    pub model: &'a Mmdit<T>,
    pub schedule: &'a Schedule,
    pub prompt: &'a Prompt,
    /// Inverted trajectory of the repeated reference image.
    pub reference: &'a Trajectory<T>,
    pub ground_truth: Option<&'a GroundTruth>,
}

struct Branches<T> {
    gen: Trace<T>,
    reference: Trace<T>,
}

struct StepPlan {
    matched: StepMatch,
    reference_fg: Mask,
    degenerate: bool,
}

fn with_step(e: Error, step: usize, t: usize) -> Error {
    match e {
        Error::NonFinite { site } => Error::NonFinite {
            site: format!("step {step} (t={t}), {site}"),
        },
        other => other,
    }
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64(), y.to_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Original video and text keys of a possibly widened trace.
fn native_keys<T: Scalar>(lt: &LayerTrace<T>) -> Result<Tensor<T>> {
    let s = lt.q.shape()[0];
    let keys = lt.k.shape()[0];
    let n = lt.n_video;
    Tensor::concat_rows(&[&lt.k.slice_rows(0, n)?, &lt.k.slice_rows(keys - (s - n), keys)?])
}

/// Synchronized generation/reference denoising from `x_t` with appearance
/// injection per `cfg`. Diagnostics are recorded for every strategy; strategy
/// `none` never edits and reproduces plain sampling bit for bit.
pub fn run_dual_branch<T: Scalar>(ctx: DualBranch<'_, T>, x_t: Tensor<T>, cfg: &InjectionConfig) -> Result<DualOutput<T>> {
    let mcfg = ctx.model.config();
    cfg.validate(mcfg.layers)?;
    let steps = ctx.schedule.steps();
    if let Some(t) = (0..=steps).find(|&t| ctx.reference.at(t).is_none()) {
        return Err(Error::Branch(format!("reference trajectory lacks timestep {t}")));
    }
    let band_layers: BTreeSet<usize> = cfg.layer_indices(mcfg.layers).into_iter().collect();
    let band_steps: BTreeSet<usize> = cfg.step_indices(steps).into_iter().collect();
    let mask_layers = cfg.mask_layers(mcfg.layers);
    let desc_layer = cfg.descriptor_layer.unwrap_or_else(|| mcfg.default_descriptor_layer());
    let lattice = Lattice::new(mcfg.frames, mcfg.grid_h, mcfg.grid_w);
    let spec = TraceSpec {
        layers: band_layers
            .iter()
            .copied()
            .chain(mask_layers.iter().copied())
            .chain([desc_layer])
            .collect(),
        probs: true,
    };

    let mut gen_maps: Vec<Vec<f64>> = Vec::new();
    let mut ref_maps: Vec<Vec<f64>> = Vec::new();
    let mut previous: Option<Branches<T>> = None;
    let mut log = AppliedLog::default();
    let mut diagnostics = Vec::with_capacity(steps);
    let mut matches = Vec::new();

    let trajectory = sample_with(ctx.schedule, x_t, |step, t, x| {
        let input = |latent| ModelInput {
            latent,
            t,
            prompt: ctx.prompt,
        };
        let mut run = || -> Result<Tensor<T>> {
            let x_ref = ctx.reference.at(t).expect("checked above");
            let reference = ctx.model.forward(input(x_ref), None, &spec)?.trace;
            let in_band = band_steps.contains(&step);
            let plan = match (&previous, in_band, gen_maps.is_empty()) {
                (Some(prev), true, false) => Some(plan_step(
                    step,
                    prev,
                    &gen_maps,
                    &ref_maps,
                    desc_layer,
                    lattice,
                    cfg,
                )?),
                _ => None,
            };
            let skip = if !in_band {
                Some(SkipReason::OutsideBand)
            } else if cfg.strategy == Strategy::None {
                Some(SkipReason::StrategyNone)
            } else {
                match &plan {
                    None => Some(SkipReason::NoDescriptors),
                    Some(p) if p.degenerate => Some(SkipReason::DegenerateForeground),
                    Some(p)
                        if cfg.strategy != Strategy::TokenConcat && p.matched.combined.none_set() =>
                    {
                        Some(SkipReason::EmptyMask)
                    }
                    Some(_) => None,
                }
            };
            let out = match (&plan, skip) {
                (Some(p), None) => {
                    let mut hook = InjectionHook {
                        step,
                        strategy: cfg.strategy,
                        layers: &band_layers,
                        reference: &reference,
                        flow: &p.matched.gen_to_ref,
                        combined: &p.matched.combined,
                        reference_fg: &p.reference_fg,
                        log: &mut log,
                    };
                    ctx.model.forward(input(x), Some(&mut hook), &spec)?
                }
                _ => ctx.model.forward(input(x), None, &spec)?,
            };
            let injected = skip.is_none();
            let mut d = StepDiagnostics {
                step,
                t,
                injected,
                skip,
                fg_count: 0,
                cc_count: 0,
                combined_count: 0,
                reference_fg_count: 0,
                degenerate: false,
                pck: None,
                leakage: 0,
                routing_preserved: None,
                value_fidelity: None,
                output_fidelity: None,
            };
            if let Some(p) = &plan {
                d.fg_count = p.matched.foreground.count();
                d.cc_count = p.matched.cycle.count();
                d.combined_count = p.matched.combined.count();
                d.reference_fg_count = p.reference_fg.count();
                d.degenerate = p.degenerate;
                if let Some(gt) = ctx.ground_truth {
                    d.pck = pck(
                        &p.matched.gen_to_ref,
                        &gt.flow,
                        &gt.mask,
                        DEFAULT_ALPHA,
                        mcfg.patch,
                    )
                    .ok();
                }
                if injected {
                    d.leakage = leakage(&out.trace, &band_layers, &p.matched.foreground, cfg.strategy)?;
                    d.routing_preserved = Some(routing_preserved(&out.trace, &band_layers, cfg.strategy)?);
                }
            }
            if in_band {
                if let Some(gt) = ctx.ground_truth {
                    let (v, o) = fidelity(&out.trace, &reference, &band_layers, gt)?;
                    d.value_fidelity = Some(v);
                    d.output_fidelity = Some(o);
                }
            }
            gen_maps.push(subject_attention_map(&out.trace, &mask_layers, ctx.prompt)?);
            ref_maps.push(subject_attention_map(&reference, &mask_layers, ctx.prompt)?);
            if let Some(p) = plan {
                matches.push(p.matched);
            }
            diagnostics.push(d);
            previous = Some(Branches {
                gen: out.trace,
                reference,
            });
            Ok(out.eps)
        };
        run().map_err(|e| with_step(e, step, t))
    })?;

    Ok(DualOutput {
        trajectory,
        steps: diagnostics,
        matches,
        log,
    })
}

fn plan_step<T: Scalar>(
    step: usize,
    prev: &Branches<T>,
    gen_maps: &[Vec<f64>],
    ref_maps: &[Vec<f64>],
    desc_layer: usize,
    lattice: Lattice,
    cfg: &InjectionConfig,
) -> Result<StepPlan> {
    let m = match_branches(&prev.gen, &prev.reference, desc_layer, cfg.descriptor_kind, lattice)?;
    let fg = foreground_from_maps(gen_maps, lattice, &cfg.mask)?;
    let ref_fg = foreground_from_maps(ref_maps, lattice, &cfg.mask)?;
    let err = cycle_error(&m.gen_to_ref, &m.ref_to_gen)?;
    let cycle = cycle_mask(&err, &fg.mask, &cfg.mask)?;
    let combined = combine(&fg.mask, &cycle)?;
    let degenerate = fg.degenerate || (cfg.strategy == Strategy::KvReplace && ref_fg.degenerate);
    Ok(StepPlan {
        matched: StepMatch {
            step,
            gen_to_ref: m.gen_to_ref,
            ref_to_gen: m.ref_to_gen,
            foreground: fg.mask,
            cycle,
            combined,
        },
        reference_fg: ref_fg.mask,
        degenerate,
    })
}

/// Video rows outside `fg` whose injected payload differs from the unedited
/// one: values for value warping, attention outputs otherwise.
fn leakage<T: Scalar>(trace: &Trace<T>, layers: &BTreeSet<usize>, fg: &Mask, strategy: Strategy) -> Result<usize> {
    let mut count = 0;
    for &l in layers {
        let lt = trace.layer(l)?;
        let n = lt.n_video;
        let (edited, native) = match strategy {
            Strategy::ValueWarp => (lt.v_used.clone(), lt.v.clone()),
            _ => {
                let heads = lt.probs.as_ref().ok_or(Error::MissingTrace { layer: l })?.len();
                let (plain, _) = attend(&lt.q, &native_keys(lt)?, &lt.v, heads, None)?;
                (lt.out.clone(), plain)
            }
        };
        count += (0..n).filter(|&p| !fg.get(p) && edited.row(p) != native.row(p)).count();
    }
    Ok(count)
}

/// Recompute the probabilities from the generation's own queries and keys and
/// compare bit for bit. Strategies that replace keys change routing by design.
fn routing_preserved<T: Scalar>(trace: &Trace<T>, layers: &BTreeSet<usize>, strategy: Strategy) -> Result<bool> {
    if matches!(strategy, Strategy::KvReplace | Strategy::TokenConcat) {
        return Ok(false);
    }
    for &l in layers {
        let lt = trace.layer(l)?;
        let probs = lt.probs.as_ref().ok_or(Error::MissingTrace { layer: l })?;
        let (_, native) = attend(&lt.q, &native_keys(lt)?, &lt.v, probs.len(), None)?;
        if &native != probs {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Mean cosine of generation values and outputs against the reference at the
/// true match, over ground-truth foreground tokens and `layers`.
fn fidelity<T: Scalar>(
    gen: &Trace<T>,
    reference: &Trace<T>,
    layers: &BTreeSet<usize>,
    gt: &GroundTruth,
) -> Result<(f64, f64)> {
    let (mut v, mut o, mut terms) = (0.0, 0.0, 0usize);
    for &l in layers {
        let g = gen.layer(l)?;
        let r = reference.layer(l)?;
        for p in (0..gt.mask.len()).filter(|&p| gt.mask.get(p)) {
            let q = gt.flow.matched_global(p);
            v += cosine(g.v_used.row(p), r.v.row(q));
            o += cosine(g.out.row(p), r.out.row(q));
            terms += 1;
        }
    }
    if terms == 0 {
        return Err(Error::UndefinedMetric("fidelity over an empty foreground".into()));
    }
    Ok((v / terms as f64, o / terms as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::scene_trajectories;
    use crate::diffusion::{sample, InvertOptions, ScheduleConfig};
    use crate::mmdit::InitMode;
    use crate::scenes::{make_scene, Scene, SceneParams};

    struct Fixture {
        model: Mmdit<f32>,
        schedule: Schedule,
        prompt: Prompt,
        scene: Scene,
        gen: Trajectory<f32>,
        reference: Trajectory<f32>,
    }

    fn fixture(shift: [i64; 2]) -> Fixture {
        let cfg = ModelConfig {
            init: InitMode::ContentIdentity,
            ..ModelConfig::default()
        };
        let mut model = Mmdit::<f32>::init(cfg.clone(), 0).unwrap();
        let schedule = Schedule::new(&ScheduleConfig {
            steps: 10,
            ..ScheduleConfig::default()
        })
        .unwrap();
        let prompt = Prompt::encode("a photo of <sks>", cfg.text_len, cfg.vocab);
        let params = SceneParams {
            canonical: Some([2, 2]),
            ..SceneParams::for_model(&cfg).translated(shift)
        };
        let scene = make_scene(1, &params).unwrap();
        model
            .set_subject_embedding(Some(scene.subject_embedding(&cfg).unwrap()))
            .unwrap();
        let (gen, reference) =
            scene_trajectories(&scene, &model, &schedule, &prompt, InvertOptions::default()).unwrap();
        Fixture {
            model,
            schedule,
            prompt,
            scene,
            gen,
            reference,
        }
    }

    impl Fixture {
        fn ctx<'a>(&'a self, gt: &'a GroundTruth) -> DualBranch<'a, f32> {
            DualBranch {
                model: &self.model,
                schedule: &self.schedule,
                prompt: &self.prompt,
                reference: &self.reference,
                ground_truth: Some(gt),
            }
        }

        fn start(&self) -> Tensor<f32> {
            self.gen.at(self.schedule.steps()).unwrap().clone()
        }

        fn baseline(&self) -> Tensor<f32> {
            sample(&self.model, &self.schedule, self.start(), &self.prompt)
                .unwrap()
                .final_latent()
                .clone()
        }
    }

    #[test]
    fn strategy_none_is_baseline_and_value_warp_injects_without_leakage() {
        let fx = fixture([3, 0]);
        let gt = fx.scene.ground_truth().unwrap();
        let base = fx.baseline();
        let none = run_dual_branch(fx.ctx(&gt), fx.start(), &InjectionConfig::default().with_strategy(Strategy::None)).unwrap();
        assert_eq!(none.latent(), &base);
        assert!(none.log.is_empty());
        assert_eq!(none.steps.len(), 10);
        // Steps 1..=3 form the band at T = 10.
        let warp = run_dual_branch(fx.ctx(&gt), fx.start(), &InjectionConfig::default()).unwrap();
        let injected: Vec<usize> = warp.steps.iter().filter(|d| d.injected).map(|d| d.step).collect();
        assert_eq!(injected, vec![1, 2, 3]);
        assert_eq!(warp.log.len(), 6);
        assert!(warp.log.contains(2, 4) && warp.log.contains(2, 5) && !warp.log.contains(2, 3));
        assert_eq!(warp.total_leakage(), 0);
        assert!(warp.steps.iter().filter(|d| d.injected).all(|d| d.routing_preserved == Some(true)));
        assert!(warp.steps.iter().filter(|d| d.injected).all(|d| d.pck == Some(1.0)));
        assert!(warp.matches.iter().all(|m| m.combined.is_subset_of(&m.foreground)));
        assert_ne!(warp.latent(), &base);
        let vf = |o: &DualOutput<f32>| o.mean_of(|d| d.value_fidelity).unwrap();
        assert!(vf(&warp) > vf(&none));
    }

    #[test]
    fn degenerate_foreground_falls_back_to_baseline() {
        let fx = fixture([3, 0]);
        let gt = fx.scene.ground_truth().unwrap();
        let mut cfg = InjectionConfig::default();
        cfg.mask.min_contrast = 0.999;
        let out = run_dual_branch(fx.ctx(&gt), fx.start(), &cfg).unwrap();
        assert_eq!(out.latent(), &fx.baseline());
        let band: Vec<&StepDiagnostics> = out.steps.iter().filter(|d| d.skip != Some(SkipReason::OutsideBand)).collect();
        assert!(!band.is_empty());
        assert!(band.iter().all(|d| d.skip == Some(SkipReason::DegenerateForeground) && d.degenerate));
    }

    #[test]
    fn identical_branches_give_zero_flow_and_baseline_output() {
        let fx = fixture([0, 0]);
        let gt = fx.scene.ground_truth().unwrap();
        let ctx = DualBranch {
            reference: &fx.gen,
            ..fx.ctx(&gt)
        };
        let out = run_dual_branch(ctx, fx.start(), &InjectionConfig::default()).unwrap();
        assert!(out.steps.iter().any(|d| d.injected));
        for m in &out.matches {
            assert!(m.gen_to_ref.displacements().iter().all(|&d| d == (0, 0)));
        }
        assert!(out.latent().max_abs_diff(&fx.baseline()).unwrap() < 1e-5);
    }

    #[test]
    fn hook_rejects_a_second_application() {
        let fx = fixture([3, 0]);
        let x = fx.start();
        let spec = TraceSpec::all(8, false);
        let input = ModelInput {
            latent: &x,
            t: 10,
            prompt: &fx.prompt,
        };
        let reference = fx.model.forward(input, None, &spec).unwrap().trace;
        let lat = fx.scene.lattice();
        let flow = FlowField::uniform(crate::correspondence::FlowDirection::GenToRef, lat.frames, lat.rows, lat.cols, (0, 0)).unwrap();
        let all = Mask::filled(crate::masking::MaskKind::Combined, lat, true);
        let layers: BTreeSet<usize> = [4].into();
        let mut log = AppliedLog::default();
        let mut hook = InjectionHook {
            step: 0,
            strategy: Strategy::ValueWarp,
            layers: &layers,
            reference: &reference,
            flow: &flow,
            combined: &all,
            reference_fg: &all,
            log: &mut log,
        };
        let lt = reference.layer(4).unwrap();
        let io = AttentionIo {
            layer: 4,
            heads: 4,
            n_video: lt.n_video,
            q_pre: &lt.q_pre,
            k_pre: &lt.k_pre,
            v: &lt.v,
            q: &lt.q,
            k: &lt.k,
        };
        match hook.attention(&io).unwrap() {
            AttentionEdit::VideoValues(v) => assert_eq!(v, lt.v.slice_rows(0, lt.n_video).unwrap()),
            other => panic!("unexpected edit {other:?}"),
        }
        assert!(matches!(hook.attention(&io), Err(Error::Injection(_))));
        // Outside the band the hook keeps the layer untouched.
        let io3 = AttentionIo { layer: 3, ..io };
        assert_eq!(hook.attention(&io3).unwrap(), AttentionEdit::Keep);
    }

    #[test]
    fn value_edits_keep_attention_probabilities() {
        let fx = fixture([3, 0]);
        let x = fx.start();
        let spec = TraceSpec::all(8, true);
        let input = ModelInput {
            latent: &x,
            t: 10,
            prompt: &fx.prompt,
        };
        let base = fx.model.forward(input, None, &spec).unwrap().trace;
        let x_ref = fx.reference.at(10).unwrap();
        let reference = fx.model.forward(ModelInput { latent: x_ref, ..input }, None, &spec).unwrap().trace;
        let gt = fx.scene.ground_truth().unwrap();
        let layers: BTreeSet<usize> = [4, 5].into();
        let mut log = AppliedLog::default();
        let mut hook = InjectionHook {
            step: 0,
            strategy: Strategy::ValueWarp,
            layers: &layers,
            reference: &reference,
            flow: &gt.flow,
            combined: &gt.mask,
            reference_fg: &gt.reference_mask,
            log: &mut log,
        };
        let edited = fx.model.forward(input, Some(&mut hook), &spec).unwrap().trace;
        for l in 0..=4 {
            assert_eq!(edited.layer(l).unwrap().probs, base.layer(l).unwrap().probs, "layer {l}");
        }
        assert_ne!(edited.layer(4).unwrap().v_used, base.layer(4).unwrap().v_used);
        assert!(routing_preserved(&edited, &layers, Strategy::ValueWarp).unwrap());
        assert_eq!(leakage(&edited, &layers, &gt.mask, Strategy::ValueWarp).unwrap(), 0);
    }

    #[test]
    fn missing_reference_timesteps_are_rejected() {
        let fx = fixture([3, 0]);
        let gt = fx.scene.ground_truth().unwrap();
        let short = Trajectory::new(3, fx.start());
        let ctx = DualBranch {
            reference: &short,
            ..fx.ctx(&gt)
        };
        assert!(matches!(run_dual_branch(ctx, fx.start(), &InjectionConfig::default()), Err(Error::Branch(_))));
    }

    #[test]
    fn non_finite_errors_carry_the_step() {
        let e = with_step(Error::non_finite("layer 4 output"), 7, 43);
        assert!(e.to_string().contains("step 7") && e.to_string().contains("layer 4"));
    }

    #[test]
    fn seeded_noise_is_deterministic() {
        let cfg = ModelConfig::default();
        let a: Tensor<f32> = seeded_noise(&cfg, 5).unwrap();
        assert_eq!(a, seeded_noise(&cfg, 5).unwrap());
        assert_ne!(a, seeded_noise(&cfg, 6).unwrap());
        assert_eq!(a.shape(), cfg.latent_shape(cfg.frames));
    }
}
