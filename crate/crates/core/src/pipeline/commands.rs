use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::adaptation::{attach, train_coarse};
use crate::correspondence::{scene_trajectories, sweep_trajectories, MatchEvalReport, SweepOptions};
use crate::diffusion::{ddim_invert, InvertOptions, Trajectory};
use crate::error::{Error, Result};
use crate::injection::{run_dual_branch, seeded_noise, DualBranch, DualOutput, Strategy};
use crate::masking::Mask;
use crate::mmdit::{DescriptorKind, Mmdit, Prompt};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::{Scalar, Tensor};
use crate::scenes::{repeat_frames, Scene};

use super::checkpoint::{Checkpoint, SubjectSource};
use super::corpus::{check_scene_fits, load_scene, Corpus};
use super::output::{flow_csv, write_frames, write_json, write_jsonl, write_text};
use super::{Precision, RunConfig, RunReport};

fn seconds_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// Fit adapters and the subject token on one corpus scene's reference set.
/// Writes a checkpoint (base model plus adapters), `loss.csv` and `report.json`.
pub fn adapt<T: Scalar>(
    cfg: &RunConfig,
    corpus: &Corpus,
    scene: usize,
    out: &Path,
    precision: Precision,
) -> Result<RunReport> {
    let start = Instant::now();
    cfg.validate()?;
    check_scene_fits(&corpus.scene(scene)?, &cfg.model)?;
    let base = Mmdit::<f32>::init(cfg.model.clone(), cfg.seed)?.cast::<T>();
    let schedule = cfg.schedule()?;
    let references = corpus.references::<T>(scene)?;
    let trained = train_coarse(&base, &schedule, &references, &cfg.adaptation)?;
    let merged = attach(&base, trained.adapters.clone(), trained.token.clone())?.merged()?;
    let queries_frozen = merged
        .weights()
        .layers
        .iter()
        .zip(&base.weights().layers)
        .all(|(a, b)| a.wq == b.wq);
    let ckpt = Checkpoint {
        base,
        adapters: Some((trained.adapters, trained.token)),
    };
    ckpt.save(out)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in trained.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l:.9e}");
    }
    write_text(&out.join("loss.csv"), &csv)?;
    cfg.save(&out.join("config.toml"))?;
    let mut report = RunReport::new("adapt", cfg, precision)?;
    report.metrics = json!({
        "scene": scene,
        "steps": trained.losses.len(),
        "initial_loss": trained.losses.first(),
        "final_loss": trained.losses.last(),
        "queries_frozen": queries_frozen,
    });
    report.seconds = seconds_since(start);
    report.write(&out.join("report.json"))?;
    Ok(report)
}

/// Reference image for generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReferenceInput {
    /// A corpus scene directory; enables analytic subjects and ground truth.
    Scene(PathBuf),
    /// A `[1, H·p, W·p, c]` or `[H·p, W·p, c]` tensor file.
    Latent(PathBuf),
}

impl ReferenceInput {
    pub fn from_path(path: &Path) -> Self {
        if path.join("scene.toml").is_file() {
            ReferenceInput::Scene(path.to_path_buf())
        } else {
            ReferenceInput::Latent(path.to_path_buf())
        }
    }
}

/// Starting latent of the generation branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitLatent {
    /// Seeded standard-normal noise.
    Noise,
    /// DDIM inversion of the reference scene's video, for evaluation against
    /// its ground truth.
    Scene,
    /// A stored `x_T`.
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub reference: ReferenceInput,
    pub prompt: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub init: InitLatent,
    pub subject: SubjectSource,
}

fn write_matches(dir: &Path, out: &DualOutput<impl Scalar>) -> Result<()> {
    crate::store::create_dir(&dir.join("masks"))?;
    for m in &out.matches {
        let masks: [(&str, &Mask); 3] = [("fg", &m.foreground), ("cc", &m.cycle), ("combined", &m.combined)];
        for (name, mask) in masks {
            for f in 0..mask.frames {
                mask.write_pgm(&dir.join("masks").join(format!("step_{:03}_{name}_f{f}.pgm", m.step)), f)?;
            }
        }
        write_text(
            &dir.join("flows").join(format!("step_{:03}.csv", m.step)),
            &flow_csv(&m.gen_to_ref),
        )?;
    }
    Ok(())
}

fn reference_image<T: Scalar>(path: &Path, cfg: &crate::mmdit::ModelConfig) -> Result<Tensor<T>> {
    let t: Tensor<T> = read_tensor(path)?;
    let want = cfg.latent_shape(1);
    let t = if t.rank() == 3 {
        t.reshape(&want)?
    } else {
        t
    };
    if t.shape() != want {
        return Err(Error::Input(format!(
            "reference {} has shape {:?}, expected {want:?}",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}

/// Dual-branch generation with one strategy. Writes `latent.wkt`, frame dumps,
/// per-step diagnostics, masks, flows and `report.json`.
pub fn generate<T: Scalar>(
    cfg: &RunConfig,
    ckpt: &Checkpoint<T>,
    opts: &GenerateOptions,
    out: &Path,
    precision: Precision,
) -> Result<(RunReport, DualOutput<T>)> {
    let start = Instant::now();
    let mcfg = ckpt.config().clone();
    let injection = cfg.injection.clone().with_strategy(opts.strategy);
    injection.validate(mcfg.layers)?;
    let schedule = cfg.schedule()?;
    let scene = match &opts.reference {
        ReferenceInput::Scene(dir) => {
            let s = load_scene(dir)?;
            check_scene_fits(&s, &mcfg)?;
            Some(s)
        }
        ReferenceInput::Latent(_) => None,
    };
    let model = ckpt.model(opts.subject, scene.as_ref())?;
    let image: Tensor<T> = match (&opts.reference, &scene) {
        (ReferenceInput::Latent(p), _) => reference_image(p, &mcfg)?,
        (_, Some(s)) => s.render_reference()?,
        (ReferenceInput::Scene(_), None) => unreachable!("scene loaded above"),
    };
    let prompt = Prompt::encode(&opts.prompt, mcfg.text_len, mcfg.vocab);
    if prompt.subject_position().is_none() {
        return Err(Error::Input(format!("prompt {:?} does not name the subject", opts.prompt)));
    }
    let invert = InvertOptions::default();
    let reference = ddim_invert(&model, &schedule, &repeat_frames(&image, mcfg.frames)?, &prompt, invert)?;
    let x_t: Tensor<T> = match &opts.init {
        InitLatent::Noise => seeded_noise(&mcfg, opts.seed)?,
        InitLatent::Scene => {
            let s = scene
                .as_ref()
                .ok_or_else(|| Error::Config("--init scene needs a scene reference".into()))?;
            ddim_invert(&model, &schedule, &s.render_latent()?, &prompt, invert)?
                .at(schedule.steps())
                .expect("inversion reaches T")
                .clone()
        }
        InitLatent::File(p) => {
            let t: Tensor<T> = read_tensor(p)?;
            if t.shape() != mcfg.latent_shape(mcfg.frames) {
                return Err(Error::Input(format!("initial latent {} has shape {:?}", p.display(), t.shape())));
            }
            t
        }
    };
    let gt = match (&opts.init, &scene) {
        (InitLatent::Scene, Some(s)) => Some(s.ground_truth()?),
        _ => None,
    };
    let ctx = DualBranch {
        model: &model,
        schedule: &schedule,
        prompt: &prompt,
        reference: &reference,
        ground_truth: gt.as_ref(),
    };
    let result = run_dual_branch(ctx, x_t, &injection)?;

    crate::store::create_dir(out)?;
    write_tensor(&out.join("latent.wkt"), result.latent())?;
    let frames = write_frames(&out.join("frames"), result.latent())?;
    let diag = out.join("diagnostics");
    write_jsonl(&diag.join("log.jsonl"), &result.steps)?;
    write_matches(&diag, &result)?;
    let mut report = RunReport::new("generate", cfg, precision)?;
    report.metrics = json!({
        "strategy": opts.strategy,
        "seed": opts.seed,
        "prompt": opts.prompt,
        "latent_sha256": result.latent().checksum(),
        "steps": result.steps.len(),
        "injected_steps": result.steps.iter().filter(|d| d.injected).count(),
        "injected_layer_passes": result.log.len(),
        "leakage": result.total_leakage(),
        "value_fidelity": result.mean_of(|d| d.value_fidelity),
        "output_fidelity": result.mean_of(|d| d.output_fidelity),
        "pck": result.mean_of(|d| d.pck),
        "frames": frames,
    });
    report.seconds = seconds_since(start);
    report.write(&out.join("report.json"))?;
    Ok((report, result))
}

#[derive(Debug, Clone)]
pub struct MatchEvalOptions {
    pub scene: usize,
    pub subject: SubjectSource,
    pub timesteps: Vec<usize>,
}

impl Default for MatchEvalOptions {
    fn default() -> Self {
        MatchEvalOptions {
            scene: 0,
            subject: SubjectSource::Analytic,
            timesteps: vec![10, 20, 30, 40],
        }
    }
}

/// Descriptor sweep over every layer, kind and timestep of one corpus scene.
/// Writes `match_eval.csv`, `summary.json` and `report.json`.
pub fn match_eval<T: Scalar>(
    cfg: &RunConfig,
    ckpt: &Checkpoint<T>,
    corpus: &Corpus,
    opts: &MatchEvalOptions,
    out: &Path,
    precision: Precision,
) -> Result<(RunReport, MatchEvalReport)> {
    let start = Instant::now();
    let mcfg = ckpt.config().clone();
    let scene = corpus.scene(opts.scene)?;
    check_scene_fits(&scene, &mcfg)?;
    let model = ckpt.model(opts.subject, Some(&scene))?;
    let schedule = cfg.schedule()?;
    let prompt = Prompt::encode(corpus.prompt_for(opts.scene), mcfg.text_len, mcfg.vocab);
    let sweep = SweepOptions {
        timesteps: opts.timesteps.clone(),
        ..SweepOptions::all_layers(mcfg.layers)
    };
    let (gen, reference) = scene_trajectories(&scene, &model, &schedule, &prompt, sweep.invert)?;
    let table = sweep_trajectories(&model, &gen, &reference, &prompt, &scene.ground_truth()?, &sweep)?;
    crate::store::create_dir(out)?;
    table.write_csv(&out.join("match_eval.csv"))?;
    let best = table.best();
    let by_kind: serde_json::Map<String, serde_json::Value> = DescriptorKind::ALL
        .iter()
        .map(|&k| (k.to_string(), json!(table.mean_pck(k))))
        .collect();
    let summary = json!({
        "scene": opts.scene,
        "rows": table.rows.len(),
        "invalid_cells": table.rows.iter().filter(|r| r.pck.is_none()).count(),
        "best_layer": best.map(|b| b.0),
        "best_kind": best.map(|b| b.1),
        "best_mean_pck": best.map(|b| b.2),
        "mean_pck_by_kind": by_kind,
    });
    write_json(&out.join("summary.json"), &summary)?;
    let mut report = RunReport::new("match-eval", cfg, precision)?;
    report.metrics = summary;
    report.seconds = seconds_since(start);
    report.write(&out.join("report.json"))?;
    Ok((report, table))
}

#[derive(Debug, Clone)]
pub struct AblateOptions {
    pub scenes: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub subject: SubjectSource,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions {
            scenes: vec![0],
            strategies: Strategy::ALL.to_vec(),
            subject: SubjectSource::Analytic,
        }
    }
}

/// One strategy on one scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblateRow {
    pub strategy: Strategy,
    pub scene: usize,
    pub bijective: bool,
    pub value_fidelity: Option<f64>,
    pub output_fidelity: Option<f64>,
    pub leakage: usize,
    pub injected_steps: usize,
    pub fg_mean: Option<f64>,
    pub cc_mean: Option<f64>,
    pub combined_mean: Option<f64>,
    pub pck_mean: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

impl AblateRow {
    fn failed(strategy: Strategy, scene: usize, bijective: bool, error: String) -> Self {
        AblateRow {
            strategy,
            scene,
            bijective,
            value_fidelity: None,
            output_fidelity: None,
            leakage: 0,
            injected_steps: 0,
            fg_mean: None,
            cc_mean: None,
            combined_mean: None,
            pck_mean: None,
            seconds: 0.0,
            error: Some(error),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "invalid".to_string(), |x| format!("{x:.6}"))
}

fn ablate_csv(rows: &[AblateRow]) -> String {
    let mut s = String::from(
        "strategy,scene,bijective,value_fidelity,output_fidelity,leakage,injected_steps,fg_mean,cc_mean,combined_mean,pck_mean\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.strategy,
            r.scene,
            r.bijective,
            cell(r.value_fidelity),
            cell(r.output_fidelity),
            r.leakage,
            r.injected_steps,
            cell(r.fg_mean),
            cell(r.cc_mean),
            cell(r.combined_mean),
            cell(r.pck_mean)
        );
    }
    s
}

fn ablate_scene<T: Scalar>(
    cfg: &RunConfig,
    model: &Mmdit<T>,
    scene: &Scene,
    prompt: &Prompt,
    strategy: Strategy,
    branches: &(Trajectory<T>, Trajectory<T>),
) -> Result<DualOutput<T>> {
    let schedule = cfg.schedule()?;
    let gt = scene.ground_truth()?;
    let ctx = DualBranch {
        model,
        schedule: &schedule,
        prompt,
        reference: &branches.1,
        ground_truth: Some(&gt),
    };
    let x_t = branches
        .0
        .at(schedule.steps())
        .ok_or_else(|| Error::Branch("generation inversion does not reach T".into()))?
        .clone();
    run_dual_branch(ctx, x_t, &cfg.injection.clone().with_strategy(strategy))
}

/// Compare strategies on corpus scenes. Each generation starts from the
/// inversion of the scene video so the scene's ground truth applies. A failing
/// strategy is recorded in its row without stopping the others. Writes
/// `ablate.csv`, `ablate.json` and `report.json`.
pub fn ablate<T: Scalar>(
    cfg: &RunConfig,
    ckpt: &Checkpoint<T>,
    corpus: &Corpus,
    opts: &AblateOptions,
    out: &Path,
    precision: Precision,
) -> Result<(RunReport, Vec<AblateRow>)> {
    let start = Instant::now();
    let mcfg = ckpt.config().clone();
    cfg.injection.validate(mcfg.layers)?;
    let schedule = cfg.schedule()?;
    let mut rows = Vec::new();
    for &i in &opts.scenes {
        let scene = corpus.scene(i)?;
        check_scene_fits(&scene, &mcfg)?;
        let bijective = scene.ground_truth()?.bijective;
        let prompt = Prompt::encode(corpus.prompt_for(i), mcfg.text_len, mcfg.vocab);
        let prepared = ckpt.model(opts.subject, Some(&scene)).and_then(|m| {
            let b = scene_trajectories(&scene, &m, &schedule, &prompt, InvertOptions::default())?;
            Ok((m, b))
        });
        let (model, branches) = match prepared {
            Ok(p) => p,
            Err(e) => {
                rows.extend(
                    opts.strategies
                        .iter()
                        .map(|&s| AblateRow::failed(s, i, bijective, e.to_string())),
                );
                continue;
            }
        };
        for &strategy in &opts.strategies {
            let t0 = Instant::now();
            let row = match ablate_scene(cfg, &model, &scene, &prompt, strategy, &branches) {
                Ok(o) => {
                    let mean_count = |f: fn(&crate::injection::StepDiagnostics) -> usize| {
                        o.mean_of(|d| (d.skip != Some(crate::injection::SkipReason::OutsideBand)).then(|| f(d) as f64))
                    };
                    AblateRow {
                        strategy,
                        scene: i,
                        bijective,
                        value_fidelity: o.mean_of(|d| d.value_fidelity),
                        output_fidelity: o.mean_of(|d| d.output_fidelity),
                        leakage: o.total_leakage(),
                        injected_steps: o.steps.iter().filter(|d| d.injected).count(),
                        fg_mean: mean_count(|d| d.fg_count),
                        cc_mean: mean_count(|d| d.cc_count),
                        combined_mean: mean_count(|d| d.combined_count),
                        pck_mean: o.mean_of(|d| d.pck),
                        seconds: seconds_since(t0),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("ablate: {strategy} on scene {i} failed: {e}");
                    AblateRow::failed(strategy, i, bijective, e.to_string())
                }
            };
            rows.push(row);
        }
    }
    crate::store::create_dir(out)?;
    write_text(&out.join("ablate.csv"), &ablate_csv(&rows))?;
    let summary: Vec<serde_json::Value> = opts
        .strategies
        .iter()
        .map(|&s| {
            let mine: Vec<&AblateRow> = rows.iter().filter(|r| r.strategy == s && r.error.is_none()).collect();
            let mean = |f: fn(&AblateRow) -> Option<f64>| {
                let v: Vec<f64> = mine.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            json!({
                "strategy": s,
                "scenes_ok": mine.len(),
                "value_fidelity": mean(|r| r.value_fidelity),
                "output_fidelity": mean(|r| r.output_fidelity),
                "leakage": mine.iter().map(|r| r.leakage).sum::<usize>(),
                "pck": mean(|r| r.pck_mean),
                "seconds": mine.iter().map(|r| r.seconds).sum::<f64>(),
            })
        })
        .collect();
    write_json(&out.join("ablate.json"), &json!({ "rows": rows, "summary": summary }))?;
    let mut report = RunReport::new("ablate", cfg, precision)?;
    report.metrics = json!({ "summary": summary });
    report.seconds = seconds_since(start);
    report.write(&out.join("report.json"))?;
    Ok((report, rows))
}
