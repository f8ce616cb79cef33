use std::path::Path;

use warpkit::diffusion::{sample, Schedule};
use warpkit::injection::{seeded_noise, Strategy};
use warpkit::mmdit::{InitMode, Mmdit, Prompt};
use warpkit::numerics::io::read_tensor;
use warpkit::numerics::Tensor;
use warpkit::pipeline::{
    ablate, adapt, gen_scene, generate, init_checkpoint, match_eval, AblateOptions, Checkpoint, GenerateOptions,
    InitLatent, MatchEvalOptions, Precision, ReferenceInput, RunConfig, SubjectSource,
};
use warpkit::scenes::CorpusSpec;

fn fast_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.schedule.steps = 10;
    cfg.model.init = InitMode::ContentIdentity;
    cfg.adaptation.steps = 3;
    cfg.adaptation.batch = 2;
    cfg.adaptation.rank = 4;
    cfg
}

fn corpus(dir: &Path) -> warpkit::pipeline::Corpus {
    let spec = CorpusSpec {
        scenes: 2,
        references: 2,
        ..CorpusSpec::default()
    };
    gen_scene(&spec, dir).unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn adapt_writes_a_loadable_checkpoint_with_one_loss_row_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let c = corpus(&tmp.path().join("corpus"));
    let out = tmp.path().join("adapted");
    let report = adapt::<f32>(&cfg, &c, 0, &out, Precision::F32).unwrap();
    assert_eq!(report.metrics["queries_frozen"], true);
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    let ck = Checkpoint::<f32>::load(&out).unwrap();
    assert!(ck.adapters.is_some());
    assert_eq!(ck.base, Mmdit::<f32>::init(cfg.model.clone(), cfg.seed).unwrap());
    assert_eq!(RunConfig::load(&out.join("config.toml")).unwrap(), cfg);
}

#[test]
fn adapt_with_zero_steps_equals_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fast_config();
    cfg.adaptation.steps = 0;
    let c = corpus(&tmp.path().join("corpus"));
    let out = tmp.path().join("adapted");
    adapt::<f32>(&cfg, &c, 0, &out, Precision::F32).unwrap();
    let ck = Checkpoint::<f32>::load(&out).unwrap();
    let merged = ck.model(SubjectSource::Checkpoint, None).unwrap();
    assert_eq!(merged.weights().layers, ck.base.weights().layers);
}

#[test]
fn generate_none_reproduces_plain_sampling_and_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let c = corpus(&tmp.path().join("corpus"));
    let ckdir = tmp.path().join("ckpt");
    init_checkpoint(&cfg.model, cfg.seed, &ckdir).unwrap();
    let ck = Checkpoint::<f32>::load(&ckdir).unwrap();
    let opts = GenerateOptions {
        reference: ReferenceInput::from_path(&c.scene_dir(0).unwrap()),
        prompt: "a photo of <sks>".into(),
        strategy: Strategy::None,
        seed: 7,
        init: InitLatent::Noise,
        subject: SubjectSource::Checkpoint,
    };
    let out = tmp.path().join("none");
    let (_, result) = generate(&cfg, &ck, &opts, &out, Precision::F32).unwrap();

    let model = ck.model(SubjectSource::Checkpoint, None).unwrap();
    let schedule = Schedule::new(&cfg.schedule).unwrap();
    let prompt = Prompt::encode("a photo of <sks>", cfg.model.text_len, cfg.model.vocab);
    let x_t: Tensor<f32> = seeded_noise(&cfg.model, 7).unwrap();
    let baseline = sample(&model, &schedule, x_t, &prompt).unwrap();
    let written: Tensor<f32> = read_tensor(&out.join("latent.wkt")).unwrap();
    assert_eq!(&written, baseline.final_latent());
    assert_eq!(result.latent(), baseline.final_latent());

    let log = std::fs::read_to_string(out.join("diagnostics/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "injected", "fg_count", "cc_count"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    assert!(out.join("frames/frame_003.ppm").is_file());

    let again = tmp.path().join("none2");
    generate(&cfg, &ck, &opts, &again, Precision::F32).unwrap();
    assert_eq!(read(&out.join("latent.wkt")), read(&again.join("latent.wkt")));
    assert_eq!(read(&out.join("diagnostics/log.jsonl")), read(&again.join("diagnostics/log.jsonl")));
}

#[test]
fn generate_value_warp_writes_masks_and_flows_for_injected_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let c = corpus(&tmp.path().join("corpus"));
    let ckdir = tmp.path().join("ckpt");
    init_checkpoint(&cfg.model, cfg.seed, &ckdir).unwrap();
    let ck = Checkpoint::<f32>::load(&ckdir).unwrap();
    let opts = GenerateOptions {
        reference: ReferenceInput::from_path(&c.scene_dir(1).unwrap()),
        prompt: "a photo of <sks>".into(),
        strategy: Strategy::ValueWarp,
        seed: 1,
        init: InitLatent::Scene,
        subject: SubjectSource::Analytic,
    };
    let out = tmp.path().join("warp");
    let (report, result) = generate(&cfg, &ck, &opts, &out, Precision::F32).unwrap();
    assert!(result.steps.iter().any(|d| d.injected));
    assert_eq!(report.metrics["leakage"], 0);
    let m = &result.matches[0];
    let csv = std::fs::read_to_string(out.join(format!("diagnostics/flows/step_{:03}.csv", m.step))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 256);
    for kind in ["fg", "cc", "combined"] {
        let p = out.join(format!("diagnostics/masks/step_{:03}_{kind}_f0.pgm", m.step));
        assert!(p.is_file(), "{}", p.display());
    }
}

#[test]
fn generate_rejects_bad_inputs_with_typed_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let ckdir = tmp.path().join("ckpt");
    init_checkpoint(&cfg.model, cfg.seed, &ckdir).unwrap();
    let ck = Checkpoint::<f32>::load(&ckdir).unwrap();
    let bad = tmp.path().join("wrong.wkt");
    warpkit::numerics::io::write_tensor(&bad, &Tensor::<f32>::zeros(&[3, 3]).unwrap()).unwrap();
    let opts = GenerateOptions {
        reference: ReferenceInput::Latent(bad),
        prompt: "a photo of <sks>".into(),
        strategy: Strategy::None,
        seed: 0,
        init: InitLatent::Noise,
        subject: SubjectSource::Checkpoint,
    };
    let err = generate(&cfg, &ck, &opts, &tmp.path().join("o"), Precision::F32).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let missing = GenerateOptions {
        reference: ReferenceInput::Latent(tmp.path().join("absent.wkt")),
        ..opts
    };
    let err = generate(&cfg, &ck, &missing, &tmp.path().join("o"), Precision::F32).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn match_eval_writes_one_row_per_layer_kind_and_timestep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let c = corpus(&tmp.path().join("corpus"));
    let ckdir = tmp.path().join("ckpt");
    init_checkpoint(&cfg.model, cfg.seed, &ckdir).unwrap();
    let ck = Checkpoint::<f32>::load(&ckdir).unwrap();
    let opts = MatchEvalOptions {
        timesteps: vec![2, 5, 8, 10],
        ..MatchEvalOptions::default()
    };
    let out = tmp.path().join("eval");
    let (_, table) = match_eval(&cfg, &ck, &c, &opts, &out, Precision::F32).unwrap();
    assert_eq!(table.rows.len(), 96);
    let csv = std::fs::read_to_string(out.join("match_eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 97);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let best = table.best().unwrap();
    assert_eq!(summary["best_layer"], best.0);
    assert_eq!(summary["best_kind"], best.1.to_string());
}

#[test]
fn ablate_covers_every_strategy_and_orders_value_fidelity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let c = corpus(&tmp.path().join("corpus"));
    let ckdir = tmp.path().join("ckpt");
    init_checkpoint(&cfg.model, cfg.seed, &ckdir).unwrap();
    let ck = Checkpoint::<f32>::load(&ckdir).unwrap();
    let out = tmp.path().join("ablate");
    let (_, rows) = ablate(&cfg, &ck, &c, &AblateOptions::default(), &out, Precision::F32).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.error.is_none()));
    let row = |s| rows.iter().find(|r| r.strategy == s).unwrap();
    assert!(row(Strategy::ValueWarp).value_fidelity > row(Strategy::None).value_fidelity);
    assert_eq!(row(Strategy::ValueWarp).leakage, 0);
    assert_eq!(row(Strategy::None).injected_steps, 0);
    let csv = std::fs::read_to_string(out.join("ablate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let again = tmp.path().join("ablate2");
    ablate(&cfg, &ck, &c, &AblateOptions::default(), &again, Precision::F32).unwrap();
    assert_eq!(read(&out.join("ablate.csv")), read(&again.join("ablate.csv")));
}

#[test]
fn ablate_isolates_a_failing_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let c = corpus(&tmp.path().join("corpus"));
    let ckdir = tmp.path().join("ckpt");
    init_checkpoint(&cfg.model, cfg.seed, &ckdir).unwrap();
    let ck = Checkpoint::<f32>::load(&ckdir).unwrap();
    // Scene 5 does not exist: the command fails up front.
    let opts = AblateOptions {
        scenes: vec![5],
        ..AblateOptions::default()
    };
    assert!(ablate(&cfg, &ck, &c, &opts, &tmp.path().join("a"), Precision::F32).is_err());
    // A checkpoint-sourced subject without adapters still runs every strategy.
    let opts = AblateOptions {
        subject: SubjectSource::Checkpoint,
        strategies: vec![Strategy::None, Strategy::TokenConcat],
        ..AblateOptions::default()
    };
    let (_, rows) = ablate(&cfg, &ck, &c, &opts, &tmp.path().join("b"), Precision::F32).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn f64_generation_matches_f32_closely() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let c = corpus(&tmp.path().join("corpus"));
    let ckdir = tmp.path().join("ckpt");
    init_checkpoint(&cfg.model, cfg.seed, &ckdir).unwrap();
    let opts = GenerateOptions {
        reference: ReferenceInput::from_path(&c.scene_dir(0).unwrap()),
        prompt: "a photo of <sks>".into(),
        strategy: Strategy::None,
        seed: 3,
        init: InitLatent::Noise,
        subject: SubjectSource::Checkpoint,
    };
    let (_, a) = generate(&cfg, &Checkpoint::<f32>::load(&ckdir).unwrap(), &opts, &tmp.path().join("a"), Precision::F32).unwrap();
    let (_, b) = generate(&cfg, &Checkpoint::<f64>::load(&ckdir).unwrap(), &opts, &tmp.path().join("b"), Precision::F64).unwrap();
    let diff = a.latent().cast::<f64>().max_abs_diff(b.latent()).unwrap();
    assert!(diff < 1e-3, "f32 vs f64 differ by {diff}");
}
