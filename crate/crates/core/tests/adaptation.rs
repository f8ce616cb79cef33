use warpkit::adaptation::{attach, default_adapters, train_coarse, Projection, SubjectToken, TrainConfig};
use warpkit::diffusion::{Schedule, ScheduleConfig};
use warpkit::mmdit::{Mmdit, ModelConfig, Prompt};
use warpkit::numerics::{SeededRng, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 2,
        dim: 32,
        heads: 2,
        grid_h: 2,
        grid_w: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn adapter_and_token_gradients_match_finite_differences() {
    let cfg = tiny();
    let schedule = Schedule::new(&ScheduleConfig::default()).unwrap();
    let prompt = Prompt::encode("a photo of <sks>", cfg.text_len, cfg.vocab);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let model = Mmdit::<f64>::init(cfg.clone(), seed).unwrap();
        let mut rng = SeededRng::new(1000 + seed);
        let mut adapters = default_adapters(&model, 2, 1.0, &mut rng.fork("adapters")).unwrap();
        // Nonzero up factors so the down factors receive gradient.
        for ad in &mut adapters {
            ad.b = Tensor::randn(ad.b.shape(), 0.1, &mut rng).unwrap();
        }
        let token = SubjectToken::from_table(&model.weights().text_table).unwrap();
        let adapted = attach(&model, adapters, token).unwrap();
        let x0 = Tensor::randn(&cfg.latent_shape(1), 0.5, &mut rng).unwrap();
        let eps = Tensor::randn(&cfg.latent_shape(1), 1.0, &mut rng).unwrap();
        let t = rng.int_inclusive(1, schedule.steps());
        let err = adapted.gradient_check(&schedule, &x0, &prompt, t, &eps, 1e-5).unwrap();
        worst = worst.max(err);
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn coarse_adaptation_freezes_queries_and_base_weights() {
    let cfg = tiny();
    let model = Mmdit::<f32>::init(cfg.clone(), 3).unwrap();
    let schedule = Schedule::new(&ScheduleConfig::default()).unwrap();
    let mut rng = SeededRng::new(4);
    let refs: Vec<Tensor<f32>> = (0..2)
        .map(|_| Tensor::randn(&cfg.latent_shape(1), 0.5, &mut rng).unwrap())
        .collect();
    let before = model.weights().checksum_excluding(|_| false);
    let train = TrainConfig {
        steps: 100,
        batch: 2,
        adapter_lr: 1e-3,
        token_lr: 1e-3,
        ..TrainConfig::default()
    };
    let out = train_coarse(&model, &schedule, &refs, &train).unwrap();
    assert_eq!(out.losses.len(), 100);
    assert_eq!(model.weights().checksum_excluding(|_| false), before);
    let adapted = attach(&model, out.adapters, out.token).unwrap();
    let merged = adapted.merged().unwrap();
    for (l, (a, b)) in merged.weights().layers.iter().zip(&model.weights().layers).enumerate() {
        assert_eq!(a.wq, b.wq, "layer {l} query weights changed");
        assert_ne!(a.wk, b.wk, "layer {l} key adapter had no effect");
    }
    let frozen = |name: &str| ["wk", "wv", "wo"].iter().any(|p| name.ends_with(p));
    assert_eq!(
        merged.weights().checksum_excluding(frozen),
        model.weights().checksum_excluding(frozen)
    );
    for l in 0..cfg.layers {
        assert!(adapted.effective_weight(l, Projection::Key).is_ok());
    }
}
