//! Fixtures shared by the kernel benchmarks.

use warpkit::correspondence::Correlation;
use warpkit::mmdit::{Mmdit, ModelConfig, Prompt};
use warpkit::numerics::{SeededRng, Tensor};

pub const PROMPT: &str = "a photo of <sks>";

/// Toy-default model, prompt and a random latent.
pub fn toy_model(seed: u64) -> (Mmdit<f32>, Prompt, Tensor<f32>) {
    let cfg = ModelConfig::default();
    let model = Mmdit::init(cfg.clone(), seed).expect("default config is valid");
    let prompt = Prompt::encode(PROMPT, cfg.text_len, cfg.vocab);
    let mut rng = SeededRng::new(seed).fork("bench.latent");
    let x = Tensor::randn(&cfg.latent_shape(cfg.frames), 1.0, &mut rng).expect("valid shape");
    (model, prompt, x)
}

/// Random `[n, d]` matrix.
pub fn random_matrix(n: usize, d: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn(&[n, d], 1.0, &mut SeededRng::new(seed)).expect("valid shape")
}

/// Random correlation over `frames` frames of a `rows x cols` lattice.
pub fn random_correlation(frames: usize, rows: usize, cols: usize, seed: u64) -> Correlation<f32> {
    let per = rows * cols;
    let data = (0..frames as u64)
        .map(|f| random_matrix(per, per, seed + f))
        .collect();
    Correlation::from_frames(rows, cols, data).expect("square frames")
}
