//! Coarse appearance adaptation: key/value/output low-rank adapters and a
//! trainable subject token, fitted with AdamW on the ε-prediction loss.

pub mod checkpoint;
pub mod lora;
pub mod optim;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffusion::{epsilon_loss_vars, Schedule};
use crate::error::{Error, Result};
use crate::mmdit::{Mmdit, ParamVars, Prompt};
use crate::numerics::{finite_diff_check, Scalar, SeededRng, Tape, Tensor, Var};

pub use checkpoint::{load_adapters, save_adapters};
pub use lora::{apply_lora, LoraAdapter, Projection, SubjectToken};
pub use optim::{adamw_step, AdamState, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adapter_lr: f64,
    pub token_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Zero steps is allowed and leaves the adapters at their initialization.
    pub steps: usize,
    /// Entries in the fixed noise bank evaluated every step.
    pub batch: usize,
    pub seed: u64,
    /// Requested rank; the effective rank is `min(rank, d/2)`.
    pub rank: usize,
    pub lora_scale: f64,
    pub prompt: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adapter_lr: 1e-4,
            token_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            steps: 100,
            batch: 5,
            seed: 0,
            rank: 128,
            lora_scale: 1.0,
            prompt: "a photo of <sks>".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adapter_lr >= 0.0 && self.token_lr >= 0.0) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("AdamW needs betas in [0,1) and eps > 0".into()));
        }
        if self.batch == 0 || self.rank == 0 {
            return Err(Error::Config("batch and rank must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn effective_rank(&self, dim: usize) -> usize {
        self.rank.min((dim / 2).max(1))
    }
}

/// A base model viewed through a set of adapters and a subject token.
#[derive(Debug, Clone)]
pub struct AdaptedModel<'a, T> {
    base: &'a Mmdit<T>,
    adapters: Vec<LoraAdapter<T>>,
    token: SubjectToken<T>,
}

/// Trainable leaves created by [`AdaptedModel::param_vars`], in adapter order.
#[derive(Debug, Clone)]
pub struct AdapterLeaves<T> {
    pub a: Vec<Var<T>>,
    pub b: Vec<Var<T>>,
    pub token: Var<T>,
}

/// Adapters for every key, value and output projection of `model`.
pub fn default_adapters<T: Scalar>(model: &Mmdit<T>, rank: usize, scale: f64, rng: &mut SeededRng) -> Result<Vec<LoraAdapter<T>>> {
    let cfg = model.config();
    let mut out = Vec::new();
    for layer in 0..cfg.layers {
        for target in Projection::ADAPTABLE {
            let mut r = rng.fork(&format!("lora.{layer}.{target}"));
            out.push(LoraAdapter::new(layer, target, cfg.dim, rank, scale, &mut r)?);
        }
    }
    Ok(out)
}

/// Attach adapters and a subject token to `model`. At most one adapter per
/// (layer, projection).
pub fn attach<T: Scalar>(
    model: &Mmdit<T>,
    mut adapters: Vec<LoraAdapter<T>>,
    token: SubjectToken<T>,
) -> Result<AdaptedModel<'_, T>> {
    let cfg = model.config();
    let mut seen = BTreeSet::new();
    for ad in &adapters {
        if ad.layer() >= cfg.layers {
            return Err(Error::Wiring(format!(
                "adapter targets layer {} of a {}-layer model",
                ad.layer(),
                cfg.layers
            )));
        }
        if ad.a.shape()[1] != cfg.dim {
            return Err(Error::Wiring(format!(
                "adapter for layer {} {} has dim {}, model dim is {}",
                ad.layer(),
                ad.target(),
                ad.a.shape()[1],
                cfg.dim
            )));
        }
        if !seen.insert((ad.layer(), ad.target())) {
            return Err(Error::Config(format!(
                "duplicate adapter for layer {} {}",
                ad.layer(),
                ad.target()
            )));
        }
    }
    if token.embedding.shape() != [1, cfg.dim] {
        return Err(Error::shape(format!(
            "subject embedding {:?} must be [1, {}]",
            token.embedding.shape(),
            cfg.dim
        )));
    }
    adapters.sort_by_key(|a| (a.layer(), a.target()));
    Ok(AdaptedModel {
        base: model,
        adapters,
        token,
    })
}

impl<'a, T: Scalar> AdaptedModel<'a, T> {
    pub fn base(&self) -> &'a Mmdit<T> {
        self.base
    }

    pub fn adapters(&self) -> &[LoraAdapter<T>] {
        &self.adapters
    }

    pub fn token(&self) -> &SubjectToken<T> {
        &self.token
    }

    pub fn into_parts(self) -> (Vec<LoraAdapter<T>>, SubjectToken<T>) {
        (self.adapters, self.token)
    }

    fn adapter(&self, layer: usize, target: Projection) -> Option<&LoraAdapter<T>> {
        self.adapters.iter().find(|a| a.layer() == layer && a.target() == target)
    }

    pub fn effective_weight(&self, layer: usize, target: Projection) -> Result<Tensor<T>> {
        let lw = self
            .base
            .weights()
            .layers
            .get(layer)
            .ok_or_else(|| Error::Wiring(format!("no layer {layer}")))?;
        let w = target.weight(lw);
        match self.adapter(layer, target) {
            Some(ad) => apply_lora(w, ad),
            None => Ok(w.clone()),
        }
    }

    /// A standalone model with the adapters folded into its weights and the
    /// subject embedding installed.
    pub fn merged(&self) -> Result<Mmdit<T>> {
        let mut w = self.base.weights().clone();
        for ad in &self.adapters {
            let slot = ad.target().weight_mut(&mut w.layers[ad.layer()]);
            *slot = apply_lora(slot, ad)?;
        }
        let mut m = self.base.with_weights(w)?;
        m.set_subject_embedding(Some(self.token.embedding.clone()))?;
        Ok(m)
    }

    /// Parameters on `tape` with adapter factors and the token as leaves.
    pub fn param_vars(&self, tape: &Tape<T>) -> Result<(ParamVars<T>, AdapterLeaves<T>)> {
        let mut params = self.base.param_vars(tape);
        let mut leaves = AdapterLeaves {
            a: Vec::with_capacity(self.adapters.len()),
            b: Vec::with_capacity(self.adapters.len()),
            token: tape.leaf(self.token.embedding.clone()),
        };
        for ad in &self.adapters {
            let a = tape.leaf(ad.a.clone());
            let b = tape.leaf(ad.b.clone());
            let lv = &mut params.layers[ad.layer()];
            let slot = match ad.target() {
                Projection::Key => &mut lv.wk,
                Projection::Value => &mut lv.wv,
                Projection::Output => &mut lv.wo,
                Projection::Query => unreachable!("query adapters cannot be constructed"),
            };
            let delta = tape.scale(&tape.matmul(&b, &a)?, ad.scale());
            *slot = tape.add(slot, &delta)?;
            leaves.a.push(a);
            leaves.b.push(b);
        }
        params.subject = Some(leaves.token.clone());
        Ok((params, leaves))
    }

    /// ε-prediction loss of the adapted model, without gradients.
    pub fn loss(&self, schedule: &Schedule, x0: &Tensor<T>, prompt: &Prompt, t: usize, eps: &Tensor<T>) -> Result<T> {
        let tape = Tape::new();
        let (params, _) = self.param_vars(&tape)?;
        epsilon_loss_vars(&tape, self.base, &params, schedule, x0, prompt, t, eps)?.value().item()
    }
}

impl AdaptedModel<'_, f64> {
    /// Adapter factors and token in one flat vector, adapter order, `A` then `B`.
    fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for ad in &self.adapters {
            v.extend_from_slice(ad.a.data());
            v.extend_from_slice(ad.b.data());
        }
        v.extend_from_slice(self.token.embedding.data());
        v
    }

    fn with_flat_params(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut at = 0;
        let mut fill = |t: &mut Tensor<f64>| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        };
        for ad in &mut out.adapters {
            fill(&mut ad.a);
            fill(&mut ad.b);
        }
        fill(&mut out.token.embedding);
        out
    }

    /// Worst relative error between tape gradients of the ε-loss and central
    /// differences with step `h`, over every adapter factor and the token.
    #[allow(clippy::too_many_arguments)]
    pub fn gradient_check(
        &self,
        schedule: &Schedule,
        x0: &Tensor<f64>,
        prompt: &Prompt,
        t: usize,
        eps: &Tensor<f64>,
        h: f64,
    ) -> Result<f64> {
        let tape = Tape::new();
        let (params, leaves) = self.param_vars(&tape)?;
        let loss = epsilon_loss_vars(&tape, self.base, &params, schedule, x0, prompt, t, eps)?;
        let grads = tape.backward(&loss)?;
        let mut analytic = Vec::new();
        let mut push = |v: &Var<f64>| -> Result<()> {
            let g = grads
                .get(v)
                .ok_or_else(|| Error::Contract("missing gradient for a trainable leaf".into()))?;
            analytic.extend_from_slice(g.data());
            Ok(())
        };
        for (a, b) in leaves.a.iter().zip(&leaves.b) {
            push(a)?;
            push(b)?;
        }
        push(&leaves.token)?;
        let flat = self.flat_params();
        let n = flat.len();
        finite_diff_check(
            |p| self.with_flat_params(p.data()).loss(schedule, x0, prompt, t, eps),
            &Tensor::new(&[n], analytic)?,
            &Tensor::new(&[n], flat)?,
            h,
        )
    }
}

/// One entry of the fixed noise bank.
#[derive(Debug, Clone)]
struct BankEntry<T> {
    reference: usize,
    t: usize,
    eps: Tensor<T>,
}

/// Result of [`train_coarse`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub adapters: Vec<LoraAdapter<T>>,
    pub token: SubjectToken<T>,
    /// Loss evaluated before each update.
    pub losses: Vec<f64>,
}

/// Fit adapters and the subject token on single-frame reference latents
/// (`[1, H·p, W·p, c]` each). A bank of `batch` (reference, timestep, noise)
/// triples is drawn once from the seed and the full bank is evaluated every
/// step, so the loss curve tracks optimization rather than sampling noise.
pub fn train_coarse<T: Scalar>(
    model: &Mmdit<T>,
    schedule: &Schedule,
    references: &[Tensor<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if references.is_empty() {
        return Err(Error::Input("no reference images".into()));
    }
    let mcfg = model.config();
    let shape = mcfg.latent_shape(1);
    if let Some(bad) = references.iter().find(|r| r.shape() != shape) {
        return Err(Error::Input(format!(
            "reference latent {:?}, expected {shape:?}",
            bad.shape()
        )));
    }
    let prompt = Prompt::encode(&cfg.prompt, mcfg.text_len, mcfg.vocab);
    if prompt.subject_position().is_none() {
        return Err(Error::Config(format!(
            "training prompt {:?} lacks the subject placeholder",
            cfg.prompt
        )));
    }
    let root = SeededRng::new(cfg.seed);
    let rank = cfg.effective_rank(mcfg.dim);
    let adapters = default_adapters(model, rank, cfg.lora_scale, &mut root.fork("adapters"))?;
    let token = SubjectToken::from_table(&model.weights().text_table)?;
    let mut adapted = attach(model, adapters, token)?;

    let mut bank_rng = root.fork("bank");
    let bank = (0..cfg.batch)
        .map(|i| {
            Ok(BankEntry {
                reference: i % references.len(),
                t: bank_rng.int_inclusive(1, schedule.steps()),
                eps: Tensor::randn(&shape, 1.0, &mut bank_rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let adamw = cfg.adamw();
    let mut a_state = adapted
        .adapters
        .iter()
        .map(|ad| Ok((AdamState::new(ad.a.shape())?, AdamState::new(ad.b.shape())?)))
        .collect::<Result<Vec<_>>>()?;
    let mut token_state = AdamState::new(adapted.token.embedding.shape())?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let inv_batch = T::of(1.0 / bank.len() as f64);

    for step in 0..cfg.steps {
        let tape = Tape::new();
        let (params, leaves) = adapted.param_vars(&tape)?;
        let mut total: Option<Var<T>> = None;
        for e in &bank {
            let l = epsilon_loss_vars(&tape, model, &params, schedule, &references[e.reference], &prompt, e.t, &e.eps)?;
            total = Some(match total {
                Some(acc) => tape.add(&acc, &l)?,
                None => l,
            });
        }
        let loss = tape.scale(&total.expect("bank is nonempty"), inv_batch);
        let value = loss.value().item()?.to_f64();
        if !value.is_finite() {
            return Err(Error::non_finite(format!("training loss at step {step}")));
        }
        losses.push(value);
        let grads = tape.backward(&loss)?;
        let grad_of = |v: &Var<T>| {
            grads
                .get(v)
                .cloned()
                .ok_or_else(|| Error::Contract("missing gradient for a trainable leaf".into()))
        };
        for (i, ad) in adapted.adapters.iter_mut().enumerate() {
            let (ga, gb) = (grad_of(&leaves.a[i])?, grad_of(&leaves.b[i])?);
            if !ga.all_finite() || !gb.all_finite() {
                return Err(Error::non_finite(format!("adapter gradient at step {step}")));
            }
            adamw_step(&mut ad.a, &ga, &mut a_state[i].0, cfg.adapter_lr, &adamw)?;
            adamw_step(&mut ad.b, &gb, &mut a_state[i].1, cfg.adapter_lr, &adamw)?;
        }
        let gt = grad_of(&leaves.token)?;
        if !gt.all_finite() {
            return Err(Error::non_finite(format!("token gradient at step {step}")));
        }
        adamw_step(&mut adapted.token.embedding, &gt, &mut token_state, cfg.token_lr, &adamw)?;
        log::debug!("adapt step {step}: loss {value:.6}");
    }
    let (adapters, token) = adapted.into_parts();
    Ok(TrainOutcome {
        adapters,
        token,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::mmdit::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            grid_h: 2,
            grid_w: 2,
            dim: 32,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn duplicate_and_out_of_range_adapters_are_rejected() {
        let m = Mmdit::<f32>::init(tiny(), 1).unwrap();
        let mut rng = SeededRng::new(2);
        let tok = SubjectToken::from_table(&m.weights().text_table).unwrap();
        let a1 = LoraAdapter::new(0, Projection::Key, 32, 4, 1.0, &mut rng).unwrap();
        let dup = vec![a1.clone(), a1.clone()];
        assert!(matches!(attach(&m, dup, tok.clone()), Err(Error::Config(_))));
        let far = vec![LoraAdapter::new(5, Projection::Key, 32, 4, 1.0, &mut rng).unwrap()];
        assert!(matches!(attach(&m, far, tok), Err(Error::Wiring(_))));
    }

    #[test]
    fn zero_adapters_reproduce_base_outputs() {
        let m = Mmdit::<f32>::init(tiny(), 3).unwrap();
        let s = Schedule::new(&ScheduleConfig::default()).unwrap();
        let mut rng = SeededRng::new(4);
        let ads = default_adapters(&m, 4, 1.0, &mut rng).unwrap();
        let tok = SubjectToken::from_table(&m.weights().text_table).unwrap();
        let adapted = attach(&m, ads, tok).unwrap();
        let x0 = Tensor::randn(&tiny().latent_shape(1), 1.0, &mut rng).unwrap();
        let e = Tensor::randn(&tiny().latent_shape(1), 1.0, &mut rng).unwrap();
        let p = Prompt::encode("a photo of <sks>", 8, 64);
        let base = crate::diffusion::epsilon_loss(&m, &s, &x0, &p, 20, &e).unwrap();
        assert_eq!(adapted.loss(&s, &x0, &p, 20, &e).unwrap(), base);
        let merged = adapted.merged().unwrap();
        assert_eq!(merged.weights(), m.weights());
    }

    #[test]
    fn effective_weights_match_apply_lora() {
        let m = Mmdit::<f64>::init(tiny(), 5).unwrap();
        let mut rng = SeededRng::new(6);
        let mut ads = default_adapters(&m, 4, 0.5, &mut rng).unwrap();
        for ad in &mut ads {
            ad.b = Tensor::randn(ad.b.shape(), 0.1, &mut rng).unwrap();
        }
        let tok = SubjectToken::from_table(&m.weights().text_table).unwrap();
        let adapted = attach(&m, ads.clone(), tok).unwrap();
        let merged = adapted.merged().unwrap();
        for ad in &ads {
            let base = ad.target().weight(&m.weights().layers[ad.layer()]);
            let want = apply_lora(base, ad).unwrap();
            assert_eq!(adapted.effective_weight(ad.layer(), ad.target()).unwrap(), want);
            assert_eq!(ad.target().weight(&merged.weights().layers[ad.layer()]), &want);
            assert_eq!(merged.weights().layers[ad.layer()].wq, m.weights().layers[ad.layer()].wq);
        }
    }

    #[test]
    fn empty_references_are_an_input_error() {
        let m = Mmdit::<f32>::init(tiny(), 1).unwrap();
        let s = Schedule::new(&ScheduleConfig::default()).unwrap();
        assert!(matches!(
            train_coarse(&m, &s, &[], &TrainConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let m = Mmdit::<f32>::init(tiny(), 1).unwrap();
        let s = Schedule::new(&ScheduleConfig::default()).unwrap();
        let mut rng = SeededRng::new(2);
        let refs = vec![Tensor::randn(&tiny().latent_shape(1), 0.5, &mut rng).unwrap()];
        let cfg = TrainConfig {
            adapter_lr: 0.0,
            token_lr: 0.0,
            steps: 3,
            batch: 2,
            ..TrainConfig::default()
        };
        let out = train_coarse(&m, &s, &refs, &cfg).unwrap();
        let init = default_adapters(&m, cfg.effective_rank(32), 1.0, &mut SeededRng::new(0).fork("adapters")).unwrap();
        assert_eq!(out.adapters, init);
        assert_eq!(out.token.embedding, m.weights().text_table.gather_rows(&[1]).unwrap());
        assert!(out.losses.windows(2).all(|w| w[0] == w[1]));
    }
}
