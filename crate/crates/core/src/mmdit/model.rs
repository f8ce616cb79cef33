use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{PairRotation, Scalar, Tape, Tensor, Var};

use super::config::ModelConfig;
use super::rope::RopeFrequencies;
use super::tokens::{patchify, unpatchify, Lattice, Prompt, SUBJECT_ID};
use super::trace::{LayerTrace, Trace, TraceSpec};
use super::weights::Weights;

const LN_EPS: f64 = 1e-6;

/// Per-layer attention tensors offered to an [`AttentionHook`]. Rows follow the
/// `[video; text]` sequence order.
#[derive(Debug)]
pub struct AttentionIo<'a, T> {
    pub layer: usize,
    pub heads: usize,
    pub n_video: usize,
    pub q_pre: &'a Tensor<T>,
    pub k_pre: &'a Tensor<T>,
    pub v: &'a Tensor<T>,
    /// Post-rotary queries and keys.
    pub q: &'a Tensor<T>,
    pub k: &'a Tensor<T>,
}

/// How a hook modifies one layer's attention.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionEdit<T> {
    Keep,
    /// Replacement values for the video rows; text values stay.
    VideoValues(Tensor<T>),
    /// Extra (already rotated) keys and values inserted between the video and
    /// text keys. `mask[i] == false` hides extra key `i` from every query.
    ExtraKeys {
        keys: Tensor<T>,
        values: Tensor<T>,
        mask: Option<Vec<bool>>,
    },
    /// Replacement attention output (before the output projection) for the
    /// video rows.
    VideoOutput(Tensor<T>),
}

pub trait AttentionHook<T> {
    fn attention(&mut self, io: &AttentionIo<'_, T>) -> Result<AttentionEdit<T>>;
}

/// Hook that never edits.
pub struct NoHook;

impl<T> AttentionHook<T> for NoHook {
    fn attention(&mut self, _io: &AttentionIo<'_, T>) -> Result<AttentionEdit<T>> {
        Ok(AttentionEdit::Keep)
    }
}

/// Layer projections as tape values.
#[derive(Debug, Clone)]
pub struct LayerVars<T> {
    pub wq: Var<T>,
    pub wk: Var<T>,
    pub wv: Var<T>,
    pub wo: Var<T>,
    pub w1: Var<T>,
    pub w2: Var<T>,
}

/// Model parameters as tape values, so adapters can substitute trainable
/// expressions for individual projections.
#[derive(Debug, Clone)]
pub struct ParamVars<T> {
    pub patch_embed: Var<T>,
    pub time_embed: Var<T>,
    pub video_bias: Var<T>,
    pub text_table: Var<T>,
    pub layers: Vec<LayerVars<T>>,
    pub head_out: Var<T>,
    /// `[1, d]` embedding used wherever the subject id appears.
    pub subject: Option<Var<T>>,
}

/// Noisy latent, timestep and prompt for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a, T> {
    pub latent: &'a Tensor<T>,
    pub t: usize,
    pub prompt: &'a Prompt,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Predicted noise, latent-shaped.
    pub eps: Tensor<T>,
    pub trace: Trace<T>,
}

/// The toy multi-modal diffusion transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mmdit<T> {
    cfg: ModelConfig,
    weights: Weights<T>,
    subject: Option<Tensor<T>>,
    rope: RopeFrequencies,
}

impl<T: Scalar> Mmdit<T> {
    pub fn new(cfg: ModelConfig, weights: Weights<T>) -> Result<Self> {
        cfg.validate()?;
        let fresh = Weights::<T>::shapes(&cfg);
        let named = weights.named();
        if named.len() != fresh.len() {
            return Err(Error::shape(format!(
                "weights hold {} tensors, config expects {}",
                named.len(),
                fresh.len()
            )));
        }
        for ((name, t), (_, shape)) in named.iter().zip(&fresh) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        let rope = RopeFrequencies::new(&cfg)?;
        Ok(Mmdit {
            cfg,
            weights,
            subject: None,
            rope,
        })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let w = Weights::init(&cfg, seed)?;
        Self::new(cfg, w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.weights
    }

    pub fn subject_embedding(&self) -> Option<&Tensor<T>> {
        self.subject.as_ref()
    }

    pub fn set_subject_embedding(&mut self, e: Option<Tensor<T>>) -> Result<()> {
        if let Some(e) = &e {
            if e.shape() != [1, self.cfg.dim] {
                return Err(Error::shape(format!(
                    "subject embedding {:?} must be [1, {}]",
                    e.shape(),
                    self.cfg.dim
                )));
            }
        }
        self.subject = e;
        Ok(())
    }

    /// Copy with another weight set (same shapes), keeping the subject embedding.
    pub fn with_weights(&self, weights: Weights<T>) -> Result<Self> {
        let mut m = Self::new(self.cfg.clone(), weights)?;
        m.subject = self.subject.clone();
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> Mmdit<U> {
        Mmdit {
            cfg: self.cfg.clone(),
            weights: self.weights.cast(),
            subject: self.subject.as_ref().map(Tensor::cast),
            rope: self.rope.clone(),
        }
    }

    /// All parameters as constants on `tape`.
    pub fn param_vars(&self, tape: &Tape<T>) -> ParamVars<T> {
        let w = &self.weights;
        let c = |t: &Tensor<T>| tape.constant(t.clone());
        ParamVars {
            patch_embed: c(&w.patch_embed),
            time_embed: c(&w.time_embed),
            video_bias: c(&w.video_bias),
            text_table: c(&w.text_table),
            layers: w
                .layers
                .iter()
                .map(|l| LayerVars {
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    w1: c(&l.w1),
                    w2: c(&l.w2),
                })
                .collect(),
            head_out: c(&w.head_out),
            subject: self.subject.as_ref().map(c),
        }
    }

    /// Inference forward pass.
    pub fn forward(
        &self,
        input: ModelInput<'_, T>,
        hook: Option<&mut dyn AttentionHook<T>>,
        trace: &TraceSpec,
    ) -> Result<ForwardOutput<T>> {
        let tape = Tape::new();
        let params = self.param_vars(&tape);
        let (tokens, trace, lattice) = self.forward_vars(&tape, &params, input, hook, trace)?;
        let eps = unpatchify(tokens.value(), lattice, self.cfg.patch, self.cfg.latent_channels)?;
        Ok(ForwardOutput { eps, trace })
    }

    /// Noise prediction without hooks or traces.
    pub fn predict(&self, input: ModelInput<'_, T>) -> Result<Tensor<T>> {
        Ok(self.forward(input, None, &TraceSpec::none())?.eps)
    }

    /// Forward pass on `tape`. Returns the noise prediction in token layout
    /// `[N, c·p²]`, the captured trace and the token lattice.
    pub fn forward_vars(
        &self,
        tape: &Tape<T>,
        params: &ParamVars<T>,
        input: ModelInput<'_, T>,
        mut hook: Option<&mut dyn AttentionHook<T>>,
        spec: &TraceSpec,
    ) -> Result<(Var<T>, Trace<T>, Lattice)> {
        let cfg = &self.cfg;
        let [_, hp, wp, c] = super::tokens::latent_dims(input.latent)?;
        if hp != cfg.grid_h * cfg.patch || wp != cfg.grid_w * cfg.patch || c != cfg.latent_channels {
            return Err(Error::shape(format!(
                "latent {:?} does not match config grid {}x{} patch {} channels {}",
                input.latent.shape(),
                cfg.grid_h,
                cfg.grid_w,
                cfg.patch,
                cfg.latent_channels
            )));
        }
        if input.prompt.ids.len() != cfg.text_len || input.prompt.ids.iter().any(|&i| i >= cfg.vocab) {
            return Err(Error::Input(format!(
                "prompt must hold {} ids below {}",
                cfg.text_len, cfg.vocab
            )));
        }
        let (tokens, lattice) = patchify(input.latent, cfg.patch)?;
        let n = lattice.len();
        let rot: Arc<PairRotation<T>> = self.rope.rotation(&lattice)?;

        let video = self.embed_video(tape, params, tokens, input.t, n)?;
        let text = self.embed_text(tape, params, input.prompt)?;
        let mut x = tape.concat_rows(&[&video, &text])?;

        let mut trace = Trace::default();
        for (l, lw) in params.layers.iter().enumerate() {
            let xn = tape.layer_norm_rows(&x, T::of(LN_EPS))?;
            let q_pre = tape.matmul(&xn, &lw.wq)?;
            let k_pre = tape.matmul(&xn, &lw.wk)?;
            let v = tape.matmul(&xn, &lw.wv)?;
            let q = tape.rotate(&q_pre, &rot)?;
            let k = tape.rotate(&k_pre, &rot)?;
            let edit = match hook.as_deref_mut() {
                Some(h) => h.attention(&AttentionIo {
                    layer: l,
                    heads: cfg.heads,
                    n_video: n,
                    q_pre: q_pre.value(),
                    k_pre: k_pre.value(),
                    v: v.value(),
                    q: q.value(),
                    k: k.value(),
                })?,
                None => AttentionEdit::Keep,
            };
            let (att, probs, k_used, v_used) = self.apply_edit(tape, edit, l, n, &q, &k, &v)?;
            let proj = tape.matmul(&att, &lw.wo)?;
            x = tape.add(&x, &proj)?;
            let hn = tape.layer_norm_rows(&x, T::of(LN_EPS))?;
            let hidden = tape.silu(&tape.matmul(&hn, &lw.w1)?);
            let mlp = tape.matmul(&hidden, &lw.w2)?;
            x = tape.add(&x, &mlp)?;
            x.value().ensure_finite(&format!("layer {l} output"))?;
            if spec.layers.contains(&l) {
                trace.layers.insert(
                    l,
                    LayerTrace {
                        q_pre: q_pre.value().clone(),
                        k_pre: k_pre.value().clone(),
                        v: v.value().clone(),
                        q: q.value().clone(),
                        k: k_used,
                        probs: spec.probs.then_some(probs),
                        v_used,
                        out: att.value().clone(),
                        hidden: x.value().clone(),
                        n_video: n,
                    },
                );
            }
        }
        let xv = tape.slice_rows(&x, 0, n)?;
        let xn = tape.layer_norm_rows(&xv, T::of(LN_EPS))?;
        let out = tape.matmul(&xn, &params.head_out)?;
        out.value().ensure_finite("model output")?;
        Ok((out, trace, lattice))
    }

    fn embed_video(
        &self,
        tape: &Tape<T>,
        params: &ParamVars<T>,
        tokens: Tensor<T>,
        t: usize,
        n: usize,
    ) -> Result<Var<T>> {
        let x = tape.matmul(&tape.constant(tokens), &params.patch_embed)?;
        let temb = tape.constant(timestep_embedding(t, self.cfg.dim)?);
        let cond = tape.add(&params.video_bias, &tape.matmul(&temb, &params.time_embed)?)?;
        let ones = tape.constant(Tensor::ones(&[n, 1])?);
        let bias = tape.matmul(&ones, &cond)?;
        tape.add(&x, &bias)
    }

    fn embed_text(&self, tape: &Tape<T>, params: &ParamVars<T>, prompt: &Prompt) -> Result<Var<T>> {
        let table = params.text_table.value();
        let mut parts: Vec<Var<T>> = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        for &id in &prompt.ids {
            match (&params.subject, id == SUBJECT_ID) {
                (Some(s), true) => {
                    if !run.is_empty() {
                        parts.push(tape.constant(table.gather_rows(&run)?));
                        run.clear();
                    }
                    parts.push(s.clone());
                }
                _ => run.push(id),
            }
        }
        if !run.is_empty() {
            parts.push(tape.constant(table.gather_rows(&run)?));
        }
        let refs: Vec<&Var<T>> = parts.iter().collect();
        tape.concat_rows(&refs)
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn apply_edit(
        &self,
        tape: &Tape<T>,
        edit: AttentionEdit<T>,
        layer: usize,
        n: usize,
        q: &Var<T>,
        k: &Var<T>,
        v: &Var<T>,
    ) -> Result<(Var<T>, Vec<Tensor<T>>, Tensor<T>, Tensor<T>)> {
        let heads = self.cfg.heads;
        let s = q.value().shape()[0];
        let d = self.cfg.dim;
        let check = |t: &Tensor<T>, rows: Option<usize>, what: &str| -> Result<()> {
            let (r, c) = t.dims2().map_err(|e| Error::Injection(e.to_string()))?;
            if c != d || rows.is_some_and(|want| want != r) {
                return Err(Error::Injection(format!(
                    "layer {layer}: {what} has shape {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Injection(format!("layer {layer}: {what} is not finite")));
            }
            Ok(())
        };
        match edit {
            AttentionEdit::Keep => {
                let (att, probs) = attend_vars(tape, q, k, v, heads, None)?;
                Ok((att, probs, k.value().clone(), v.value().clone()))
            }
            AttentionEdit::VideoValues(vv) => {
                check(&vv, Some(n), "video values")?;
                let text_v = tape.slice_rows(v, n, s)?;
                let v_used = tape.concat_rows(&[&tape.constant(vv), &text_v])?;
                let (att, probs) = attend_vars(tape, q, k, &v_used, heads, None)?;
                Ok((att, probs, k.value().clone(), v_used.value().clone()))
            }
            AttentionEdit::ExtraKeys { keys, values, mask } => {
                check(&keys, None, "extra keys")?;
                let m = keys.shape()[0];
                check(&values, Some(m), "extra values")?;
                if mask.as_ref().is_some_and(|mk| mk.len() != m) {
                    return Err(Error::Injection(format!(
                        "layer {layer}: extra-key mask length differs from {m} keys"
                    )));
                }
                let splice = |base: &Var<T>, extra: Tensor<T>| -> Result<Var<T>> {
                    let head = tape.slice_rows(base, 0, n)?;
                    let tail = tape.slice_rows(base, n, s)?;
                    tape.concat_rows(&[&head, &tape.constant(extra), &tail])
                };
                let k_all = splice(k, keys)?;
                let v_all = splice(v, values)?;
                let key_mask = mask.map(|mk| {
                    let mut full = vec![true; n];
                    full.extend(mk);
                    full.resize(s + m, true);
                    full
                });
                let (att, probs) = attend_vars(tape, q, &k_all, &v_all, heads, key_mask.as_deref())?;
                Ok((att, probs, k_all.value().clone(), v_all.value().clone()))
            }
            AttentionEdit::VideoOutput(o) => {
                check(&o, Some(n), "video attention output")?;
                let (att, probs) = attend_vars(tape, q, k, v, heads, None)?;
                let text = tape.slice_rows(&att, n, s)?;
                let att = tape.concat_rows(&[&tape.constant(o), &text])?;
                Ok((att, probs, k.value().clone(), v.value().clone()))
            }
        }
    }
}

/// Sinusoidal timestep features `[sin(t·ω_i) …, cos(t·ω_i) …]`, `[1, d]`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Result<Tensor<T>> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let w = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * w;
        out[i] = T::of(a.sin());
        out[half + i] = T::of(a.cos());
    }
    Tensor::new(&[1, dim], out)
}

/// Multi-head attention `softmax(QKᵀ/√d_h)V` on the tape. Keys with
/// `key_mask[j] == false` get `−∞` logits. Returns the merged output and the
/// per-head probabilities.
pub fn attend_vars<T: Scalar>(
    tape: &Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(Var<T>, Vec<Tensor<T>>)> {
    let (rows, d) = q.value().dims2()?;
    let (keys, dk) = k.value().dims2()?;
    let (vrows, dv) = v.value().dims2()?;
    if dk != d || vrows != keys || dv != d || heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!(
            "attention q {:?}, k {:?}, v {:?} with {heads} heads",
            q.value().shape(),
            k.value().shape(),
            v.value().shape()
        )));
    }
    let bias = match key_mask {
        Some(m) if m.len() != keys => {
            return Err(Error::shape(format!("key mask of {} for {keys} keys", m.len())));
        }
        Some(m) if m.iter().all(|&b| b) => None,
        Some(m) => {
            let row: Vec<T> = m
                .iter()
                .map(|&keep| if keep { T::zero() } else { T::neg_infinity() })
                .collect();
            let mut data = Vec::with_capacity(rows * keys);
            for _ in 0..rows {
                data.extend_from_slice(&row);
            }
            Some(tape.constant(Tensor::new(&[rows, keys], data)?))
        }
        None => None,
    };
    let hd = d / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, (h + 1) * hd)?;
        let kh = tape.slice_cols(k, h * hd, (h + 1) * hd)?;
        let vh = tape.slice_cols(v, h * hd, (h + 1) * hd)?;
        let mut logits = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale);
        if let Some(b) = &bias {
            logits = tape.add(&logits, b)?;
        }
        let p = tape.softmax_rows(&logits)?;
        outs.push(tape.matmul(&p, &vh)?);
        probs.push(p.value().clone());
    }
    let refs: Vec<&Var<T>> = outs.iter().collect();
    Ok((tape.concat_cols(&refs)?, probs))
}

/// Plain-tensor [`attend_vars`], arithmetic-identical to the model's own
/// attention.
pub fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let (out, probs) = attend_vars(
        &tape,
        &tape.constant(q.clone()),
        &tape.constant(k.clone()),
        &tape.constant(v.clone()),
        heads,
        key_mask,
    )?;
    Ok((out.value().clone(), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmdit::config::InitMode;
    use crate::numerics::SeededRng;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            frames: 2,
            grid_h: 4,
            grid_w: 4,
            ..ModelConfig::default()
        }
    }

    fn inputs(cfg: &ModelConfig, seed: u64) -> (Tensor<f32>, Prompt) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::randn(&cfg.latent_shape(cfg.frames), 1.0, &mut rng).unwrap();
        (x, Prompt::encode("a photo of <sks> dog", cfg.text_len, cfg.vocab))
    }

    #[test]
    fn single_token_attention_returns_its_value() {
        let q = Tensor::<f64>::from_f64(&[1, 2], &[0.3, -1.0]).unwrap();
        let v = Tensor::<f64>::from_f64(&[1, 2], &[4.0, 5.0]).unwrap();
        let (o, p) = attend(&q, &q, &v, 1, None).unwrap();
        assert_eq!(o, v);
        assert_eq!(p[0].data(), &[1.0]);
    }

    #[test]
    fn masked_keys_get_zero_probability() {
        let mut rng = SeededRng::new(9);
        let q = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng).unwrap();
        let k = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng).unwrap();
        let v = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng).unwrap();
        let mask = [true, false, true, false, true];
        let (o, p) = attend(&q, &k, &v, 2, Some(&mask)).unwrap();
        let keep = [0, 2, 4];
        let (o2, _) = attend(
            &q,
            &k.gather_rows(&keep).unwrap(),
            &v.gather_rows(&keep).unwrap(),
            2,
            None,
        )
        .unwrap();
        assert!(o.max_abs_diff(&o2).unwrap() < 1e-12);
        for h in &p {
            for r in 0..3 {
                assert_eq!(h.row(r)[1], 0.0);
                assert_eq!(h.row(r)[3], 0.0);
            }
        }
    }

    #[test]
    fn hooks_and_traces_do_not_change_output() {
        let cfg = small();
        let m = Mmdit::<f32>::init(cfg.clone(), 3).unwrap();
        let (x, p) = inputs(&cfg, 4);
        let input = ModelInput { latent: &x, t: 17, prompt: &p };
        let a = m.forward(input, None, &TraceSpec::none()).unwrap();
        let b = m
            .forward(input, Some(&mut NoHook), &TraceSpec::all(cfg.layers, true))
            .unwrap();
        assert_eq!(a.eps, b.eps);
        assert_eq!(b.trace.layers.len(), cfg.layers);
        assert_eq!(a.eps.shape(), x.shape());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = small();
        let m = Mmdit::<f32>::init(cfg.clone(), 5).unwrap();
        let (x, p) = inputs(&cfg, 6);
        let out = m
            .forward(ModelInput { latent: &x, t: 3, prompt: &p }, None, &TraceSpec::all(cfg.layers, true))
            .unwrap();
        for lt in out.trace.layers.values() {
            let probs = lt.probs.as_ref().unwrap();
            assert_eq!(probs.len(), cfg.heads);
            for h in probs {
                let (r, c) = h.dims2().unwrap();
                assert_eq!((r, c), (32 + cfg.text_len, 32 + cfg.text_len));
                for i in 0..r {
                    let s: f64 = h.row(i).iter().map(|&v| v as f64).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
            assert_eq!(lt.q.shape(), lt.q_pre.shape());
        }
    }

    struct ReplaceWithSame;
    impl AttentionHook<f32> for ReplaceWithSame {
        fn attention(&mut self, io: &AttentionIo<'_, f32>) -> Result<AttentionEdit<f32>> {
            Ok(AttentionEdit::VideoValues(io.v.slice_rows(0, io.n_video)?))
        }
    }

    #[test]
    fn identity_value_override_is_bit_exact() {
        let cfg = small();
        let m = Mmdit::<f32>::init(cfg.clone(), 7).unwrap();
        let (x, p) = inputs(&cfg, 8);
        let input = ModelInput { latent: &x, t: 30, prompt: &p };
        let a = m.predict(input).unwrap();
        let b = m.forward(input, Some(&mut ReplaceWithSame), &TraceSpec::none()).unwrap();
        assert_eq!(a, b.eps);
    }

    struct Bad;
    impl AttentionHook<f32> for Bad {
        fn attention(&mut self, io: &AttentionIo<'_, f32>) -> Result<AttentionEdit<f32>> {
            Ok(AttentionEdit::VideoValues(io.v.slice_rows(0, io.n_video - 1)?))
        }
    }

    #[test]
    fn override_shape_mismatch_is_an_injection_error() {
        let cfg = small();
        let m = Mmdit::<f32>::init(cfg.clone(), 7).unwrap();
        let (x, p) = inputs(&cfg, 8);
        let r = m.forward(ModelInput { latent: &x, t: 1, prompt: &p }, Some(&mut Bad), &TraceSpec::none());
        assert!(matches!(r, Err(Error::Injection(_))));
    }

    struct HiddenExtra;
    impl AttentionHook<f32> for HiddenExtra {
        fn attention(&mut self, io: &AttentionIo<'_, f32>) -> Result<AttentionEdit<f32>> {
            let n = io.n_video;
            Ok(AttentionEdit::ExtraKeys {
                keys: io.k.slice_rows(0, n)?.scale(3.0),
                values: io.v.slice_rows(0, n)?.scale(-2.0),
                mask: Some(vec![false; n]),
            })
        }
    }

    #[test]
    fn fully_masked_extra_keys_match_baseline() {
        let cfg = small();
        let m = Mmdit::<f32>::init(cfg.clone(), 11).unwrap();
        let (x, p) = inputs(&cfg, 12);
        let input = ModelInput { latent: &x, t: 9, prompt: &p };
        let a = m.predict(input).unwrap();
        let b = m
            .forward(input, Some(&mut HiddenExtra), &TraceSpec::layers([0], false))
            .unwrap();
        assert!(a.max_abs_diff(&b.eps).unwrap() < 1e-6);
        let k = &b.trace.layer(0).unwrap().k;
        assert_eq!(k.shape()[0], 2 * 32 + cfg.text_len);
    }

    #[test]
    fn subject_embedding_changes_only_subject_prompts() {
        let cfg = small();
        let mut m = Mmdit::<f32>::init(cfg.clone(), 13).unwrap();
        let (x, p) = inputs(&cfg, 14);
        let plain = Prompt::encode("a photo of dog", cfg.text_len, cfg.vocab);
        let before = (m.predict(ModelInput { latent: &x, t: 5, prompt: &p }).unwrap(),
            m.predict(ModelInput { latent: &x, t: 5, prompt: &plain }).unwrap());
        let e = Tensor::full(&[1, cfg.dim], 0.5).unwrap();
        m.set_subject_embedding(Some(e)).unwrap();
        let after = (m.predict(ModelInput { latent: &x, t: 5, prompt: &p }).unwrap(),
            m.predict(ModelInput { latent: &x, t: 5, prompt: &plain }).unwrap());
        assert_ne!(before.0, after.0);
        assert_eq!(before.1, after.1);
        assert!(m.set_subject_embedding(Some(Tensor::zeros(&[1, 3]).unwrap())).is_err());
    }

    #[test]
    fn wrong_latent_shape_is_rejected() {
        let cfg = small();
        let m = Mmdit::<f32>::init(cfg.clone(), 1).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 6, 8, 4]).unwrap();
        let p = Prompt::encode("x", cfg.text_len, cfg.vocab);
        assert!(matches!(
            m.predict(ModelInput { latent: &x, t: 0, prompt: &p }),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn content_identity_ropefree_similarity_is_shift_invariant() {
        let cfg = ModelConfig {
            init: InitMode::ContentIdentity,
            frames: 1,
            ..ModelConfig::default()
        };
        let m = Mmdit::<f64>::init(cfg.clone(), 2).unwrap();
        let mut rng = SeededRng::new(21);
        let x = Tensor::<f64>::randn(&cfg.latent_shape(1), 0.5, &mut rng).unwrap();
        let (dh, dw) = (3usize, 5usize);
        let [_, hp, wp, c] = cfg.latent_shape(1);
        let p = cfg.patch;
        let shifted = Tensor::from_fn(&[1, hp, wp, c], |i| {
            let (y, xx, ch) = (i / (wp * c), (i / c) % wp, i % c);
            let sy = (y + hp - dh * p) % hp;
            let sx = (xx + wp - dw * p) % wp;
            x.data()[(sy * wp + sx) * c + ch]
        })
        .unwrap();
        let prompt = Prompt::encode("a photo of <sks>", cfg.text_len, cfg.vocab);
        let spec = TraceSpec::layers([0], false);
        let a = m.forward(ModelInput { latent: &x, t: 10, prompt: &prompt }, None, &spec).unwrap();
        let b = m.forward(ModelInput { latent: &shifted, t: 10, prompt: &prompt }, None, &spec).unwrap();
        let (qa, ka) = (&a.trace.layer(0).unwrap().q_pre, &a.trace.layer(0).unwrap().k_pre);
        let (qb, kb) = (&b.trace.layer(0).unwrap().q_pre, &b.trace.layer(0).unwrap().k_pre);
        let (h, w) = (cfg.grid_h, cfg.grid_w);
        let moved = |i: usize| ((i / w + dh) % h) * w + (i % w + dw) % w;
        let mut worst: f64 = 0.0;
        for i in 0..h * w {
            for j in 0..h * w {
                let sa: f64 = qa.row(i).iter().zip(ka.row(j)).map(|(u, v)| u * v).sum();
                let sb: f64 = qb.row(moved(i)).iter().zip(kb.row(moved(j))).map(|(u, v)| u * v).sum();
                worst = worst.max((sa - sb).abs());
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }
}
