use crate::correspondence::{FlowDirection, FlowField};
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::mmdit::attend;
use crate::numerics::{Scalar, Tensor};

fn injection_shape(what: &str, got: &[usize], want: &[usize]) -> Error {
    Error::Injection(format!("{what} has shape {got:?}, expected {want:?}"))
}

/// Hard gather `V_warp[p] = V_ref[match(p)]` over video rows. The flow must
/// map each generation token to its reference match.
pub fn warp_values<T: Scalar>(v_ref: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>> {
    if flow.direction != FlowDirection::GenToRef {
        return Err(Error::Contract(format!(
            "warping gathers along generation-to-reference matches, got a {} flow",
            flow.direction
        )));
    }
    let (n, _) = v_ref.dims2()?;
    if n != flow.len() {
        return Err(injection_shape("reference values", v_ref.shape(), &[flow.len(), v_ref.shape()[1]]));
    }
    let idx: Vec<usize> = (0..n).map(|p| flow.matched_global(p)).collect();
    v_ref.gather_rows(&idx)
}

/// `M ⊙ V_warp + (1 − M) ⊙ V_gen`, row by row.
pub fn blend_values<T: Scalar>(v_warp: &Tensor<T>, v_gen: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let (n, d) = v_gen.dims2()?;
    if v_warp.shape() != v_gen.shape() || n != mask.len() {
        return Err(injection_shape("warped values", v_warp.shape(), &[mask.len(), d]));
    }
    let mut out = v_gen.clone();
    for p in (0..n).filter(|&p| mask.get(p)) {
        out.data_mut()[p * d..(p + 1) * d].copy_from_slice(v_warp.row(p));
    }
    Ok(out)
}

/// Attention with the video values replaced by `v_hat`; queries, keys and text
/// values are untouched. Returns the output and per-head probabilities.
pub fn injected_mma<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    v_hat: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (s, d) = v.dims2()?;
    let n = v_hat.shape()[0];
    if v_hat.rank() != 2 || v_hat.shape()[1] != d || n > s {
        return Err(injection_shape("video values", v_hat.shape(), &[n, d]));
    }
    let v_used = Tensor::concat_rows(&[v_hat, &v.slice_rows(n, s)?])?;
    attend(q, k, &v_used, heads, None)
}

/// Generation-branch attention inputs of one layer: post-rotary `q`, `k` and
/// values over the full `[video; text]` sequence.
#[derive(Debug, Clone, Copy)]
pub struct BranchQkv<'a, T> {
    pub q: &'a Tensor<T>,
    pub k: &'a Tensor<T>,
    pub v: &'a Tensor<T>,
    pub n_video: usize,
}

/// Key/value replacement. Masked generation queries attend to reference video
/// keys inside `m_ref` plus the generation text keys; the rest attend to
/// generation video keys outside `m_gen` plus the text keys. Returns the video
/// rows of the blended output.
pub fn kv_replacement_attention<T: Scalar>(
    gen: BranchQkv<'_, T>,
    k_ref: &Tensor<T>,
    v_ref: &Tensor<T>,
    m_ref: &Mask,
    m_gen: &Mask,
    heads: usize,
) -> Result<Tensor<T>> {
    let n = gen.n_video;
    let (s, d) = gen.k.dims2()?;
    if k_ref.shape() != [n, d] || v_ref.shape() != [n, d] {
        return Err(injection_shape("reference keys", k_ref.shape(), &[n, d]));
    }
    if m_ref.len() != n || m_gen.len() != n {
        return Err(Error::Injection(format!(
            "masks cover {} and {} tokens, expected {n}",
            m_ref.len(),
            m_gen.len()
        )));
    }
    let q_vid = gen.q.slice_rows(0, n)?;
    let k_text = gen.k.slice_rows(n, s)?;
    let v_text = gen.v.slice_rows(n, s)?;
    let k_r = Tensor::concat_rows(&[k_ref, &k_text])?;
    let v_r = Tensor::concat_rows(&[v_ref, &v_text])?;
    let mut keep_ref: Vec<bool> = m_ref.values().to_vec();
    keep_ref.resize(s, true);
    let (f_ref, _) = attend(&q_vid, &k_r, &v_r, heads, Some(&keep_ref))?;
    let mut keep_gen: Vec<bool> = m_gen.values().iter().map(|&m| !m).collect();
    keep_gen.resize(s, true);
    let (f_gen, _) = attend(&q_vid, gen.k, gen.v, heads, Some(&keep_gen))?;
    blend_values(&f_ref, &f_gen, m_gen)
}

/// One joint pass over `[X_gen; X_ref; C_T]` keys with reference keys at their
/// own rotary positions. `ref_mask[i] == false` hides reference token `i`.
/// Returns outputs for the generation rows and per-head probabilities.
pub fn token_concat_attention<T: Scalar>(
    gen: BranchQkv<'_, T>,
    k_ref: &Tensor<T>,
    v_ref: &Tensor<T>,
    ref_mask: Option<&[bool]>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let n = gen.n_video;
    let (s, d) = gen.k.dims2()?;
    let m = k_ref.shape()[0];
    if k_ref.rank() != 2 || k_ref.shape()[1] != d || v_ref.shape() != k_ref.shape() {
        return Err(injection_shape("reference keys", k_ref.shape(), &[m, d]));
    }
    let k_all = Tensor::concat_rows(&[&gen.k.slice_rows(0, n)?, k_ref, &gen.k.slice_rows(n, s)?])?;
    let v_all = Tensor::concat_rows(&[&gen.v.slice_rows(0, n)?, v_ref, &gen.v.slice_rows(n, s)?])?;
    let mask = match ref_mask {
        Some(rm) if rm.len() != m => {
            return Err(Error::Injection(format!("reference mask of {} for {m} tokens", rm.len())));
        }
        Some(rm) => {
            let mut full = vec![true; n];
            full.extend_from_slice(rm);
            full.resize(s + m, true);
            Some(full)
        }
        None => None,
    };
    attend(gen.q, &k_all, &v_all, heads, mask.as_deref())
}
