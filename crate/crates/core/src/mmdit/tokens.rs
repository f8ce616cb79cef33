//! Patchification, token lattice, and the toy prompt tokenizer.

use crate::error::{Error, Result};
use crate::numerics::rng::fnv1a;
use crate::numerics::{Scalar, Tensor};

/// Padding id.
pub const PAD_ID: usize = 0;
/// Reserved id of the learnable subject token.
pub const SUBJECT_ID: usize = 1;
/// Placeholder word that maps to [`SUBJECT_ID`].
pub const SUBJECT_WORD: &str = "<sks>";

/// Lattice position of a video token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenPos {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// Video token layout `F × H × W`, frame-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lattice {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Lattice {
    pub fn new(frames: usize, rows: usize, cols: usize) -> Self {
        Lattice { frames, rows, cols }
    }

    pub fn len(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn per_frame(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, p: TokenPos) -> usize {
        (p.frame * self.rows + p.row) * self.cols + p.col
    }

    pub fn pos(&self, index: usize) -> TokenPos {
        let per = self.per_frame();
        TokenPos {
            frame: index / per,
            row: (index % per) / self.cols,
            col: index % self.cols,
        }
    }

    pub fn positions(&self) -> impl Iterator<Item = TokenPos> + '_ {
        (0..self.len()).map(|i| self.pos(i))
    }
}

/// `[F, H·p, W·p, c]` latent to `[F·H·W, c·p²]` token features.
///
/// Feature order within a token is `(py, px, channel)`.
pub fn patchify<T: Scalar>(latent: &Tensor<T>, patch: usize) -> Result<(Tensor<T>, Lattice)> {
    let [frames, hp, wp, c] = latent_dims(latent)?;
    if patch == 0 || hp % patch != 0 || wp % patch != 0 {
        return Err(Error::shape(format!(
            "latent {hp}x{wp} not divisible by patch {patch}"
        )));
    }
    let lattice = Lattice::new(frames, hp / patch, wp / patch);
    let feat = c * patch * patch;
    let src = latent.data();
    let mut out = Vec::with_capacity(lattice.len() * feat);
    for pos in lattice.positions() {
        for py in 0..patch {
            for px in 0..patch {
                let y = pos.row * patch + py;
                let x = pos.col * patch + px;
                let base = ((pos.frame * hp + y) * wp + x) * c;
                out.extend_from_slice(&src[base..base + c]);
            }
        }
    }
    Ok((Tensor::new(&[lattice.len(), feat], out)?, lattice))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    lattice: Lattice,
    patch: usize,
    channels: usize,
) -> Result<Tensor<T>> {
    let (n, feat) = tokens.dims2()?;
    if n != lattice.len() || feat != channels * patch * patch {
        return Err(Error::shape(format!(
            "{n}x{feat} tokens do not fit lattice {lattice:?} with patch {patch}, channels {channels}"
        )));
    }
    let hp = lattice.rows * patch;
    let wp = lattice.cols * patch;
    let mut out = vec![T::zero(); lattice.frames * hp * wp * channels];
    for (i, pos) in lattice.positions().enumerate() {
        let row = tokens.row(i);
        for py in 0..patch {
            for px in 0..patch {
                let y = pos.row * patch + py;
                let x = pos.col * patch + px;
                let base = ((pos.frame * hp + y) * wp + x) * channels;
                let f0 = (py * patch + px) * channels;
                out[base..base + channels].copy_from_slice(&row[f0..f0 + channels]);
            }
        }
    }
    Tensor::new(&[lattice.frames, hp, wp, channels], out)
}

pub(crate) fn latent_dims<T>(latent: &Tensor<T>) -> Result<[usize; 4]> {
    match latent.shape() {
        &[f, h, w, c] => Ok([f, h, w, c]),
        s => Err(Error::shape(format!("latent must be rank 4 [F,H,W,C], got {s:?}"))),
    }
}

/// Tokenized prompt: exactly `text_len` ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub ids: Vec<usize>,
}

impl Prompt {
    /// Whitespace tokenizer: `<sks>` maps to the subject id, other words
    /// hash into `[2, vocab)`. Truncated or padded to `text_len`.
    pub fn encode(text: &str, text_len: usize, vocab: usize) -> Self {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                if w == SUBJECT_WORD {
                    SUBJECT_ID
                } else {
                    let word = w.to_lowercase();
                    2 + (fnv1a(word.as_bytes()) % (vocab as u64 - 2)) as usize
                }
            })
            .take(text_len)
            .collect();
        ids.resize(text_len, PAD_ID);
        Prompt { ids }
    }

    pub fn subject_position(&self) -> Option<usize> {
        self.ids.iter().position(|&i| i == SUBJECT_ID)
    }
}
