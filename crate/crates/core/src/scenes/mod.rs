//! Synthetic latent videos with analytically known correspondences: a
//! textured sprite over a textured background, translated on the torus.

mod corpus;

pub use corpus::{CorpusEntry, CorpusSpec, SceneSpec, DEFAULT_PROMPTS, SCENE_SPEC_VERSION};

use serde::{Deserialize, Serialize};

use crate::correspondence::{FlowDirection, FlowField};
use crate::error::{Error, Result};
use crate::masking::{Mask, MaskKind};
use crate::mmdit::{patchify, Lattice, ModelConfig};
use crate::numerics::{Scalar, SeededRng, Tensor};

/// How the sprite moves between frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    /// The whole frame translates on the torus; correspondences are bijective.
    #[default]
    Toroidal,
    /// The sprite slides over a static background and stops at the borders.
    Clamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub channels: usize,
    /// Sprite side in tokens.
    pub sprite: usize,
    /// Top-left sprite token in the reference image; drawn from the seed when absent.
    pub canonical: Option<[usize; 2]>,
    /// Frame-0 displacement from the canonical position; drawn when absent.
    pub offset: Option<[i64; 2]>,
    /// Per-frame displacement; drawn when absent.
    pub velocity: Option<[i64; 2]>,
    pub motion: MotionMode,
    pub background_amplitude: f64,
    pub sprite_amplitude: f64,
    pub texture_amplitude: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            frames: 4,
            grid_h: 8,
            grid_w: 8,
            patch: 2,
            channels: 4,
            sprite: 4,
            canonical: None,
            offset: None,
            velocity: None,
            motion: MotionMode::Toroidal,
            background_amplitude: 0.25,
            sprite_amplitude: 0.5,
            texture_amplitude: 0.15,
        }
    }
}

impl SceneParams {
    /// Geometry matching a model configuration.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        SceneParams {
            frames: cfg.frames,
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
            patch: cfg.patch,
            channels: cfg.latent_channels,
            sprite: (cfg.grid_h.min(cfg.grid_w) / 2).max(1),
            ..SceneParams::default()
        }
    }

    /// A sprite translated by a constant `shift` in every frame.
    pub fn translated(mut self, shift: [i64; 2]) -> Self {
        self.offset = Some(shift);
        self.velocity = Some([0, 0]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.grid_h == 0 || self.grid_w == 0 || self.patch == 0 || self.channels == 0 {
            return bad("scene dimensions must be positive".into());
        }
        if self.sprite == 0 || self.sprite > self.grid_h || self.sprite > self.grid_w {
            return bad(format!(
                "sprite of {} tokens does not fit a {}x{} grid",
                self.sprite, self.grid_h, self.grid_w
            ));
        }
        if let Some([r, c]) = self.canonical {
            if r + self.sprite > self.grid_h || c + self.sprite > self.grid_w {
                return bad(format!("canonical position ({r}, {c}) puts the sprite off the grid"));
            }
        }
        for (name, a) in [
            ("background_amplitude", self.background_amplitude),
            ("sprite_amplitude", self.sprite_amplitude),
            ("texture_amplitude", self.texture_amplitude),
        ] {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("{name} {a} outside [0, 1]"));
            }
        }
        Ok(())
    }

    fn lattice(&self) -> Lattice {
        Lattice::new(self.frames, self.grid_h, self.grid_w)
    }
}

/// A fully drawn scene. Positions are top-left sprite tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub params: SceneParams,
    pub canonical: (usize, usize),
    pub offset: (i64, i64),
    pub velocity: (i64, i64),
    /// Channel signature added over the whole sprite, `[c]`.
    pub signature: Vec<f64>,
    /// Background pixels `[H_px, W_px, c]`.
    background: Vec<f64>,
    /// Sprite texture pixels `[s·p, s·p, c]`, added to the signature.
    texture: Vec<f64>,
}

/// Analytic correspondences of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Generation frame to reference image, per token.
    pub flow: FlowField,
    /// Sprite footprint in each generated frame.
    pub mask: Mask,
    /// Sprite footprint in the repeated reference.
    pub reference_mask: Mask,
    pub bijective: bool,
}

/// One image of a reference set, `[1, H_px, W_px, c]`, with its footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage<T> {
    pub latent: Tensor<T>,
    pub mask: Mask,
}

fn uniform_field(rng: &mut SeededRng, n: usize, amplitude: f64) -> Vec<f64> {
    (0..n).map(|_| amplitude * (2.0 * rng.uniform() - 1.0)).collect()
}

/// Sprite texture with every pixel orthogonal to the signature and to the
/// constant vector, and every token scaled to the same norm. Exact matches are
/// then the unique best dot products among sprite tokens, and layer-norm
/// statistics agree across the sprite.
fn sprite_texture(rng: &mut SeededRng, p: &SceneParams, signature: &[f64]) -> Vec<f64> {
    let c = p.channels;
    let side = p.sprite * p.patch;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in [signature.to_vec(), vec![1.0; c]] {
        let mut u = v;
        for b in &basis {
            let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            basis.push(u.into_iter().map(|x| x / n).collect());
        }
    }
    let mut tex = vec![0.0; side * side * c];
    let target = p.texture_amplitude * ((p.patch * p.patch * c) as f64).sqrt();
    for tr in 0..p.sprite {
        for tc in 0..p.sprite {
            let pixels: Vec<usize> = (0..p.patch * p.patch)
                .map(|k| (tr * p.patch + k / p.patch) * side + tc * p.patch + k % p.patch)
                .collect();
            for &px in &pixels {
                let mut g: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
                for b in &basis {
                    let d: f64 = g.iter().zip(b).map(|(x, y)| x * y).sum();
                    g.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
                tex[px * c..(px + 1) * c].copy_from_slice(&g);
            }
            let norm = pixels
                .iter()
                .flat_map(|&px| &tex[px * c..(px + 1) * c])
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > 1e-12 {
                for &px in &pixels {
                    tex[px * c..(px + 1) * c].iter_mut().for_each(|x| *x *= target / norm);
                }
            }
        }
    }
    tex
}

fn draw_offset(rng: &mut SeededRng, reach: usize) -> i64 {
    rng.int_inclusive(0, 2 * reach) as i64 - reach as i64
}

pub fn make_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let root = SeededRng::new(seed);
    let p = params;
    let (hp, wp, c) = (p.grid_h * p.patch, p.grid_w * p.patch, p.channels);
    let mut geo = root.fork("geometry");
    let canonical = match p.canonical {
        Some([r, c]) => (r, c),
        None => (
            geo.int_inclusive(0, p.grid_h - p.sprite),
            geo.int_inclusive(0, p.grid_w - p.sprite),
        ),
    };
    let offset = match p.offset {
        Some([r, c]) => (r, c),
        None => (draw_offset(&mut geo, 2), draw_offset(&mut geo, 2)),
    };
    let velocity = match p.velocity {
        Some([r, c]) => (r, c),
        None => (draw_offset(&mut geo, 1), draw_offset(&mut geo, 1)),
    };
    let mut sig_rng = root.fork("signature");
    let signature: Vec<f64> = (0..c)
        .map(|_| if sig_rng.uniform() < 0.5 { -p.sprite_amplitude } else { p.sprite_amplitude })
        .collect();
    let background = uniform_field(&mut root.fork("background"), hp * wp * c, p.background_amplitude);
    let texture = sprite_texture(&mut root.fork("texture"), p, &signature);
    Ok(Scene {
        seed,
        params: params.clone(),
        canonical,
        offset,
        velocity,
        signature,
        background,
        texture,
    })
}

impl Scene {
    pub fn lattice(&self) -> Lattice {
        self.params.lattice()
    }

    fn pixel_dims(&self) -> (usize, usize, usize) {
        let p = &self.params;
        (p.grid_h * p.patch, p.grid_w * p.patch, p.channels)
    }

    /// Top-left sprite token in frame `f`.
    pub fn position(&self, f: usize) -> (usize, usize) {
        let p = &self.params;
        let r = self.canonical.0 as i64 + self.offset.0 + f as i64 * self.velocity.0;
        let c = self.canonical.1 as i64 + self.offset.1 + f as i64 * self.velocity.1;
        match p.motion {
            MotionMode::Toroidal => (r.rem_euclid(p.grid_h as i64) as usize, c.rem_euclid(p.grid_w as i64) as usize),
            MotionMode::Clamped => (
                r.clamp(0, (p.grid_h - p.sprite) as i64) as usize,
                c.clamp(0, (p.grid_w - p.sprite) as i64) as usize,
            ),
        }
    }

    pub fn trajectory(&self) -> Vec<(usize, usize)> {
        (0..self.params.frames).map(|f| self.position(f)).collect()
    }

    /// Token displacement of frame `f` relative to the reference.
    fn delta(&self, f: usize) -> (i64, i64) {
        let (r, c) = self.position(f);
        (r as i64 - self.canonical.0 as i64, c as i64 - self.canonical.1 as i64)
    }

    /// Composite of `background` and the sprite at token `pos`, wrapping on the torus.
    fn composite(&self, background: &[f64], pos: (usize, usize)) -> Vec<f64> {
        let (hp, wp, c) = self.pixel_dims();
        let side = self.params.sprite * self.params.patch;
        let patch = self.params.patch;
        let mut img = background.to_vec();
        for y in 0..side {
            for x in 0..side {
                let py = (pos.0 * patch + y) % hp;
                let px = (pos.1 * patch + x) % wp;
                for ch in 0..c {
                    let v = self.signature[ch] + self.texture[(y * side + x) * c + ch];
                    img[(py * wp + px) * c + ch] = v.clamp(-1.0, 1.0);
                }
            }
        }
        img
    }

    fn roll(&self, img: &[f64], delta: (i64, i64)) -> Vec<f64> {
        let (hp, wp, c) = self.pixel_dims();
        let patch = self.params.patch as i64;
        let mut out = vec![0.0; img.len()];
        for y in 0..hp {
            for x in 0..wp {
                let sy = (y as i64 - delta.0 * patch).rem_euclid(hp as i64) as usize;
                let sx = (x as i64 - delta.1 * patch).rem_euclid(wp as i64) as usize;
                out[(y * wp + x) * c..(y * wp + x + 1) * c].copy_from_slice(&img[(sy * wp + sx) * c..(sy * wp + sx + 1) * c]);
            }
        }
        out
    }

    fn reference_pixels(&self) -> Vec<f64> {
        self.composite(&self.background, self.canonical)
    }

    /// The reference image: the sprite at its canonical position, `[1, H_px, W_px, c]`.
    pub fn render_reference<T: Scalar>(&self) -> Result<Tensor<T>> {
        let (hp, wp, c) = self.pixel_dims();
        Tensor::from_f64(&[1, hp, wp, c], &self.reference_pixels())
    }

    /// The reference repeated over every frame.
    pub fn render_repeated_reference<T: Scalar>(&self) -> Result<Tensor<T>> {
        repeat_frames(&self.render_reference()?, self.params.frames)
    }

    /// The scene video `[F, H_px, W_px, c]`.
    pub fn render_latent<T: Scalar>(&self) -> Result<Tensor<T>> {
        let (hp, wp, c) = self.pixel_dims();
        let reference = self.reference_pixels();
        let mut data = Vec::with_capacity(self.params.frames * hp * wp * c);
        for f in 0..self.params.frames {
            let frame = match self.params.motion {
                MotionMode::Toroidal => self.roll(&reference, self.delta(f)),
                MotionMode::Clamped => self.composite(&self.background, self.position(f)),
            };
            data.extend(frame);
        }
        Tensor::from_f64(&[self.params.frames, hp, wp, c], &data)
    }

    fn footprint(&self, pos: (usize, usize)) -> Vec<bool> {
        let p = &self.params;
        let mut v = vec![false; p.grid_h * p.grid_w];
        for r in 0..p.sprite {
            for c in 0..p.sprite {
                v[((pos.0 + r) % p.grid_h) * p.grid_w + (pos.1 + c) % p.grid_w] = true;
            }
        }
        v
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        let p = &self.params;
        let lattice = self.lattice();
        let per = lattice.per_frame();
        let mut mask = Vec::with_capacity(lattice.len());
        let mut matches = Vec::with_capacity(lattice.len());
        for f in 0..p.frames {
            let fp = self.footprint(self.position(f));
            let (dr, dc) = self.delta(f);
            for (i, &on) in fp.iter().enumerate().take(per) {
                let (r, c) = ((i / p.grid_w) as i64, (i % p.grid_w) as i64);
                let moves = p.motion == MotionMode::Toroidal || on;
                let (sr, sc) = if moves { (r - dr, c - dc) } else { (r, c) };
                let sr = sr.rem_euclid(p.grid_h as i64) as usize;
                let sc = sc.rem_euclid(p.grid_w as i64) as usize;
                matches.push(sr * p.grid_w + sc);
            }
            mask.extend(fp);
        }
        let reference: Vec<bool> = self.footprint(self.canonical).repeat(p.frames);
        Ok(GroundTruth {
            flow: FlowField::from_matches(FlowDirection::GenToRef, p.frames, p.grid_h, p.grid_w, matches)?,
            mask: Mask::new(MaskKind::GroundTruth, lattice, mask)?,
            reference_mask: Mask::new(MaskKind::GroundTruth, lattice, reference)?,
            bijective: p.motion == MotionMode::Toroidal,
        })
    }

    pub fn gt_flow(&self) -> Result<FlowField> {
        Ok(self.ground_truth()?.flow)
    }

    pub fn gt_mask(&self) -> Result<Mask> {
        Ok(self.ground_truth()?.mask)
    }

    /// Subject embedding `[1, d]` carrying the mean sprite token in the
    /// content lanes, the analytic stand-in for a trained subject token.
    pub fn subject_embedding<T: Scalar>(&self, cfg: &ModelConfig) -> Result<Tensor<T>> {
        let (tokens, _) = patchify(&self.render_reference::<f64>()?, self.params.patch)?;
        let feat = tokens.shape()[1];
        if feat > cfg.dim {
            return Err(Error::Config(format!("{feat} token features exceed model dim {}", cfg.dim)));
        }
        let fp = self.footprint(self.canonical);
        let n = fp.iter().filter(|&&b| b).count() as f64;
        let mut e = vec![0.0; cfg.dim];
        for (i, _) in fp.iter().enumerate().filter(|(_, &b)| b) {
            for (j, &v) in tokens.row(i).iter().enumerate() {
                e[j] += v / n;
            }
        }
        Tensor::from_f64(&[1, cfg.dim], &e)
    }
}

/// Repeat a single-frame latent `[1, H, W, c]` over `frames` frames.
pub fn repeat_frames<T: Scalar>(image: &Tensor<T>, frames: usize) -> Result<Tensor<T>> {
    match image.shape() {
        &[1, h, w, c] => Tensor::new(&[frames, h, w, c], image.data().repeat(frames)),
        s => Err(Error::shape(format!("expected a single-frame latent, got {s:?}"))),
    }
}

/// `k` renders of the sprite. With `jitter > 0` every image moves the sprite
/// by up to `jitter` tokens per axis and draws a fresh background; with
/// `jitter == 0` all images equal the reference.
pub fn make_reference_set<T: Scalar>(scene: &Scene, k: usize, jitter: usize) -> Result<Vec<ReferenceImage<T>>> {
    if k == 0 {
        return Err(Error::Config("a reference set needs at least one image".into()));
    }
    let p = &scene.params;
    let (hp, wp, c) = scene.pixel_dims();
    let lattice = Lattice::new(1, p.grid_h, p.grid_w);
    let root = SeededRng::new(scene.seed).fork("references");
    (0..k)
        .map(|i| {
            let (pixels, pos) = if jitter == 0 {
                (scene.reference_pixels(), scene.canonical)
            } else {
                let mut rng = root.fork(&format!("{i}"));
                let dr = draw_offset(&mut rng, jitter);
                let dc = draw_offset(&mut rng, jitter);
                let pos = (
                    (scene.canonical.0 as i64 + dr).rem_euclid(p.grid_h as i64) as usize,
                    (scene.canonical.1 as i64 + dc).rem_euclid(p.grid_w as i64) as usize,
                );
                let bg = uniform_field(&mut rng.fork("background"), hp * wp * c, p.background_amplitude);
                (scene.composite(&bg, pos), pos)
            };
            Ok(ReferenceImage {
                latent: Tensor::from_f64(&[1, hp, wp, c], &pixels)?,
                mask: Mask::new(MaskKind::GroundTruth, lattice, scene.footprint(pos))?,
            })
        })
        .collect()
}
