use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mmdit::ModelConfig;
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::{Scalar, Tensor};
use crate::scenes::{make_reference_set, make_scene, CorpusSpec, Scene, SceneSpec};
use crate::store;

use super::output::write_text;

const SPEC_FILE: &str = "corpus.toml";
const MANIFEST_FILE: &str = "manifest.csv";

fn scene_dir(root: &Path, scene: usize) -> PathBuf {
    root.join("scenes").join(format!("{scene:03}"))
}

/// Write a corpus: its spec, a manifest row per (scene, prompt) and, per
/// scene, the scene spec, video latent, reference image and reference set.
pub fn gen_scene(spec: &CorpusSpec, out: &Path) -> Result<Corpus> {
    spec.validate()?;
    store::create_dir(out)?;
    store::write_toml(&out.join(SPEC_FILE), spec)?;
    let mut manifest = String::from("scene,seed,prompt_id,prompt\n");
    for e in spec.entries() {
        let _ = writeln!(manifest, "{},{},{},{}", e.scene, e.seed, e.prompt_id, spec.prompts[e.prompt_id]);
    }
    write_text(&out.join(MANIFEST_FILE), &manifest)?;
    for i in 0..spec.scenes {
        let dir = scene_dir(out, i);
        let scene_spec = SceneSpec::new(spec.scene_seed(i), spec.params.clone());
        store::create_dir(&dir.join("references"))?;
        scene_spec.save(&dir.join("scene.toml"))?;
        let scene = make_scene(scene_spec.seed, &scene_spec.params)?;
        write_tensor(&dir.join("video.wkt"), &scene.render_latent::<f32>()?)?;
        write_tensor(&dir.join("reference.wkt"), &scene.render_reference::<f32>()?)?;
        for (k, r) in make_reference_set::<f32>(&scene, spec.references, spec.jitter)?
            .iter()
            .enumerate()
        {
            write_tensor(&dir.join("references").join(format!("ref_{k:02}.wkt")), &r.latent)?;
        }
    }
    Corpus::open(out)
}

/// A corpus directory written by [`gen_scene`].
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub spec: CorpusSpec,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(SPEC_FILE);
        if !path.is_file() {
            return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            spec: CorpusSpec::load(&path)?,
        })
    }

    pub fn len(&self) -> usize {
        self.spec.scenes
    }

    pub fn is_empty(&self) -> bool {
        self.spec.scenes == 0
    }

    pub fn scene_dir(&self, scene: usize) -> Result<PathBuf> {
        if scene >= self.spec.scenes {
            return Err(Error::Input(format!("corpus has {} scenes, asked for {scene}", self.spec.scenes)));
        }
        Ok(scene_dir(&self.root, scene))
    }

    pub fn scene(&self, scene: usize) -> Result<Scene> {
        load_scene(&self.scene_dir(scene)?)
    }

    /// Stored reference set of a scene, `[1, H·p, W·p, c]` each.
    pub fn references<T: Scalar>(&self, scene: usize) -> Result<Vec<Tensor<T>>> {
        let dir = self.scene_dir(scene)?.join("references");
        (0..self.spec.references)
            .map(|k| read_tensor(&dir.join(format!("ref_{k:02}.wkt"))))
            .collect()
    }

    pub fn prompt_for(&self, scene: usize) -> &str {
        &self.spec.prompts[scene % self.spec.prompts.len()]
    }
}

/// Rebuild a scene from the `scene.toml` inside `dir`.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let spec = SceneSpec::load(&dir.join("scene.toml"))?;
    make_scene(spec.seed, &spec.params)
}

/// The scene's lattice, patch and channels must match the model.
pub fn check_scene_fits(scene: &Scene, cfg: &ModelConfig) -> Result<()> {
    let p = &scene.params;
    if (p.frames, p.grid_h, p.grid_w, p.patch, p.channels)
        != (cfg.frames, cfg.grid_h, cfg.grid_w, cfg.patch, cfg.latent_channels)
    {
        return Err(Error::Config(format!(
            "scene geometry {}x{}x{} (patch {}, {} channels) does not match the model",
            p.frames, p.grid_h, p.grid_w, p.patch, p.channels
        )));
    }
    Ok(())
}
