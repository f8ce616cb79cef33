use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store;

use super::SceneParams;

pub const SCENE_SPEC_VERSION: &str = "wk-scene-1";

/// Evaluation prompts; each names the subject once and fits eight tokens.
pub const DEFAULT_PROMPTS: [&str; 10] = [
    "a photo of <sks>",
    "<sks> on the beach",
    "<sks> in the snow",
    "<sks> on a wooden table",
    "<sks> floating in space",
    "a painting of <sks>",
    "<sks> in a city street",
    "<sks> under a tree",
    "<sks> next to a red box",
    "a close up of <sks>",
];

/// One scene, as stored in a scene spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub version: String,
    pub seed: u64,
    #[serde(default)]
    pub params: SceneParams,
}

impl SceneSpec {
    pub fn new(seed: u64, params: SceneParams) -> Self {
        SceneSpec {
            version: SCENE_SPEC_VERSION.into(),
            seed,
            params,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: SceneSpec = store::read_toml(path)?;
        if s.version != SCENE_SPEC_VERSION {
            return Err(Error::format(path, format!("unsupported scene spec version {:?}", s.version)));
        }
        s.params.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_toml(path, self)
    }
}

/// A set of scenes crossed with a set of prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub version: String,
    pub base_seed: u64,
    pub scenes: usize,
    pub prompts: Vec<String>,
    /// Reference images per scene.
    pub references: usize,
    /// Reference position jitter in tokens.
    pub jitter: usize,
    pub params: SceneParams,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            version: SCENE_SPEC_VERSION.into(),
            base_seed: 0,
            scenes: 10,
            prompts: DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect(),
            references: 5,
            jitter: 1,
            params: SceneParams::default(),
        }
    }
}

/// One (scene, prompt) pair of a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub scene: usize,
    pub seed: u64,
    pub prompt_id: usize,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.version != SCENE_SPEC_VERSION {
            return Err(Error::Config(format!("unsupported corpus version {:?}", self.version)));
        }
        if self.scenes == 0 || self.prompts.is_empty() || self.references == 0 {
            return Err(Error::Config("a corpus needs scenes, prompts and references".into()));
        }
        self.params.validate()
    }

    pub fn scene_seed(&self, scene: usize) -> u64 {
        self.base_seed.wrapping_add(scene as u64)
    }

    pub fn entries(&self) -> Vec<CorpusEntry> {
        (0..self.scenes)
            .flat_map(|s| {
                (0..self.prompts.len()).map(move |p| CorpusEntry {
                    scene: s,
                    seed: self.scene_seed(s),
                    prompt_id: p,
                })
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: CorpusSpec = store::read_toml(path)?;
        s.validate()?;
        Ok(s)
    }
}
