//! Toy multi-modal diffusion transformer with instrumented attention.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod rope;
pub mod tokens;
pub mod trace;
pub mod weights;

pub use config::{InitMode, ModelConfig};
pub use model::{
    attend, attend_vars, timestep_embedding, AttentionEdit, AttentionHook, AttentionIo, ForwardOutput,
    LayerVars, Mmdit, ModelInput, NoHook, ParamVars,
};
pub use rope::{apply_rope, RopeFrequencies};
pub use tokens::{patchify, unpatchify, Lattice, Prompt, TokenPos, PAD_ID, SUBJECT_ID, SUBJECT_WORD};
pub use trace::{extract_descriptors, DescriptorKind, DescriptorPair, LayerTrace, Trace, TraceSpec};
pub use weights::{LayerWeights, Weights};
