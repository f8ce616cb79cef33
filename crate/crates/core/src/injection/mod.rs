//! Fine appearance injection and the dual-branch denoising loop.

pub mod config;
pub mod dual;
pub mod ops;

pub use config::{Band, Fraction, InjectionConfig, Strategy};
pub use dual::{
    run_dual_branch, seeded_noise, AppliedLog, DualBranch, DualOutput, InjectionHook, SkipReason, StepDiagnostics,
    StepMatch,
};
pub use ops::{
    blend_values, injected_mma, kv_replacement_attention, token_concat_attention, warp_values, BranchQkv,
};
