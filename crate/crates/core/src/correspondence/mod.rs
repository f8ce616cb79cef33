//! Cross-branch token matching: correlations, flows and PCK evaluation.

mod correlation;
mod flow;
mod pck;
mod sweep;

pub use correlation::{brute_force_match, directional_correlation, extract_flow, symmetric_correlation, Correlation};
pub use flow::{wrap_offset, FlowDirection, FlowField};
pub use pck::{pck, pck_counts, PckCounts, DEFAULT_ALPHA};
pub use sweep::{
    descriptor_sweep, match_branches, scene_trajectories, sweep_trajectories, BranchMatch, MatchEvalReport, MatchEvalRow,
    SweepOptions,
};
