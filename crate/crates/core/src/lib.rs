pub mod adaptation;
pub mod correspondence;
pub mod diffusion;
pub mod error;
pub mod injection;
pub mod masking;
pub mod mmdit;
pub mod numerics;
pub mod pipeline;
pub mod scenes;
pub mod store;

pub use error::{Error, Result};
