//! Tensor arithmetic, seeded randomness, and the gradient tape.

pub mod gradcheck;
pub mod io;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use rng::SeededRng;
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, PairRotation, Tape, Var};
pub use tensor::{argmax_slice, Tensor};
