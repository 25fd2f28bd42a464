//! Dense `f64` tensors, a reverse-mode gradient tape, seeded random streams
//! and a finite-difference gradient checker.

mod gradcheck;
mod rng;
mod tape;
mod value;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error, GradCheckReport};
pub use rng::RngStream;
pub use tape::{GradientTape, Gradients, Var};
pub use value::{cosine_similarity, softmax, Tensor};
