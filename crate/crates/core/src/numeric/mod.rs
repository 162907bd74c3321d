//! Dense linear algebra, reverse-mode gradients and the Adam optimiser.

mod matrix;
mod optim;
mod tape;

pub use matrix::{cosine_similarity, dot, l2_normalize, norm, row_softmax, Matrix};
pub use optim::{AdamConfig, OptimizerState};
pub use tape::{Gradients, ParamId, Tape, Var};
