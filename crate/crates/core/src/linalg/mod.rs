//! Dense matrices, Cholesky solves and a reverse-mode tape over them.

mod cholesky;
mod gradcheck;
mod matrix;
mod tape;

pub use cholesky::{spd_solve, Cholesky};
pub use gradcheck::{check_gradients, GradCheck};
pub use matrix::DenseMatrix;
pub use tape::{AggregatePlan, Gradients, Tape, Var};
