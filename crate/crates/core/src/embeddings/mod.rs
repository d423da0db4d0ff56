//! Koopman observation functions: a learned graph encoder/decoder pair and a
//! hand-crafted polynomial dictionary.

mod mlp;
mod model;
mod normalizer;
mod poly;

pub use mlp::Mlp;
pub use model::{BoundModel, GraphBatch, GraphNet, KoopmanModel, ModelShape, CHECKPOINT_FORMAT};
pub use normalizer::Normalizer;
pub use poly::{poly_basis, poly_exponents, poly_project, poly_width, MAX_POLY_ORDER};
