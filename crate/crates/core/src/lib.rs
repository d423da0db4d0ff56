//! Compositional Koopman operators for multi-object dynamical systems.
//!
//! Object-centric embeddings are produced by a graph encoder, their linear
//! dynamics are identified with block-shared least squares, and controls are
//! synthesized by quadratic programming over the identified dynamics.

pub mod control;
pub mod dataset;
pub mod embeddings;
pub mod envs;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod sysid;
pub mod training;

pub use error::{Error, Result};
