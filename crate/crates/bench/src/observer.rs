use ckpm_core::embeddings::{poly_basis, poly_project, poly_width, KoopmanModel, MAX_POLY_ORDER};
use ckpm_core::envs::Trajectory;
use ckpm_core::graph::SceneGraph;
use ckpm_core::linalg::DenseMatrix;
use ckpm_core::sysid::EmbeddingSequence;
use ckpm_core::Result;

/// Observation functions mapping object states to embeddings and back.
#[derive(Debug, Clone)]
pub enum Observer {
    Learned(KoopmanModel),
    /// Monomials of each object's state up to degree 3; decoding reads the
    /// degree-one block.
    Polynomial,
    /// `g = x`, for systems that are linear in their state.
    Identity,
}

impl Observer {
    pub fn width(&self, state_dim: usize) -> Result<usize> {
        match self {
            Observer::Learned(model) => Ok(model.shape.m),
            Observer::Polynomial => poly_width(state_dim, MAX_POLY_ORDER),
            Observer::Identity => Ok(state_dim),
        }
    }

    /// Embeds raw states stacked as `(steps·N) × d`.
    pub fn encode(&self, graph: &SceneGraph, states: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            Observer::Learned(model) => model.encode(graph, states),
            Observer::Polynomial => poly_basis(states, MAX_POLY_ORDER),
            Observer::Identity => Ok(states.clone()),
        }
    }

    pub fn decode(&self, graph: &SceneGraph, g: &DenseMatrix, state_dim: usize) -> Result<DenseMatrix> {
        match self {
            Observer::Learned(model) => model.decode(graph, g),
            Observer::Polynomial => poly_project(g, state_dim),
            Observer::Identity => Ok(g.clone()),
        }
    }

    /// Per-step embeddings and controls of an episode.
    pub fn embed(&self, graph: &SceneGraph, ep: &Trajectory) -> Result<EmbeddingSequence> {
        let refs: Vec<&DenseMatrix> = ep.states.iter().map(|s| &s.values).collect();
        let stacked = self.encode(graph, &DenseMatrix::vcat(&refs)?)?;
        let n = graph.num_objects();
        let embeddings = (0..ep.states.len()).map(|t| stacked.slice_rows(t * n, (t + 1) * n)).collect();
        EmbeddingSequence::new(embeddings, ep.controls.iter().map(|u| u.values.clone()).collect())
    }
}
