//! Ground-truth simulators.
//!
//! Every environment advances with semi-implicit (symplectic) Euler:
//! velocities are updated from the current forces first, positions then move
//! with the new velocities.

mod lattice;
mod policy;
mod rope;
mod spring_balls;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::linalg::DenseMatrix;

pub use lattice::{
    quad_area, soft_lattice_step, LatticeCell, LatticeLayout, QuadKind, ACTUATION_RANGE,
    LATTICE_CELL_SIZE,
};
pub use policy::{ConstantPolicy, ControlSource, RandomExploration, ReplayPolicy, ZeroPolicy};
pub use rope::{rope_step, ROPE_BEND_RATIO, ROPE_SEGMENT};
pub use spring_balls::{spring_balls_energy, spring_balls_step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    SpringBalls,
    Rope2D,
    SoftLattice2D,
}

impl EnvKind {
    /// Per-object state width `d`.
    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::SpringBalls | EnvKind::Rope2D => 4,
            EnvKind::SoftLattice2D => 16,
        }
    }

    /// Per-object action width `l`.
    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::SpringBalls => 2,
            EnvKind::Rope2D | EnvKind::SoftLattice2D => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Spring stiffness, N/m.
    pub stiffness: f64,
    /// Viscous damping coefficient, N·s/m.
    pub damping: f64,
    /// Point mass, kg.
    pub mass: f64,
    /// Gravitational acceleration, m/s².
    pub gravity: f64,
    /// Bound of the random exploration policy.
    pub action_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub env_kind: EnvKind,
    pub num_objects: usize,
    pub dt: f64,
    pub seed: u64,
    pub params: PhysicalParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<LatticeLayout>,
}

pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 64;

impl EnvConfig {
    pub fn spring_balls(num_objects: usize, stiffness: f64, seed: u64) -> Self {
        Self {
            env_kind: EnvKind::SpringBalls,
            num_objects,
            dt: 0.01,
            seed,
            params: PhysicalParams {
                stiffness,
                damping: 0.0,
                mass: 1.0,
                gravity: 0.0,
                action_bound: 1.0,
            },
            layout: None,
        }
    }

    pub fn rope(num_objects: usize, seed: u64) -> Self {
        Self {
            env_kind: EnvKind::Rope2D,
            num_objects,
            dt: 0.01,
            seed,
            params: PhysicalParams {
                stiffness: 50.0,
                damping: 0.05,
                mass: 0.1,
                gravity: 9.8,
                action_bound: 1.0,
            },
            layout: None,
        }
    }

    pub fn soft_lattice(layout: LatticeLayout, seed: u64) -> Self {
        Self {
            env_kind: EnvKind::SoftLattice2D,
            num_objects: layout.cells.len(),
            dt: 0.01,
            seed,
            params: PhysicalParams {
                stiffness: 60.0,
                damping: 1.0,
                mass: 0.1,
                gravity: 2.0,
                action_bound: 2.0,
            },
            layout: Some(layout),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_OBJECTS..=MAX_OBJECTS).contains(&self.num_objects) {
            return Err(Error::Config(format!(
                "num_objects {} outside [{MIN_OBJECTS}, {MAX_OBJECTS}]",
                self.num_objects
            )));
        }
        let p = &self.params;
        if !(self.dt > 0.0) || !(p.stiffness > 0.0) || !(p.mass > 0.0) {
            return Err(Error::Config(
                "dt, stiffness and mass must be positive".into(),
            ));
        }
        if !(p.damping >= 0.0) || !p.gravity.is_finite() || !(p.action_bound >= 0.0) {
            return Err(Error::Config("invalid damping, gravity or action bound".into()));
        }
        if self.env_kind == EnvKind::SoftLattice2D {
            let layout = self.lattice_layout()?;
            if layout.cells.len() != self.num_objects {
                return Err(Error::Config(format!(
                    "layout has {} cells but num_objects is {}",
                    layout.cells.len(),
                    self.num_objects
                )));
            }
        }
        Ok(())
    }

    pub fn lattice_layout(&self) -> Result<&LatticeLayout> {
        self.layout
            .as_ref()
            .ok_or_else(|| Error::Config("SoftLattice2D requires a layout".into()))
    }

    pub fn state_dim(&self) -> usize {
        self.env_kind.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.env_kind.action_dim()
    }

    /// Objects that receive control input.
    pub fn actuation_mask(&self) -> Vec<bool> {
        match self.env_kind {
            EnvKind::SpringBalls => vec![true; self.num_objects],
            EnvKind::Rope2D => (0..self.num_objects).map(|i| i == 0).collect(),
            EnvKind::SoftLattice2D => match &self.layout {
                Some(l) => l.cells.iter().map(|c| c.kind == QuadKind::Actuated).collect(),
                None => vec![false; self.num_objects],
            },
        }
    }

    pub fn scene_graph(&self) -> Result<SceneGraph> {
        match self.env_kind {
            EnvKind::SpringBalls => Ok(SceneGraph::fully_connected(self.num_objects)),
            EnvKind::Rope2D => SceneGraph::rope(self.num_objects),
            EnvKind::SoftLattice2D => SceneGraph::lattice(self.lattice_layout()?),
        }
    }

    pub fn initial_state(&self) -> Result<SystemState> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(match self.env_kind {
            EnvKind::SpringBalls => spring_balls::initial_state(self, &mut rng),
            EnvKind::Rope2D => rope::initial_state(self, &mut rng),
            EnvKind::SoftLattice2D => lattice::rest_state(self.lattice_layout()?),
        })
    }

    /// Advances `state` by one step under `u`.
    pub fn step(&self, state: &SystemState, u: &ControlInput) -> Result<SystemState> {
        if state.num_objects() != self.num_objects || state.per_object_dim() != self.state_dim() {
            return Err(Error::dim(
                "step state",
                state.values.shape(),
                (self.num_objects, self.state_dim()),
            ));
        }
        if u.values.shape() != (self.num_objects, self.action_dim()) {
            return Err(Error::dim(
                "step control",
                u.values.shape(),
                (self.num_objects, self.action_dim()),
            ));
        }
        match self.env_kind {
            EnvKind::SpringBalls => spring_balls_step(state, u, self),
            EnvKind::Rope2D => rope_step(state, u, self),
            EnvKind::SoftLattice2D => soft_lattice_step(state, u, self),
        }
    }

    pub fn zero_control(&self) -> ControlInput {
        ControlInput::zeros(self.num_objects, self.action_dim())
    }
}

/// Per-object states, one row per object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub values: DenseMatrix,
    /// Unobserved actuator rest-length scales (soft lattice only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actuation: Vec<f64>,
}

impl SystemState {
    pub fn new(values: DenseMatrix) -> Self {
        Self {
            values,
            actuation: Vec::new(),
        }
    }

    pub fn num_objects(&self) -> usize {
        self.values.rows()
    }

    pub fn per_object_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn object(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    /// Whole-system state vector `[x_1; …; x_N]`.
    pub fn flat(&self) -> &[f64] {
        self.values.data()
    }

    pub fn is_finite(&self) -> bool {
        self.values.is_finite() && self.actuation.iter().all(|v| v.is_finite())
    }
}

/// Per-object actions; rows of non-actuated objects stay zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub values: DenseMatrix,
}

impl ControlInput {
    pub fn new(values: DenseMatrix) -> Self {
        Self { values }
    }

    pub fn zeros(num_objects: usize, action_dim: usize) -> Self {
        Self {
            values: DenseMatrix::zeros(num_objects, action_dim),
        }
    }

    pub fn num_objects(&self) -> usize {
        self.values.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.values.cols()
    }

    /// Zeroes every row whose mask entry is false.
    pub fn masked(mut self, mask: &[bool]) -> Self {
        for (i, &on) in mask.iter().enumerate() {
            if !on {
                self.values.row_mut(i).fill(0.0);
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub config: EnvConfig,
    pub states: Vec<SystemState>,
    pub controls: Vec<ControlInput>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() || self.controls.len() + 1 != self.states.len() {
            return Err(Error::Config(format!(
                "trajectory has {} states and {} controls",
                self.states.len(),
                self.controls.len()
            )));
        }
        let shape = self.states[0].values.shape();
        if self.states.iter().any(|s| s.values.shape() != shape) {
            return Err(Error::Config("inconsistent state shapes".into()));
        }
        let cshape = (shape.0, self.config.action_dim());
        if self.controls.iter().any(|u| u.values.shape() != cshape) {
            return Err(Error::Config("inconsistent control shapes".into()));
        }
        Ok(())
    }
}

/// Runs `config` for `steps` states (so `steps − 1` controls) under `policy`.
pub fn rollout_env(config: &EnvConfig, policy: &mut dyn ControlSource, steps: usize) -> Result<Trajectory> {
    let initial = config.initial_state()?;
    rollout_from(config, initial, policy, steps)
}

/// As [`rollout_env`] but from an explicit initial state.
pub fn rollout_from(
    config: &EnvConfig,
    initial: SystemState,
    policy: &mut dyn ControlSource,
    steps: usize,
) -> Result<Trajectory> {
    if steps < 2 {
        return Err(Error::Argument(format!("episode needs at least 2 states, got {steps}")));
    }
    let mask = config.actuation_mask();
    let mut states = Vec::with_capacity(steps);
    let mut controls = Vec::with_capacity(steps - 1);
    states.push(initial);
    for t in 0..steps - 1 {
        let current = &states[t];
        let u = policy.control(t, current, config)?.masked(&mask);
        let next = config.step(current, &u).map_err(|e| match e {
            Error::Numerical(_) => Error::Instability { step: t },
            other => other,
        })?;
        if !next.is_finite() {
            return Err(Error::Instability { step: t });
        }
        controls.push(u);
        states.push(next);
    }
    Ok(Trajectory {
        config: config.clone(),
        states,
        controls,
    })
}
