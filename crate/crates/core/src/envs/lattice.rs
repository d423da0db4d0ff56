//! Planar soft-body lattice: grid-aligned quadrilaterals made of corner masses
//! with edge and diagonal springs. Corners shared by neighbouring quads are a
//! single mass. Actuated quads scale their spring rest lengths; fixed quads
//! have immovable corners.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ControlInput, EnvConfig, SystemState};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Edge length of a lattice cell at rest, m.
pub const LATTICE_CELL_SIZE: f64 = 0.5;
/// Admissible actuator rest-length scale.
pub const ACTUATION_RANGE: (f64, f64) = (0.7, 1.3);
const RIGID_STIFFNESS_FACTOR: f64 = 4.0;

/// Corner offsets in observation order: counter-clockwise from bottom-left.
const CORNERS: [(i32, i32); 4] = [(0, 0), (1, 0), (1, 1), (0, 1)];
const SPRINGS: [(usize, usize); 6] = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (1, 3)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuadKind {
    Rigid,
    Soft,
    Actuated,
    Fixed,
}

impl QuadKind {
    pub const ALL: [QuadKind; 4] = [QuadKind::Rigid, QuadKind::Soft, QuadKind::Actuated, QuadKind::Fixed];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeCell {
    pub x: i32,
    pub y: i32,
    pub kind: QuadKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeLayout {
    pub cells: Vec<LatticeCell>,
}

impl LatticeLayout {
    pub fn new(cells: Vec<LatticeCell>) -> Result<Self> {
        let layout = Self { cells };
        layout.check()?;
        Ok(layout)
    }

    /// Rectangular block of `width × height` cells of one kind.
    pub fn block(width: i32, height: i32, kind: QuadKind) -> Self {
        let mut cells = Vec::new();
        for y in 0..height {
            for x in 0..width {
                cells.push(LatticeCell { x, y, kind });
            }
        }
        Self { cells }
    }

    pub fn check(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("empty lattice layout".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.cells {
            if !seen.insert((c.x, c.y)) {
                return Err(Error::Config(format!("duplicate lattice cell ({}, {})", c.x, c.y)));
            }
        }
        if !self.is_connected() {
            return Err(Error::Config("lattice layout is not connected".into()));
        }
        Ok(())
    }

    /// Connectivity through shared corners or edges.
    pub fn is_connected(&self) -> bool {
        let n = self.cells.len();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if !seen[j] && touches(&self.cells[i], &self.cells[j]) {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Unique corner points and, per cell, the indices of its four corners.
    pub fn corner_points(&self) -> (Vec<(i32, i32)>, Vec<[usize; 4]>) {
        let mut index: BTreeMap<(i32, i32), usize> = BTreeMap::new();
        let mut points = Vec::new();
        let mut corners = Vec::with_capacity(self.cells.len());
        for c in &self.cells {
            let mut ids = [0; 4];
            for (k, (dx, dy)) in CORNERS.iter().enumerate() {
                let key = (c.x + dx, c.y + dy);
                ids[k] = *index.entry(key).or_insert_with(|| {
                    points.push(key);
                    points.len() - 1
                });
            }
            corners.push(ids);
        }
        (points, corners)
    }

    /// Random connected layout grown upward from a fixed base cell, with at
    /// least one actuated cell.
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let mut cells = vec![LatticeCell {
            x: 0,
            y: 0,
            kind: QuadKind::Fixed,
        }];
        let mut taken: BTreeSet<(i32, i32)> = [(0, 0)].into_iter().collect();
        while cells.len() < n {
            let frontier: Vec<(i32, i32)> = cells
                .iter()
                .flat_map(|c| [(c.x + 1, c.y), (c.x - 1, c.y), (c.x, c.y + 1)])
                .filter(|p| p.1 >= 0 && !taken.contains(p))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let (x, y) = frontier[rng.random_range(0..frontier.len())];
            let kind = match rng.random_range(0..3) {
                0 => QuadKind::Rigid,
                1 => QuadKind::Soft,
                _ => QuadKind::Actuated,
            };
            taken.insert((x, y));
            cells.push(LatticeCell { x, y, kind });
        }
        if n > 1 && !cells.iter().any(|c| c.kind == QuadKind::Actuated) {
            let k = rng.random_range(1..n);
            cells[k].kind = QuadKind::Actuated;
        }
        Self { cells }
    }
}

pub(crate) fn touches(a: &LatticeCell, b: &LatticeCell) -> bool {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    (dx, dy) != (0, 0) && dx.abs() <= 1 && dy.abs() <= 1
}

pub(super) fn rest_state(layout: &LatticeLayout) -> SystemState {
    let mut values = DenseMatrix::zeros(layout.cells.len(), 16);
    for (i, c) in layout.cells.iter().enumerate() {
        for (k, (dx, dy)) in CORNERS.iter().enumerate() {
            values[(i, 4 * k)] = (c.x + dx) as f64 * LATTICE_CELL_SIZE;
            values[(i, 4 * k + 1)] = (c.y + dy) as f64 * LATTICE_CELL_SIZE;
        }
    }
    SystemState {
        values,
        actuation: vec![1.0; layout.cells.len()],
    }
}

/// Shoelace area of quad `cell`.
pub fn quad_area(state: &SystemState, cell: usize) -> f64 {
    let row = state.object(cell);
    let mut twice = 0.0;
    for k in 0..4 {
        let (x0, y0) = (row[4 * k], row[4 * k + 1]);
        let n = (k + 1) % 4;
        let (x1, y1) = (row[4 * n], row[4 * n + 1]);
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice
}

/// One semi-implicit Euler step. `u[i]` is the rest-length scaling rate of
/// actuated quad `i`, in 1/s.
pub fn soft_lattice_step(state: &SystemState, u: &ControlInput, config: &EnvConfig) -> Result<SystemState> {
    let layout = config.lattice_layout()?;
    let p = &config.params;
    let dt = config.dt;
    let (points, corners) = layout.corner_points();
    let n_cells = layout.cells.len();

    let mut pos = vec![[0.0f64; 4]; points.len()];
    let mut filled = vec![false; points.len()];
    for (c, ids) in corners.iter().enumerate() {
        let row = state.object(c);
        for (k, &pid) in ids.iter().enumerate() {
            if !filled[pid] {
                pos[pid].copy_from_slice(&row[4 * k..4 * k + 4]);
                filled[pid] = true;
            }
        }
    }

    let mut scale = if state.actuation.len() == n_cells {
        state.actuation.clone()
    } else {
        vec![1.0; n_cells]
    };
    let mut pinned = vec![false; points.len()];
    let mut forces = vec![[0.0f64; 2]; points.len()];
    for (c, cell) in layout.cells.iter().enumerate() {
        let ids = corners[c];
        let k = match cell.kind {
            QuadKind::Fixed => {
                for &pid in &ids {
                    pinned[pid] = true;
                }
                continue;
            }
            QuadKind::Rigid => p.stiffness * RIGID_STIFFNESS_FACTOR,
            QuadKind::Soft => p.stiffness,
            QuadKind::Actuated => {
                scale[c] = (scale[c] * (1.0 + dt * u.values[(c, 0)]))
                    .clamp(ACTUATION_RANGE.0, ACTUATION_RANGE.1);
                p.stiffness
            }
        };
        for &(a, b) in &SPRINGS {
            let diagonal = (a + b) % 2 == 0;
            let rest = LATTICE_CELL_SIZE * if diagonal { std::f64::consts::SQRT_2 } else { 1.0 } * scale[c];
            let (pa, pb) = (ids[a], ids[b]);
            let dx = pos[pb][0] - pos[pa][0];
            let dy = pos[pb][1] - pos[pa][1];
            let len = (dx * dx + dy * dy).sqrt();
            if len == 0.0 {
                continue;
            }
            let f = k * (len - rest) / len;
            forces[pa][0] += f * dx;
            forces[pa][1] += f * dy;
            forces[pb][0] -= f * dx;
            forces[pb][1] -= f * dy;
        }
    }

    for (pid, s) in pos.iter_mut().enumerate() {
        if pinned[pid] {
            s[2] = 0.0;
            s[3] = 0.0;
            continue;
        }
        let ax = (forces[pid][0] - p.damping * s[2]) / p.mass;
        let ay = (forces[pid][1] - p.damping * s[3]) / p.mass - p.gravity;
        s[2] += dt * ax;
        s[3] += dt * ay;
        s[0] += dt * s[2];
        s[1] += dt * s[3];
    }

    let mut values = DenseMatrix::zeros(n_cells, 16);
    for (c, ids) in corners.iter().enumerate() {
        let row = values.row_mut(c);
        for (k, &pid) in ids.iter().enumerate() {
            row[4 * k..4 * k + 4].copy_from_slice(&pos[pid]);
        }
    }
    let next = SystemState {
        values,
        actuation: scale,
    };
    if !next.is_finite() {
        return Err(Error::Numerical("soft lattice produced a non-finite state".into()));
    }
    Ok(next)
}
