//! `N` unit balls in the plane, every pair joined by a linear spring of
//! stiffness `k`, so `ẍ_i = Σ_j k (x_j − x_i) / m` plus any applied force.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ControlInput, EnvConfig, SystemState};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub(super) fn initial_state(config: &EnvConfig, rng: &mut ChaCha8Rng) -> SystemState {
    let values = DenseMatrix::from_fn(config.num_objects, 4, |_, _| rng.random_range(-1.0..1.0));
    SystemState::new(values)
}

/// One semi-implicit Euler step. `u` holds per-ball forces `[f_x, f_y]`.
pub fn spring_balls_step(state: &SystemState, u: &ControlInput, config: &EnvConfig) -> Result<SystemState> {
    let n = state.num_objects();
    let p = &config.params;
    let dt = config.dt;
    let x = &state.values;
    let mut sum = [0.0f64; 2];
    for i in 0..n {
        sum[0] += x[(i, 0)];
        sum[1] += x[(i, 1)];
    }
    let mut next = x.clone();
    for i in 0..n {
        for a in 0..2 {
            // Σ_j k (x_j − x_i) = k (Σ_j x_j − N x_i)
            let spring = p.stiffness * (sum[a] - n as f64 * x[(i, a)]);
            let force = spring - p.damping * x[(i, 2 + a)] + u.values[(i, a)];
            let acc = force / p.mass - if a == 1 { p.gravity } else { 0.0 };
            let v = x[(i, 2 + a)] + dt * acc;
            next[(i, 2 + a)] = v;
            next[(i, a)] = x[(i, a)] + dt * v;
        }
    }
    if !next.is_finite() {
        return Err(Error::Numerical("spring balls produced a non-finite state".into()));
    }
    Ok(SystemState::new(next))
}

/// Kinetic plus spring potential energy.
pub fn spring_balls_energy(state: &SystemState, config: &EnvConfig) -> f64 {
    let x = &state.values;
    let n = state.num_objects();
    let p = &config.params;
    let mut kinetic = 0.0;
    let mut potential = 0.0;
    for i in 0..n {
        kinetic += 0.5 * p.mass * (x[(i, 2)].powi(2) + x[(i, 3)].powi(2));
        for j in i + 1..n {
            let dx = x[(i, 0)] - x[(j, 0)];
            let dy = x[(i, 1)] - x[(j, 1)];
            potential += 0.5 * p.stiffness * (dx * dx + dy * dy);
        }
    }
    kinetic + potential
}
