//! Hanging mass-spring rope. Mass 0 is the top mass: its height is pinned and
//! the control is a horizontal force on it. Neighbouring masses are joined by
//! structural springs, masses two apart by weaker bending springs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ControlInput, EnvConfig, SystemState};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Rest length of a structural spring, m.
pub const ROPE_SEGMENT: f64 = 0.25;
/// Bending spring stiffness relative to the structural stiffness.
pub const ROPE_BEND_RATIO: f64 = 0.5;

pub(super) fn initial_state(config: &EnvConfig, rng: &mut ChaCha8Rng) -> SystemState {
    let n = config.num_objects;
    let p = &config.params;
    let mut values = DenseMatrix::zeros(n, 4);
    let mut y = 0.0;
    for i in 1..n {
        // structural springs carry the weight of everything below them
        let load = (n - i) as f64 * p.mass * p.gravity;
        y -= ROPE_SEGMENT + load / p.stiffness;
        values[(i, 0)] = rng.random_range(-0.03..0.03);
        values[(i, 1)] = y;
    }
    SystemState::new(values)
}

fn spring_force(x: &DenseMatrix, a: usize, b: usize, rest: f64, k: f64, forces: &mut [[f64; 2]]) {
    let dx = x[(b, 0)] - x[(a, 0)];
    let dy = x[(b, 1)] - x[(a, 1)];
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return;
    }
    let f = k * (len - rest) / len;
    forces[a][0] += f * dx;
    forces[a][1] += f * dy;
    forces[b][0] -= f * dx;
    forces[b][1] -= f * dy;
}

/// One semi-implicit Euler step of the rope.
pub fn rope_step(state: &SystemState, u: &ControlInput, config: &EnvConfig) -> Result<SystemState> {
    let n = state.num_objects();
    let p = &config.params;
    let dt = config.dt;
    let x = &state.values;
    let mut forces = vec![[0.0f64; 2]; n];
    for i in 0..n {
        if i + 1 < n {
            spring_force(x, i, i + 1, ROPE_SEGMENT, p.stiffness, &mut forces);
        }
        if i + 2 < n {
            spring_force(x, i, i + 2, 2.0 * ROPE_SEGMENT, ROPE_BEND_RATIO * p.stiffness, &mut forces);
        }
    }
    let mut next = x.clone();
    for (i, f) in forces.iter().enumerate() {
        let (vx, vy) = (x[(i, 2)], x[(i, 3)]);
        if i == 0 {
            let ax = (f[0] + u.values[(0, 0)] - p.damping * vx) / p.mass;
            let nvx = vx + dt * ax;
            next[(0, 2)] = nvx;
            next[(0, 3)] = 0.0;
            next[(0, 0)] = x[(0, 0)] + dt * nvx;
            next[(0, 1)] = x[(0, 1)];
        } else {
            let ax = (f[0] - p.damping * vx) / p.mass;
            let ay = (f[1] - p.damping * vy) / p.mass - p.gravity;
            let (nvx, nvy) = (vx + dt * ax, vy + dt * ay);
            next[(i, 2)] = nvx;
            next[(i, 3)] = nvy;
            next[(i, 0)] = x[(i, 0)] + dt * nvx;
            next[(i, 1)] = x[(i, 1)] + dt * nvy;
        }
    }
    if !next.is_finite() {
        return Err(Error::Numerical("rope produced a non-finite state".into()));
    }
    Ok(SystemState::new(next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{rollout_env, rollout_from, ConstantPolicy, RandomExploration};

    fn vertical_rest(n: usize) -> SystemState {
        SystemState::new(DenseMatrix::from_fn(n, 4, |i, c| {
            if c == 1 {
                -(i as f64) * ROPE_SEGMENT
            } else {
                0.0
            }
        }))
    }

    #[test]
    fn rest_without_gravity_is_equilibrium() {
        let mut cfg = EnvConfig::rope(6, 0);
        cfg.params.gravity = 0.0;
        let s = vertical_rest(6);
        let next = rope_step(&s, &cfg.zero_control(), &cfg).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn top_height_is_pinned() {
        let cfg = EnvConfig::rope(7, 3);
        let mut policy = RandomExploration::new(1.0, 9);
        let traj = rollout_env(&cfg, &mut policy, 100).unwrap();
        let y0 = traj.states[0].values[(0, 1)];
        assert!(traj.states.iter().all(|s| s.values[(0, 1)].to_bits() == y0.to_bits()));
    }

    /// Straight-line restatement of the rope update used as a reference.
    fn reference_step(x: &[[f64; 4]], force: f64, cfg: &EnvConfig) -> Vec<[f64; 4]> {
        let n = x.len();
        let p = cfg.params;
        let mut f = vec![[0.0; 2]; n];
        let mut add = |a: usize, b: usize, rest: f64, k: f64| {
            let d = [x[b][0] - x[a][0], x[b][1] - x[a][1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let s = k * (len - rest) / len;
            f[a][0] += s * d[0];
            f[a][1] += s * d[1];
            f[b][0] -= s * d[0];
            f[b][1] -= s * d[1];
        };
        for i in 0..n {
            if i + 1 < n {
                add(i, i + 1, ROPE_SEGMENT, p.stiffness);
            }
            if i + 2 < n {
                add(i, i + 2, 2.0 * ROPE_SEGMENT, 0.5 * p.stiffness);
            }
        }
        let mut out = x.to_vec();
        for i in 0..n {
            let ext = if i == 0 { force } else { 0.0 };
            let vx = x[i][2] + cfg.dt * (f[i][0] + ext - p.damping * x[i][2]) / p.mass;
            let vy = if i == 0 {
                0.0
            } else {
                x[i][3] + cfg.dt * ((f[i][1] - p.damping * x[i][3]) / p.mass - p.gravity)
            };
            out[i] = [x[i][0] + cfg.dt * vx, x[i][1] + cfg.dt * vy, vx, vy];
        }
        out
    }

    #[test]
    fn constant_push_moves_top_right_monotonically() {
        let cfg = EnvConfig::rope(6, 4);
        let mut policy = ConstantPolicy::new(cfg.zero_control().values.clone().map(|_| 2.0));
        let mut start = cfg.initial_state().unwrap();
        for i in 0..6 {
            start.values[(i, 0)] = 0.0;
        }
        let traj = rollout_from(&cfg, start, &mut policy, 101).unwrap();
        for w in traj.states.windows(2) {
            assert!(w[1].values[(0, 0)] > w[0].values[(0, 0)]);
        }
        let mut reference: Vec<[f64; 4]> = (0..6)
            .map(|i| {
                let r = traj.states[0].object(i);
                [r[0], r[1], r[2], r[3]]
            })
            .collect();
        for s in &traj.states[1..] {
            reference = reference_step(&reference, 2.0, &cfg);
            for (i, r) in reference.iter().enumerate() {
                for c in 0..4 {
                    assert!((s.values[(i, c)] - r[c]).abs() < 1e-12);
                }
            }
        }
    }
}
