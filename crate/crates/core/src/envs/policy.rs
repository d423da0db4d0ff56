use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ControlInput, EnvConfig, SystemState};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Supplies the control applied at step `t`.
pub trait ControlSource {
    fn control(&mut self, t: usize, state: &SystemState, config: &EnvConfig) -> Result<ControlInput>;
}

pub struct ZeroPolicy;

impl ControlSource for ZeroPolicy {
    fn control(&mut self, _t: usize, _state: &SystemState, config: &EnvConfig) -> Result<ControlInput> {
        Ok(config.zero_control())
    }
}

pub struct ConstantPolicy {
    values: DenseMatrix,
}

impl ConstantPolicy {
    pub fn new(values: DenseMatrix) -> Self {
        Self { values }
    }
}

impl ControlSource for ConstantPolicy {
    fn control(&mut self, _t: usize, _state: &SystemState, _config: &EnvConfig) -> Result<ControlInput> {
        Ok(ControlInput::new(self.values.clone()))
    }
}

/// Plays back a fixed control sequence.
pub struct ReplayPolicy {
    controls: Vec<ControlInput>,
}

impl ReplayPolicy {
    pub fn new(controls: Vec<ControlInput>) -> Self {
        Self { controls }
    }
}

impl ControlSource for ReplayPolicy {
    fn control(&mut self, t: usize, _state: &SystemState, _config: &EnvConfig) -> Result<ControlInput> {
        self.controls
            .get(t)
            .cloned()
            .ok_or_else(|| Error::Argument(format!("replay has no control for step {t}")))
    }
}

/// Exploration noise: i.i.d. uniform draws in `[-bound, bound]` passed
/// through `u_t = 0.8 u_{t−1} + 0.2 ξ_t`.
pub struct RandomExploration {
    bound: f64,
    momentum: f64,
    rng: ChaCha8Rng,
    last: Option<DenseMatrix>,
}

impl RandomExploration {
    pub const MOMENTUM: f64 = 0.8;

    pub fn new(bound: f64, seed: u64) -> Self {
        Self {
            bound,
            momentum: Self::MOMENTUM,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last: None,
        }
    }
}

impl ControlSource for RandomExploration {
    fn control(&mut self, _t: usize, _state: &SystemState, config: &EnvConfig) -> Result<ControlInput> {
        let (n, l) = (config.num_objects, config.action_dim());
        let mask = config.actuation_mask();
        let mut next = DenseMatrix::zeros(n, l);
        for i in 0..n {
            for a in 0..l {
                // draw for every entry so the stream does not depend on the mask
                let xi: f64 = if self.bound > 0.0 {
                    self.rng.random_range(-self.bound..=self.bound)
                } else {
                    0.0
                };
                if mask[i] {
                    let prev = self.last.as_ref().map_or(0.0, |m| m[(i, a)]);
                    next[(i, a)] = self.momentum * prev + (1.0 - self.momentum) * xi;
                }
            }
        }
        self.last = Some(next.clone());
        Ok(ControlInput::new(next))
    }
}
