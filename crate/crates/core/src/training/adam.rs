use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub settings: AdamSettings,
    pub first: Vec<DenseMatrix>,
    pub second: Vec<DenseMatrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(settings: AdamSettings, params: impl IntoIterator<Item = &'a DenseMatrix>) -> Self {
        let first: Vec<DenseMatrix> = params.into_iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect();
        Self {
            settings,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn update(&mut self, params: Vec<&mut DenseMatrix>, grads: &[DenseMatrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Argument(format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        let s = self.settings;
        self.step += 1;
        let c1 = 1.0 - s.beta1.powi(self.step as i32);
        let c2 = 1.0 - s.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[k].shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = s.beta1 * *mi + (1.0 - s.beta1) * gi;
                *vi = s.beta2 * *vi + (1.0 - s.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= s.learning_rate * mhat / (vhat.sqrt() + s.eps);
            }
        }
        Ok(())
    }
}
