use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Per-dimension standardization `(x − mean) / std`, shared by all objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Dimensions whose spread falls below this are left unscaled.
const MIN_STD: f64 = 1e-8;

impl Normalizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::dim("normalizer", (mean.len(), 1), (std.len(), 1)));
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("normalizer needs finite means and positive spreads".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over every row of every matrix.
    pub fn fit<'a>(dim: usize, samples: impl IntoIterator<Item = &'a DenseMatrix>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut rows = Vec::new();
        for m in samples {
            if m.cols() != dim {
                return Err(Error::dim("normalizer fit", m.shape(), (m.rows(), dim)));
            }
            for r in 0..m.rows() {
                for (c, v) in m.row(r).iter().enumerate() {
                    sum[c] += v;
                }
            }
            count += m.rows();
            rows.push(m);
        }
        if count == 0 {
            return Err(Error::Argument("cannot fit a normalizer on no data".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for m in rows {
            for r in 0..m.rows() {
                for (c, v) in m.row(r).iter().enumerate() {
                    sq[c] += (v - mean[c]).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd < MIN_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check(x)?;
        Ok(DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| (x[(r, c)] - self.mean[c]) / self.std[c]))
    }

    pub fn invert(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        self.check(z)?;
        Ok(DenseMatrix::from_fn(z.rows(), z.cols(), |r, c| z[(r, c)] * self.std[c] + self.mean[c]))
    }

    fn check(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::dim("normalize", x.shape(), (x.rows(), self.dim())));
        }
        Ok(())
    }
}
