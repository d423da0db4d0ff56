use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Tape, Var};

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<DenseMatrix>,
}

impl Mlp {
    /// `sizes = [input, hidden…, output]`; weights and biases are drawn from
    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0].max(1) as f64).sqrt();
            weights.push(DenseMatrix::from_fn(w[0], w[1], |_, _| rng.random_range(-bound..bound)));
            biases.push(DenseMatrix::from_fn(1, w[1], |_, _| rng.random_range(-bound..bound)));
        }
        Self { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].cols()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(DenseMatrix::len).sum()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = add_bias(&h.matmul(w)?, b)?;
            if k < last {
                h = h.map(relu);
            }
        }
        Ok(h)
    }

    /// Same computation recorded on `tape`; `params` holds `[w0, b0, w1, b1, …]`.
    pub fn forward_tape(tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let layers = params.len() / 2;
        let mut h = x;
        for k in 0..layers {
            let z = tape.matmul(h, params[2 * k])?;
            h = tape.add_row_broadcast(z, params[2 * k + 1])?;
            if k + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn add_bias(x: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if b.rows() != 1 || b.cols() != x.cols() {
        return Err(Error::dim("add_bias", x.shape(), b.shape()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (o, v) in out.row_mut(r).iter_mut().zip(b.row(0)) {
            *o += v;
        }
    }
    Ok(out)
}
