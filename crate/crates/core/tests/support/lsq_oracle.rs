//! Brute-force constrained least squares used as the oracle for structured
//! system identification.
#![allow(dead_code)]

use ckpm_core::linalg::DenseMatrix;
use ckpm_core::sysid::EmbeddingSequence;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn sequence(n: usize, m: usize, l: usize, steps: usize, rng: &mut ChaCha8Rng) -> EmbeddingSequence {
    let g = (0..steps).map(|_| random(n, m, rng)).collect();
    let u = (1..steps).map(|_| random(n, l, rng)).collect();
    EmbeddingSequence::new(g, u).unwrap()
}

/// Dense Gauss-Jordan elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for c in col..n {
                        a[r][c] -= f * a[col][c];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

/// Brute-force constrained least squares. Every entry of the full `K`, `L`
/// is written as a linear function of the shared unknowns, one regression row
/// per predicted scalar, and the ridge normal equations are solved densely.
pub fn oracle(sigma: &[Vec<usize>], h: usize, seq: &EmbeddingSequence, lambda: f64) -> (Vec<DenseMatrix>, Vec<DenseMatrix>) {
    let (n, m, l) = (seq.num_objects(), seq.m(), seq.l());
    let k_index = |c: usize, a: usize, b: usize| (c * m + a) * m + b;
    let l_index = |c: usize, a: usize, b: usize| h * m * m + (c * m + a) * l + b;
    let p = h * m * (m + l);
    let mut ata = vec![vec![0.0; p]; p];
    let mut aty = vec![0.0; p];
    for t in 0..seq.transitions() {
        let (g, u, next) = (&seq.embeddings[t], &seq.controls[t], &seq.embeddings[t + 1]);
        for i in 0..n {
            for a in 0..m {
                let mut row = vec![0.0; p];
                for j in 0..n {
                    let c = sigma[i][j];
                    if c == 0 {
                        continue;
                    }
                    for b in 0..m {
                        row[k_index(c - 1, a, b)] += g[(j, b)];
                    }
                    for b in 0..l {
                        row[l_index(c - 1, a, b)] += u[(j, b)];
                    }
                }
                let y = next[(i, a)];
                for r in 0..p {
                    if row[r] == 0.0 {
                        continue;
                    }
                    aty[r] += row[r] * y;
                    for c in 0..p {
                        ata[r][c] += row[r] * row[c];
                    }
                }
            }
        }
    }
    for (r, row) in ata.iter_mut().enumerate() {
        row[r] += lambda;
    }
    let theta = solve_dense(ata, aty);
    let k = (0..h).map(|c| DenseMatrix::from_fn(m, m, |a, b| theta[k_index(c, a, b)])).collect();
    let lb = (0..h).map(|c| DenseMatrix::from_fn(m, l, |a, b| theta[l_index(c, a, b)])).collect();
    (k, lb)
}

/// Random `σ` with an existence pattern symmetric in `(i, j)`.
pub fn random_sigma(n: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut sigma = vec![vec![0; n]; n];
    for i in 0..n {
        sigma[i][i] = rng.random_range(1..=h);
        for j in 0..i {
            if rng.random_bool(0.6) {
                sigma[i][j] = rng.random_range(1..=h);
                sigma[j][i] = rng.random_range(1..=h);
            }
        }
    }
    sigma
}

pub fn frobenius_gap(a: &[DenseMatrix], b: &[DenseMatrix]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.sub(y).unwrap().data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
