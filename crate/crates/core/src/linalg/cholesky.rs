use crate::error::{Error, Result};

use super::DenseMatrix;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: DenseMatrix,
}

impl Cholesky {
    /// Factors `a = L·Lᵀ`, reading only the lower triangle of `a`.
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::dim("cholesky", a.shape(), (n, n)));
        }
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            {
                let lj = l.row(j);
                diag -= lj[..j].iter().map(|v| v * v).sum::<f64>();
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
            }
            let d = diag.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let dot: f64 = {
                    let (li, lj) = (l.row(i), l.row(j));
                    li[..j].iter().zip(&lj[..j]).map(|(x, y)| x * y).sum()
                };
                l[(i, j)] = (a[(i, j)] - dot) / d;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    /// Solves `A·X = B` for every column of `b`.
    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::dim("cholesky solve", (n, n), b.shape()));
        }
        let k = b.cols();
        let l = &self.lower;
        let mut x = b.clone();
        // forward: L·Y = B
        for i in 0..n {
            for p in 0..i {
                let lip = l[(i, p)];
                if lip != 0.0 {
                    for c in 0..k {
                        let v = x[(p, c)];
                        x[(i, c)] -= lip * v;
                    }
                }
            }
            let d = l[(i, i)];
            for c in 0..k {
                x[(i, c)] /= d;
            }
        }
        // backward: Lᵀ·X = Y
        for i in (0..n).rev() {
            for p in i + 1..n {
                let lpi = l[(p, i)];
                if lpi != 0.0 {
                    for c in 0..k {
                        let v = x[(p, c)];
                        x[(i, c)] -= lpi * v;
                    }
                }
            }
            let d = l[(i, i)];
            for c in 0..k {
                x[(i, c)] /= d;
            }
        }
        Ok(x)
    }
}

/// Solves `a·x = b` for symmetric positive definite `a`.
pub fn spd_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    Cholesky::factor(a)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let a = DenseMatrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let b = DenseMatrix::from_rows(&[[2.0], [1.0]]);
        let x = spd_solve(&a, &b).unwrap();
        let r = a.matmul(&x).unwrap().sub(&b).unwrap();
        assert!(r.max_abs() < 1e-14);
    }

    #[test]
    fn reports_failing_pivot() {
        let a = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]);
        match Cholesky::factor(&a) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
