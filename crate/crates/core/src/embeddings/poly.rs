use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Largest supported monomial degree.
pub const MAX_POLY_ORDER: usize = 3;

/// Variable-index tuples of every monomial with total degree in
/// `1..=max_order`, grouped by degree and lexicographic within a degree.
/// The degree-1 block therefore comes first and equals the state itself.
pub fn poly_exponents(dim: usize, max_order: usize) -> Result<Vec<Vec<usize>>> {
    if !(1..=MAX_POLY_ORDER).contains(&max_order) {
        return Err(Error::Argument(format!(
            "polynomial order must lie in 1..={MAX_POLY_ORDER}, got {max_order}"
        )));
    }
    let mut out = Vec::new();
    for degree in 1..=max_order {
        let mut idx = vec![0usize; degree];
        loop {
            out.push(idx.clone());
            // next nondecreasing tuple
            let Some(k) = (0..degree).rev().find(|&k| idx[k] + 1 < dim) else { break };
            let v = idx[k] + 1;
            for slot in &mut idx[k..] {
                *slot = v;
            }
        }
    }
    Ok(out)
}

/// Per-object monomials of the object's own state entries.
pub fn poly_basis(states: &DenseMatrix, max_order: usize) -> Result<DenseMatrix> {
    let terms = poly_exponents(states.cols(), max_order)?;
    Ok(DenseMatrix::from_fn(states.rows(), terms.len(), |r, f| {
        terms[f].iter().map(|&c| states[(r, c)]).product()
    }))
}

/// Number of features [`poly_basis`] produces.
pub fn poly_width(dim: usize, max_order: usize) -> Result<usize> {
    Ok(poly_exponents(dim, max_order)?.len())
}

/// Reads states back out of polynomial features (the degree-1 block).
pub fn poly_project(features: &DenseMatrix, dim: usize) -> Result<DenseMatrix> {
    if features.cols() < dim {
        return Err(Error::dim("poly_project", features.shape(), (features.rows(), dim)));
    }
    Ok(features.block(0, 0, features.rows(), dim))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_counts() {
        assert_eq!(poly_width(4, 1).unwrap(), 4);
        assert_eq!(poly_width(4, 2).unwrap(), 14);
        assert_eq!(poly_width(4, 3).unwrap(), 34);
    }

    #[test]
    fn order_outside_range_is_rejected() {
        assert!(poly_width(4, 0).is_err());
        assert!(poly_width(4, 4).is_err());
    }

    #[test]
    fn degree_one_block_is_the_state() {
        let x = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [0.5, -1.0, 0.0, 2.0]]);
        let f = poly_basis(&x, 3).unwrap();
        assert_eq!(poly_project(&f, 4).unwrap(), x);
        // x0², x0·x1 follow the linear terms
        assert_eq!(f[(0, 4)], 1.0);
        assert_eq!(f[(0, 5)], 2.0);
        assert_eq!(f[(1, 33)], 8.0);
    }

    #[test]
    fn zero_state_gives_zero_features() {
        let f = poly_basis(&DenseMatrix::zeros(3, 4), 3).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }
}
