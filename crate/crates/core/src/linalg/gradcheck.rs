//! Central finite-difference checks of reverse-mode gradients.

use super::{DenseMatrix, Tape, Var};
use crate::error::{Error, Result};

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input, row, col)` of the worst entry.
    pub worst: (usize, usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h`.
///
/// Entry errors are `|a − n| / max(|a|, |n|, 1e-3·s)` where `s` is the
/// largest analytic entry over all inputs, so entries that are negligible
/// next to the rest are judged on an absolute scale.
pub fn check_gradients<F>(inputs: &[DenseMatrix], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[DenseMatrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.var(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.var(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::dim("gradient check output", tape.shape(out), (1, 1)));
    }
    let grads = tape.backward(out)?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let analytic: Vec<DenseMatrix> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let scale = analytic.iter().map(|a| a.max_abs()).fold(1e-12, f64::max);
    let mut probe: Vec<DenseMatrix> = inputs.to_vec();
    for (k, analytic) in analytic.iter().enumerate() {
        for r in 0..inputs[k].rows() {
            for c in 0..inputs[k].cols() {
                let x0 = inputs[k][(r, c)];
                probe[k][(r, c)] = x0 + h;
                let up = eval(&probe)?;
                probe[k][(r, c)] = x0 - h;
                let down = eval(&probe)?;
                probe[k][(r, c)] = x0;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[(r, c)];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3 * scale);
                if !(err <= report.max_rel_err) {
                    report = GradCheck {
                        max_rel_err: err,
                        worst: (k, r, c),
                        analytic: a,
                        numeric,
                    };
                }
            }
        }
    }
    Ok(report)
}
