use std::rc::Rc;

use super::{BlockDynamics, Design, Ridge};
use crate::error::{Error, Result};
use crate::linalg::{spd_solve, AggregatePlan, DenseMatrix, Tape, Var};

/// Dynamics fitted on a tape. `theta` stacks the shared blocks as in
/// [`BlockDynamics::theta`].
#[derive(Debug, Clone)]
pub struct TapeDynamics {
    pub design: Design,
    pub theta: Var,
    /// Effective ridge used in the solve.
    pub ridge: f64,
    fit: Option<(Var, Var)>,
    step_plan: Rc<AggregatePlan>,
}

fn reduced_controls(design: &Design, controls: &[DenseMatrix]) -> Result<DenseMatrix> {
    let reduced: Vec<DenseMatrix> = controls.iter().map(|u| design.reduce(u)).collect::<Result<_>>()?;
    let refs: Vec<&DenseMatrix> = reduced.iter().collect();
    let stacked = DenseMatrix::vcat(&refs)?;
    if stacked.cols() != design.l || stacked.rows() != controls.len() * design.rows() {
        return Err(Error::dim(
            "sysid controls",
            stacked.shape(),
            (controls.len() * design.rows(), design.l),
        ));
    }
    Ok(stacked)
}

/// Fits the dynamics of `design` to embeddings `g` stacked as `(T·N) × m`.
/// With `differentiate = false` the solution enters the tape as a constant.
pub fn identify_on_tape(
    tape: &mut Tape,
    design: &Design,
    g: Var,
    controls: &[DenseMatrix],
    ridge: Ridge,
    differentiate: bool,
) -> Result<TapeDynamics> {
    let steps = controls.len() + 1;
    let n = design.objects;
    let (rows, cols) = tape.shape(g);
    if rows != steps * n || cols * n != design.m * design.rows() {
        return Err(Error::dim("sysid embeddings", (rows, cols), (steps * n, design.m)));
    }
    let reduced = if design.rows() == n { g } else { tape.reshape(g, steps, design.m)? };
    let r = design.rows();
    let prev = tape.slice_rows(reduced, 0, (steps - 1) * r)?;
    let targets = tape.slice_rows(reduced, r, steps * r)?;
    let plan = Rc::new(design.plan(steps - 1));
    let s = tape.aggregate(prev, plan.clone())?;
    let a = tape.constant(plan.apply(&reduced_controls(design, controls)?)?);
    let features = tape.concat_cols(&[s, a])?;

    let z = tape.value(features);
    let mut gram = z.matmul_tn(z)?;
    let lambda = ridge.resolve(&gram)?;
    let theta = if differentiate {
        let zz = tape.matmul_tn(features, features)?;
        let p = gram.rows();
        let reg = match ridge {
            // λ = r·tr(ZᵀZ)/p, differentiated along with the rest
            Ridge::Relative(r) if gram.trace() > 0.0 => {
                let sq = tape.hadamard(features, features)?;
                let tr = tape.sum(sq);
                let lam = tape.scale(tr, r / p as f64);
                let eye = tape.constant(DenseMatrix::identity(p).reshape(p * p, 1)?);
                let spread = tape.matmul(eye, lam)?;
                tape.reshape(spread, p, p)?
            }
            _ => tape.constant(DenseMatrix::identity(p).scale(lambda)),
        };
        let lhs = tape.add(zz, reg)?;
        let rhs = tape.matmul_tn(features, targets)?;
        tape.spd_solve(lhs, rhs)?
    } else {
        for i in 0..gram.rows() {
            gram[(i, i)] += lambda;
        }
        let rhs = tape.value(features).matmul_tn(tape.value(targets))?;
        let solved = spd_solve(&gram, &rhs)?;
        tape.constant(solved)
    };
    Ok(TapeDynamics {
        design: design.clone(),
        theta,
        ridge: lambda,
        fit: Some((features, targets)),
        step_plan: Rc::new(design.plan(1)),
    })
}

impl TapeDynamics {
    /// Wraps already identified dynamics as a constant on `tape`.
    pub fn from_dynamics(tape: &mut Tape, dynamics: &BlockDynamics, objects: usize) -> Result<Self> {
        let design = dynamics.design_for(objects)?;
        let theta = tape.constant(dynamics.theta());
        Ok(Self {
            step_plan: Rc::new(design.plan(1)),
            design,
            theta,
            ridge: 0.0,
            fit: None,
        })
    }

    /// Current values as plain dynamics.
    pub fn to_dynamics(&self, tape: &Tape) -> BlockDynamics {
        self.design.unpack(tape.value(self.theta))
    }

    /// `‖ZΘ − Y‖²_F` of the fit.
    pub fn residual(&self, tape: &mut Tape) -> Result<Var> {
        let (features, targets) = self
            .fit
            .ok_or_else(|| Error::Argument("supplied dynamics carry no fit residual".into()))?;
        let pred = tape.matmul(features, self.theta)?;
        let norm = tape.l2_diff(pred, targets)?;
        tape.hadamard(norm, norm)
    }

    /// Rolls out from `g1` (`N × m`) under `controls`; returns all
    /// `controls.len() + 1` embeddings stacked as `(T·N) × m`.
    pub fn rollout(&self, tape: &mut Tape, g1: Var, controls: &[DenseMatrix]) -> Result<Var> {
        let design = &self.design;
        let n = design.objects;
        let (rows, cols) = tape.shape(g1);
        if rows != n || cols * n != design.m * design.rows() {
            return Err(Error::dim("rollout start", (rows, cols), (n, design.m)));
        }
        let mut cur = if design.rows() == n { g1 } else { tape.reshape(g1, 1, design.m)? };
        let mut out = vec![cur];
        for u in controls {
            let a = self.step_plan.apply(&design.reduce(u)?)?;
            let a = tape.constant(a);
            let s = tape.aggregate(cur, self.step_plan.clone())?;
            let z = tape.concat_cols(&[s, a])?;
            cur = tape.matmul(z, self.theta)?;
            out.push(cur);
        }
        let stacked = tape.concat_rows(&out)?;
        if design.rows() == n {
            Ok(stacked)
        } else {
            tape.reshape(stacked, (controls.len() + 1) * n, cols)
        }
    }
}
