//! Control synthesis over identified embedding dynamics.
//!
//! The open-loop problem minimizes `‖g^T − g*‖² + λ Σ_t ‖u^t‖²` subject to
//! `g^{t+1} = K g^t + L u^t`. Eliminating the states gives
//! `g^T = K^{T−1} g¹ + M U` with `M = [K^{T−2}L, …, KL, L]`, and the optimum
//! solves `(MᵀM + λI) U = Mᵀ(g* − K^{T−1} g¹)`. Columns of non-actuated objects
//! are removed from `M` before solving.

use crate::envs::{ControlInput, EnvConfig, SystemState, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{spd_solve, DenseMatrix};
use crate::sysid::BlockDynamics;

/// Default action penalty `λ`.
pub const DEFAULT_ACTION_PENALTY: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ControlProblem<'a> {
    pub dynamics: &'a BlockDynamics,
    /// `N × m`
    pub g_start: DenseMatrix,
    /// `N × m`
    pub g_goal: DenseMatrix,
    /// Number of states `T`; the plan has `T − 1` controls.
    pub horizon: usize,
    pub action_penalty: f64,
    pub actuation_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSolution {
    /// `T − 1` controls, each `N × l`, zero on non-actuated rows.
    pub controls: Vec<DenseMatrix>,
    pub predicted_terminal: DenseMatrix,
    pub objective_value: f64,
}

/// The condensed problem `min ‖M U + c − g*‖² + λ‖U‖²` over the free controls.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub m: DenseMatrix,
    /// `K^{T−1} g¹`, flattened.
    pub free_response: DenseMatrix,
    /// `g*`, flattened.
    pub goal: DenseMatrix,
    pub penalty: f64,
    /// `(step, object, action)` of every column of `m`.
    pub columns: Vec<(usize, usize, usize)>,
    steps: usize,
    objects: usize,
    action_dim: usize,
}

fn flatten(x: &DenseMatrix) -> Result<DenseMatrix> {
    x.clone().reshape(x.len(), 1)
}

impl<'a> ControlProblem<'a> {
    fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::Argument(format!("horizon must cover at least one control, got T = {}", self.horizon)));
        }
        if !(self.action_penalty.is_finite() && self.action_penalty >= 0.0) {
            return Err(Error::Argument(format!("action penalty must be ≥ 0, got {}", self.action_penalty)));
        }
        if self.g_start.shape() != self.g_goal.shape() {
            return Err(Error::dim("control goal", self.g_start.shape(), self.g_goal.shape()));
        }
        if self.actuation_mask.len() != self.g_start.rows() {
            return Err(Error::dim(
                "actuation mask",
                (self.actuation_mask.len(), 1),
                (self.g_start.rows(), 1),
            ));
        }
        Ok(())
    }

    pub fn condense(&self) -> Result<CondensedQp> {
        self.validate()?;
        let (k, l) = self.dynamics.materialize()?;
        let n = self.actuation_mask.len();
        if k.rows() != self.g_start.len() {
            return Err(Error::dim("control dynamics", k.shape(), (self.g_start.len(), self.g_start.len())));
        }
        if l.cols() % n != 0 {
            return Err(Error::dim("control matrix", l.shape(), (k.rows(), n)));
        }
        let action_dim = l.cols() / n;
        let controls = self.horizon - 1;
        let active: Vec<usize> = (0..n).filter(|&j| self.actuation_mask[j]).collect();
        let mut columns = Vec::new();
        for s in 0..controls {
            for &j in &active {
                for a in 0..action_dim {
                    columns.push((s, j, a));
                }
            }
        }
        let mut m = DenseMatrix::zeros(k.rows(), columns.len());
        // power = K^{T−2−s} L, built from the last step backwards
        let mut power = l.clone();
        let per_step = active.len() * action_dim;
        for s in (0..controls).rev() {
            for (c, &j) in active.iter().enumerate() {
                let src = power.block(0, j * action_dim, k.rows(), action_dim);
                m.set_block(0, s * per_step + c * action_dim, &src);
            }
            if s > 0 {
                power = k.matmul(&power)?;
            }
        }
        let mut free = flatten(&self.g_start)?;
        for _ in 0..controls {
            free = k.matmul(&free)?;
        }
        Ok(CondensedQp {
            m,
            free_response: free,
            goal: flatten(&self.g_goal)?,
            penalty: self.action_penalty,
            columns,
            steps: controls,
            objects: n,
            action_dim,
        })
    }
}

impl CondensedQp {
    pub fn objective(&self, u: &DenseMatrix) -> Result<f64> {
        let r = self.m.matmul(u)?.add(&self.free_response)?.sub(&self.goal)?;
        Ok(r.data().iter().map(|v| v * v).sum::<f64>() + self.penalty * u.data().iter().map(|v| v * v).sum::<f64>())
    }

    /// `2Mᵀ(MU + c − g*) + 2λU`
    pub fn gradient(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        let r = self.m.matmul(u)?.add(&self.free_response)?.sub(&self.goal)?;
        Ok(self.m.matmul_tn(&r)?.add(&u.scale(self.penalty))?.scale(2.0))
    }

    pub fn solve(&self) -> Result<DenseMatrix> {
        let mut lhs = self.m.matmul_tn(&self.m)?;
        for i in 0..lhs.rows() {
            lhs[(i, i)] += self.penalty;
        }
        let rhs = self.m.matmul_tn(&self.goal.sub(&self.free_response)?)?;
        spd_solve(&lhs, &rhs).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot, value } => Error::Numerical(format!(
                "control normal equations are singular (pivot {pivot} = {value:e}); use an action penalty λ > 0"
            )),
            other => other,
        })
    }

    /// Spreads the stacked free controls into per-step `N × l` inputs.
    pub fn unstack(&self, u: &DenseMatrix) -> Vec<DenseMatrix> {
        let mut out = vec![DenseMatrix::zeros(self.objects, self.action_dim); self.steps];
        for (k, &(s, j, a)) in self.columns.iter().enumerate() {
            out[s][(j, a)] = u[(k, 0)];
        }
        out
    }
}

/// Terminal-cost objective of `controls` evaluated by rolling the dynamics out.
pub fn objective(
    dynamics: &BlockDynamics,
    g_start: &DenseMatrix,
    g_goal: &DenseMatrix,
    controls: &[DenseMatrix],
    penalty: f64,
) -> Result<(f64, DenseMatrix)> {
    let roll = dynamics.rollout(g_start, controls)?;
    let terminal = roll.last().expect("rollout includes the start").clone();
    let miss = terminal.sub(g_goal)?;
    let effort: f64 = controls.iter().flat_map(|u| u.data()).map(|v| v * v).sum();
    let value = miss.data().iter().map(|v| v * v).sum::<f64>() + penalty * effort;
    Ok((value, terminal))
}

pub fn solve_open_loop(problem: &ControlProblem) -> Result<ControlSolution> {
    let qp = problem.condense()?;
    let stacked = if qp.columns.is_empty() {
        DenseMatrix::zeros(0, 1)
    } else {
        qp.solve()?
    };
    let controls = qp.unstack(&stacked);
    let (objective_value, predicted_terminal) = objective(
        problem.dynamics,
        &problem.g_start,
        &problem.g_goal,
        &controls,
        problem.action_penalty,
    )?;
    Ok(ControlSolution {
        controls,
        predicted_terminal,
        objective_value,
    })
}

/// Closed-loop run: re-plan from the encoded true state every `period` steps.
#[derive(Debug, Clone)]
pub struct MpcOutcome {
    pub trajectory: Trajectory,
    pub solutions: Vec<ControlSolution>,
    /// Step index at which each solution was computed.
    pub solve_steps: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcSettings {
    /// Number of controls applied in total.
    pub steps: usize,
    /// Feedback period `τ`.
    pub period: usize,
    pub action_penalty: f64,
}

pub fn run_mpc(
    env: &EnvConfig,
    start: SystemState,
    goal: &SystemState,
    encode: &mut dyn FnMut(&SystemState) -> Result<DenseMatrix>,
    dynamics: &BlockDynamics,
    settings: MpcSettings,
) -> Result<MpcOutcome> {
    if settings.period == 0 || settings.steps == 0 {
        return Err(Error::Argument("MPC needs at least one step and a period ≥ 1".into()));
    }
    let g_goal = encode(goal)?;
    let mask = env.actuation_mask();
    let mut states = vec![start];
    let mut controls: Vec<ControlInput> = Vec::new();
    let mut solutions = Vec::new();
    let mut solve_steps = Vec::new();
    let mut k = 0;
    while k < settings.steps {
        let current = &states[states.len() - 1];
        let problem = ControlProblem {
            dynamics,
            g_start: encode(current)?,
            g_goal: g_goal.clone(),
            horizon: settings.steps - k + 1,
            action_penalty: settings.action_penalty,
            actuation_mask: mask.clone(),
        };
        let solution = solve_open_loop(&problem)?;
        let apply = settings.period.min(settings.steps - k);
        for u in &solution.controls[..apply] {
            let u = ControlInput::new(u.clone()).masked(&mask);
            let next = env
                .step(&states[states.len() - 1], &u)
                .map_err(|e| match e {
                    Error::Numerical(_) => Error::Instability { step: k + controls.len() },
                    other => other,
                })?;
            if !next.is_finite() {
                return Err(Error::Instability { step: controls.len() });
            }
            states.push(next);
            controls.push(u);
        }
        solutions.push(solution);
        solve_steps.push(k);
        k += apply;
    }
    Ok(MpcOutcome {
        trajectory: Trajectory {
            config: env.clone(),
            states,
            controls,
        },
        solutions,
        solve_steps,
    })
}

/// Mean over all `N·d` entries of the squared difference.
pub fn control_error(achieved: &SystemState, goal: &SystemState) -> Result<f64> {
    let diff = achieved.values.sub(&goal.values)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len().max(1) as f64)
}

/// How far applied controls exceed the exploration bound.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Saturation {
    pub max_abs: f64,
    /// Fraction of actuated entries with `|u| > bound`.
    pub over_bound: f64,
}

pub fn saturation(controls: &[ControlInput], mask: &[bool], bound: f64) -> Saturation {
    let mut max_abs: f64 = 0.0;
    let (mut total, mut over) = (0usize, 0usize);
    for u in controls {
        for (i, &on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            for &v in u.values.row(i) {
                max_abs = max_abs.max(v.abs());
                total += 1;
                over += usize::from(v.abs() > bound);
            }
        }
    }
    Saturation {
        max_abs,
        over_bound: if total == 0 { 0.0 } else { over as f64 / total as f64 },
    }
}
