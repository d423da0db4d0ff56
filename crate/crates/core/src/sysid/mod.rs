//! Linear dynamics in embedding space, `g^{t+1} = K g^t + L u^t`, identified
//! by ridge-regularized least squares.
//!
//! Block mode ties `K = σ ⊗ K̂`: every block `(i, j)` with `σ[i][j] = c > 0`
//! equals the shared `K̂_c`, and `σ[i][j] = 0` is a hard zero. Fitting reduces
//! to ordinary least squares over per-type neighbour sums
//! `s_{i,c} = Σ_{j: σ[i][j]=c} g_j`. Diag mode is the same with one shared
//! self block and no pairwise blocks. None mode fits full `K`, `L`, handled
//! here as a single object whose embedding is the whole flattened system.

mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::linalg::{spd_solve, AggregatePlan, DenseMatrix};

pub use tape::{identify_on_tape, TapeDynamics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StructureMode {
    Block,
    Diag,
    None,
}

impl std::str::FromStr for StructureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "block" => Ok(Self::Block),
            "diag" => Ok(Self::Diag),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown structure mode {s:?}"))),
        }
    }
}

/// Ridge term added to the normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    Absolute(f64),
    /// Multiple of the mean diagonal of `ZᵀZ`.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

impl Ridge {
    pub fn resolve(&self, gram: &DenseMatrix) -> Result<f64> {
        let r = match *self {
            Ridge::Absolute(r) => r,
            Ridge::Relative(r) => {
                let scale = gram.trace() / gram.rows().max(1) as f64;
                r * if scale > 0.0 { scale } else { 1.0 }
            }
        };
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::Argument(format!("ridge must be finite and non-negative, got {r}")));
        }
        Ok(r)
    }
}

/// Embeddings `g^1..g^T` (each `N × m`) and controls `u^1..u^{T−1}` (each `N × l`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub embeddings: Vec<DenseMatrix>,
    pub controls: Vec<DenseMatrix>,
}

impl EmbeddingSequence {
    pub fn new(embeddings: Vec<DenseMatrix>, controls: Vec<DenseMatrix>) -> Result<Self> {
        let seq = Self { embeddings, controls };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.embeddings.first() else {
            return Err(Error::Argument("empty embedding sequence".into()));
        };
        if self.controls.len() + 1 != self.embeddings.len() {
            return Err(Error::Argument(format!(
                "{} embeddings need {} controls, got {}",
                self.embeddings.len(),
                self.embeddings.len() - 1,
                self.controls.len()
            )));
        }
        if let Some(g) = self.embeddings.iter().find(|g| g.shape() != first.shape()) {
            return Err(Error::dim("embedding sequence", first.shape(), g.shape()));
        }
        if let Some(u) = self.controls.iter().find(|u| u.rows() != first.rows() || u.cols() != self.controls[0].cols()) {
            return Err(Error::dim("control sequence", (first.rows(), self.controls[0].cols()), u.shape()));
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.embeddings[0].rows()
    }

    pub fn m(&self) -> usize {
        self.embeddings[0].cols()
    }

    pub fn l(&self) -> usize {
        self.controls.first().map_or(0, DenseMatrix::cols)
    }

    pub fn transitions(&self) -> usize {
        self.controls.len()
    }
}

/// Shared blocks `K̂_c` (`m × m`) and `L̂_c` (`m × l`) plus the type map that
/// places them. In None mode `σ = [[1]]` and the single block is the full
/// `Nm × Nm` (resp. `Nm × Nl`) matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDynamics {
    pub mode: StructureMode,
    pub h: usize,
    pub m: usize,
    pub l: usize,
    pub sigma: Vec<Vec<usize>>,
    #[serde(rename = "K_hat")]
    pub k_hat: Vec<DenseMatrix>,
    #[serde(rename = "L_hat")]
    pub l_hat: Vec<DenseMatrix>,
    /// Types that never occur in `σ`; their blocks are zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_types: Vec<usize>,
}

/// Type map, block count and per-object widths after reducing a mode to the
/// structured problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub mode: StructureMode,
    pub sigma: Vec<Vec<usize>>,
    pub h: usize,
    pub m: usize,
    pub l: usize,
    /// Objects in the original system.
    pub objects: usize,
}

impl Design {
    /// `sigma`/`h` describe the scene graph; they are only used in Block mode.
    pub fn new(mode: StructureMode, sigma: &[Vec<usize>], h: usize, m: usize, l: usize) -> Result<Self> {
        let n = sigma.len();
        if n == 0 || sigma.iter().any(|r| r.len() != n) {
            return Err(Error::Config("σ must be a nonempty square map".into()));
        }
        Ok(match mode {
            StructureMode::Block => {
                if let Some(&bad) = sigma.iter().flatten().find(|&&c| c > h) {
                    return Err(Error::Config(format!("σ entry {bad} exceeds h = {h}")));
                }
                Self {
                    mode,
                    sigma: sigma.to_vec(),
                    h,
                    m,
                    l,
                    objects: n,
                }
            }
            StructureMode::Diag => Self {
                mode,
                sigma: diag_sigma(n),
                h: 1,
                m,
                l,
                objects: n,
            },
            StructureMode::None => Self {
                mode,
                sigma: vec![vec![1]],
                h: 1,
                m: n * m,
                l: n * l,
                objects: n,
            },
        })
    }

    pub fn for_graph(mode: StructureMode, graph: &SceneGraph, m: usize, l: usize) -> Result<Self> {
        Self::new(mode, graph.sigma(), graph.h(), m, l)
    }

    /// Rows of the reduced problem per time step.
    pub fn rows(&self) -> usize {
        self.sigma.len()
    }

    pub fn features(&self) -> usize {
        self.h * (self.m + self.l)
    }

    /// Object-major `N × w` matrix in reduced layout (flattened for None mode).
    pub fn reduce(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self.mode {
            StructureMode::None => x.clone().reshape(1, x.len()),
            _ => Ok(x.clone()),
        }
    }

    pub fn expand(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self.mode {
            StructureMode::None => x.clone().reshape(self.objects, x.len() / self.objects),
            _ => Ok(x.clone()),
        }
    }

    /// Routes rows `t·N + j` into row `t·N + i`, column block `σ[i][j] − 1`.
    pub fn plan(&self, steps: usize) -> AggregatePlan {
        let n = self.rows();
        let mut plan = AggregatePlan::new(n * steps, self.h);
        for t in 0..steps {
            for (i, row) in self.sigma.iter().enumerate() {
                for (j, &c) in row.iter().enumerate() {
                    if c > 0 {
                        plan.push(t * n + i, t * n + j, c - 1);
                    }
                }
            }
        }
        plan
    }

    pub fn empty_types(&self) -> Vec<usize> {
        let mut seen = vec![false; self.h + 1];
        for &c in self.sigma.iter().flatten() {
            seen[c] = true;
        }
        (1..=self.h).filter(|&c| !seen[c]).collect()
    }

    /// Stacked features `Z` and targets `Y` of one sequence.
    pub fn regression(&self, seq: &EmbeddingSequence) -> Result<(DenseMatrix, DenseMatrix)> {
        seq.validate()?;
        if seq.num_objects() != self.objects {
            return Err(Error::dim(
                "sysid objects",
                (seq.num_objects(), seq.m()),
                (self.objects, seq.m()),
            ));
        }
        let g: Vec<DenseMatrix> = seq.embeddings.iter().map(|g| self.reduce(g)).collect::<Result<_>>()?;
        let u: Vec<DenseMatrix> = seq.controls.iter().map(|u| self.reduce(u)).collect::<Result<_>>()?;
        let steps = seq.transitions();
        let g_refs: Vec<&DenseMatrix> = g.iter().collect();
        let u_refs: Vec<&DenseMatrix> = u.iter().collect();
        let prev = DenseMatrix::vcat(&g_refs[..steps])?;
        let next = DenseMatrix::vcat(&g_refs[1..])?;
        let controls = DenseMatrix::vcat(&u_refs)?;
        if prev.cols() != self.m || controls.cols() != self.l {
            return Err(Error::dim("sysid widths", (prev.cols(), controls.cols()), (self.m, self.l)));
        }
        let plan = self.plan(steps);
        let z = DenseMatrix::hcat(&[&plan.apply(&prev)?, &plan.apply(&controls)?])?;
        Ok((z, next))
    }

    /// Splits the stacked solution `Θ` (`h(m+l) × m`) into blocks.
    pub fn unpack(&self, theta: &DenseMatrix) -> BlockDynamics {
        let (h, m, l) = (self.h, self.m, self.l);
        let k_hat = (0..h).map(|c| theta.block(c * m, 0, m, m).transpose()).collect();
        let l_hat = (0..h).map(|c| theta.block(h * m + c * l, 0, l, m).transpose()).collect();
        BlockDynamics {
            mode: self.mode,
            h,
            m,
            l,
            sigma: self.sigma.clone(),
            k_hat,
            l_hat,
            empty_types: self.empty_types(),
        }
    }
}

fn diag_sigma(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| (0..n).map(|j| usize::from(i == j)).collect()).collect()
}

/// Fits `mode` on all sequences jointly.
pub fn identify(design: &Design, seqs: &[EmbeddingSequence], ridge: Ridge) -> Result<BlockDynamics> {
    if seqs.is_empty() {
        return Err(Error::Argument("system identification needs at least one sequence".into()));
    }
    let p = design.features();
    let mut gram = DenseMatrix::zeros(p, p);
    let mut rhs = DenseMatrix::zeros(p, design.m);
    for seq in seqs {
        let (z, y) = design.regression(seq)?;
        gram.axpy(1.0, &z.matmul_tn(&z)?)?;
        rhs.axpy(1.0, &z.matmul_tn(&y)?)?;
    }
    let lambda = ridge.resolve(&gram)?;
    for i in 0..p {
        gram[(i, i)] += lambda;
    }
    let theta = spd_solve(&gram, &rhs).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, value } => Error::Numerical(format!(
            "normal equations are singular (pivot {pivot} = {value:e}); use a positive ridge"
        )),
        other => other,
    })?;
    Ok(design.unpack(&theta))
}

/// Full `K`, `L` least squares on one sequence.
pub fn identify_unstructured(seq: &EmbeddingSequence, ridge: Ridge) -> Result<BlockDynamics> {
    let design = Design::new(StructureMode::None, &diag_sigma(seq.num_objects()), 1, seq.m(), seq.l())?;
    identify(&design, std::slice::from_ref(seq), ridge)
}

/// Shared-block least squares with the type map of `graph`.
pub fn identify_structured(seq: &EmbeddingSequence, graph: &SceneGraph, ridge: Ridge) -> Result<BlockDynamics> {
    let design = Design::for_graph(StructureMode::Block, graph, seq.m(), seq.l())?;
    identify(&design, std::slice::from_ref(seq), ridge)
}

/// One block shared by every object, no interactions.
pub fn identify_diag(seq: &EmbeddingSequence, ridge: Ridge) -> Result<BlockDynamics> {
    let design = Design::new(StructureMode::Diag, &diag_sigma(seq.num_objects()), 1, seq.m(), seq.l())?;
    identify(&design, std::slice::from_ref(seq), ridge)
}

impl BlockDynamics {
    /// Number of fitted reals.
    pub fn param_count(&self) -> usize {
        self.h * self.m * (self.m + self.l)
    }

    /// Objects the dynamics act on.
    pub fn num_objects(&self) -> usize {
        self.sigma.len()
    }

    /// The reduced problem these dynamics solve for a system of `objects` objects.
    pub fn design_for(&self, objects: usize) -> Result<Design> {
        let fits = match self.mode {
            StructureMode::None => objects > 0 && self.m % objects == 0 && self.l % objects == 0,
            _ => objects == self.sigma.len(),
        };
        if !fits {
            return Err(Error::Config(format!(
                "{:?} dynamics over {} objects cannot drive {objects}",
                self.mode,
                self.sigma.len()
            )));
        }
        Ok(Design {
            objects,
            ..self.design()
        })
    }

    fn design(&self) -> Design {
        let objects = match self.mode {
            StructureMode::None => 0,
            _ => self.sigma.len(),
        };
        Design {
            mode: self.mode,
            sigma: self.sigma.clone(),
            h: self.h,
            m: self.m,
            l: self.l,
            objects,
        }
    }

    /// Moves Block (or Diag) blocks onto another type map, e.g. a larger scene.
    pub fn with_sigma(&self, sigma: Vec<Vec<usize>>) -> Result<Self> {
        let n = sigma.len();
        if sigma.iter().any(|r| r.len() != n) || sigma.iter().flatten().any(|&c| c > self.h) {
            return Err(Error::Config("σ is not square or exceeds the block count".into()));
        }
        let sigma = match self.mode {
            StructureMode::Block => sigma,
            StructureMode::Diag => diag_sigma(n),
            StructureMode::None => {
                return Err(Error::Config("unstructured dynamics are tied to one object count".into()))
            }
        };
        let mut out = self.clone();
        out.empty_types = Design { sigma: sigma.clone(), ..self.design() }.empty_types();
        out.sigma = sigma;
        Ok(out)
    }

    /// Shared blocks stacked as the regression solution `Θ`.
    pub fn theta(&self) -> DenseMatrix {
        let (h, m, l) = (self.h, self.m, self.l);
        let mut theta = DenseMatrix::zeros(h * (m + l), m);
        for c in 0..h {
            theta.set_block(c * m, 0, &self.k_hat[c].transpose());
            theta.set_block(h * m + c * l, 0, &self.l_hat[c].transpose());
        }
        theta
    }

    fn reduce(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self.mode {
            StructureMode::None => x.clone().reshape(1, x.len()),
            _ => Ok(x.clone()),
        }
    }

    /// One step `g' = K g + L u` by per-type aggregation.
    pub fn step(&self, g: &DenseMatrix, u: &DenseMatrix) -> Result<DenseMatrix> {
        self.step_with(&self.theta(), &self.design().plan(1), g, u)
    }

    fn step_with(&self, theta: &DenseMatrix, plan: &AggregatePlan, g: &DenseMatrix, u: &DenseMatrix) -> Result<DenseMatrix> {
        let (gr, ur) = (self.reduce(g)?, self.reduce(u)?);
        let n = self.sigma.len();
        if gr.shape() != (n, self.m) || ur.shape() != (n, self.l) {
            return Err(Error::dim("dynamics step", gr.shape(), (n, self.m)));
        }
        let z = DenseMatrix::hcat(&[&plan.apply(&gr)?, &plan.apply(&ur)?])?;
        z.matmul(theta)?.reshape(g.rows(), g.cols())
    }

    /// `ĝ^1 = g1`, `ĝ^{t+1} = K ĝ^t + L u^t`; returns `controls.len() + 1` embeddings.
    pub fn rollout(&self, g1: &DenseMatrix, controls: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        let theta = self.theta();
        let plan = self.design().plan(1);
        let mut out = Vec::with_capacity(controls.len() + 1);
        out.push(g1.clone());
        for u in controls {
            let next = self.step_with(&theta, &plan, &out[out.len() - 1], u)?;
            out.push(next);
        }
        Ok(out)
    }

    /// Full `K` (`Nm × Nm`) and `L` (`Nm × Nl`).
    pub fn materialize(&self) -> Result<(DenseMatrix, DenseMatrix)> {
        let n = self.sigma.len();
        let (m, l) = (self.m, self.l);
        let mut k = DenseMatrix::zeros(n * m, n * m);
        let mut lm = DenseMatrix::zeros(n * m, n * l);
        for (i, row) in self.sigma.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                if c > self.h {
                    return Err(Error::Config(format!("σ[{i}][{j}] = {c} exceeds h = {}", self.h)));
                }
                k.set_block(i * m, j * m, &self.k_hat[c - 1]);
                lm.set_block(i * m, j * l, &self.l_hat[c - 1]);
            }
        }
        Ok((k, lm))
    }

    /// Sum of squared one-step prediction errors over all transitions.
    pub fn residual(&self, seqs: &[EmbeddingSequence]) -> Result<f64> {
        let theta = self.theta();
        let plan = self.design().plan(1);
        let mut total = 0.0;
        for seq in seqs {
            seq.validate()?;
            for t in 0..seq.transitions() {
                let pred = self.step_with(&theta, &plan, &seq.embeddings[t], &seq.controls[t])?;
                let err = pred.sub(&seq.embeddings[t + 1])?;
                total += err.data().iter().map(|e| e * e).sum::<f64>();
            }
        }
        Ok(total)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dyn_: Self = serde_json::from_str(text)?;
        let ok = dyn_.k_hat.len() == dyn_.h
            && dyn_.l_hat.len() == dyn_.h
            && dyn_.k_hat.iter().all(|k| k.shape() == (dyn_.m, dyn_.m))
            && dyn_.l_hat.iter().all(|b| b.shape() == (dyn_.m, dyn_.l));
        if !ok {
            return Err(Error::Config("dynamics blocks do not match h, m, l".into()));
        }
        Ok(dyn_)
    }
}

/// Convenience: `BlockDynamics::rollout`.
pub fn rollout_linear(dyn_: &BlockDynamics, g1: &DenseMatrix, controls: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
    dyn_.rollout(g1, controls)
}

/// Convenience: `BlockDynamics::materialize`.
pub fn materialize(dyn_: &BlockDynamics) -> Result<(DenseMatrix, DenseMatrix)> {
    dyn_.materialize()
}
