use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::embeddings::{BoundModel, GraphBatch, KoopmanModel};
use crate::envs::{ControlInput, SystemState};
use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::linalg::{DenseMatrix, Tape, Var};
use crate::sysid::{identify_on_tape, BlockDynamics, Design, Ridge, StructureMode, TapeDynamics};

/// What the combined loss needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mode: StructureMode,
    pub ridge: Ridge,
    pub backprop_through_sysid: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.3,
            mode: StructureMode::Block,
            ridge: super::TRAIN_RIDGE,
            backprop_through_sysid: true,
        }
    }
}

/// One standardized sub-sequence ready for the loss.
#[derive(Debug, Clone)]
pub struct Clip<'a> {
    pub graph: &'a SceneGraph,
    pub batch: Rc<GraphBatch>,
    /// `(T·N) × d`, standardized.
    pub states: DenseMatrix,
    /// `T − 1` controls, each `N × l`.
    pub controls: &'a [DenseMatrix],
}

impl<'a> Clip<'a> {
    pub fn new(graph: &'a SceneGraph, states: DenseMatrix, controls: &'a [DenseMatrix]) -> Result<Self> {
        let steps = controls.len() + 1;
        if states.rows() != steps * graph.num_objects() {
            return Err(Error::dim("clip", states.shape(), (steps * graph.num_objects(), states.cols())));
        }
        Ok(Self {
            graph,
            batch: Rc::new(GraphBatch::new(graph, steps)),
            states,
            controls,
        })
    }

    pub fn steps(&self) -> usize {
        self.controls.len() + 1
    }

    /// Rows of step `t`.
    fn step_rows(&self, t: usize) -> &[f64] {
        let n = self.graph.num_objects();
        let w = self.states.cols();
        &self.states.data()[t * n * w..(t + 1) * n * w]
    }
}

/// Loss terms on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ae: Var,
    pub pred: Var,
    pub metric: Var,
}

/// `(1/T) Σ_t ‖a^t − b^t‖` over stacked `(T·N) × w` matrices.
fn mean_step_norm(tape: &mut Tape, a: Var, b: Var, n: usize) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let norms = tape.group_norms(d, n)?;
    Ok(tape.mean(norms))
}

/// Stacked rows of the steps in `steps`, in order.
fn step_indices(steps: impl Iterator<Item = usize>, n: usize) -> Rc<[usize]> {
    steps.flat_map(|t| t * n..(t + 1) * n).collect::<Vec<_>>().into()
}

/// `mean_k |‖g^{i_k} − g^{j_k}‖ − ‖x^{i_k} − x^{j_k}‖|` over whole-system vectors.
pub fn metric_on_tape(tape: &mut Tape, clip: &Clip, g: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(DenseMatrix::scalar(0.0)));
    }
    let n = clip.graph.num_objects();
    let gi = tape.gather_rows(g, step_indices(pairs.iter().map(|p| p.0), n))?;
    let gj = tape.gather_rows(g, step_indices(pairs.iter().map(|p| p.1), n))?;
    let diff = tape.sub(gi, gj)?;
    let dg = tape.group_norms(diff, n)?;
    let dx: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (clip.step_rows(i), clip.step_rows(j));
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .collect();
    let dx = tape.constant(DenseMatrix::column(&dx));
    let gap = tape.sub(dg, dx)?;
    let gap = tape.abs(gap);
    Ok(tape.mean(gap))
}

/// Records `L = L_ae + λ₁ L_pred + λ₂ L_metric` for one clip. Dynamics are
/// identified on the clip itself unless `dynamics` is supplied.
pub fn clip_losses(
    tape: &mut Tape,
    model: &KoopmanModel,
    bound: &BoundModel,
    clip: &Clip,
    settings: &LossSettings,
    pairs: &[(usize, usize)],
    dynamics: Option<&BlockDynamics>,
) -> Result<LossVars> {
    let n = clip.graph.num_objects();
    let x = tape.constant(clip.states.clone());
    let g = model.encode_tape(tape, bound, &clip.batch, x)?;
    let recon = model.decode_tape(tape, bound, &clip.batch, g)?;
    let ae = mean_step_norm(tape, recon, x, n)?;

    let g1 = tape.slice_rows(g, 0, n)?;
    let rolled = if clip.controls.is_empty() {
        g1
    } else {
        let fitted = match dynamics {
            Some(d) => TapeDynamics::from_dynamics(tape, d, n)?,
            None => {
                let l = clip.controls[0].cols();
                let design = Design::for_graph(settings.mode, clip.graph, model.shape.m, l)?;
                identify_on_tape(tape, &design, g, clip.controls, settings.ridge, settings.backprop_through_sysid)?
            }
        };
        fitted.rollout(tape, g1, clip.controls)?
    };
    let predicted = model.decode_tape(tape, bound, &clip.batch, rolled)?;
    let pred = mean_step_norm(tape, predicted, x, n)?;

    let metric = metric_on_tape(tape, clip, g, pairs)?;

    let weighted_pred = tape.scale(pred, settings.lambda1);
    let mut total = tape.add(ae, weighted_pred)?;
    // with λ₂ = 0 the metric is still reported but stays off the gradient path
    if settings.lambda2 != 0.0 {
        let weighted = tape.scale(metric, settings.lambda2);
        total = tape.add(total, weighted)?;
    }
    Ok(LossVars { total, ae, pred, metric })
}

/// `count` index pairs `i < j` drawn uniformly from `0..steps`.
pub fn sample_pairs(steps: usize, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    if steps < 2 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..steps);
            let mut j = rng.random_range(0..steps - 1);
            if j >= i {
                j += 1;
            }
            (i.min(j), i.max(j))
        })
        .collect()
}

pub fn all_pairs(steps: usize) -> Vec<(usize, usize)> {
    (0..steps).flat_map(|i| (i + 1..steps).map(move |j| (i, j))).collect()
}

/// Stacks raw states and standardizes them with the model's statistics.
pub fn standardized(model: &KoopmanModel, states: &[SystemState]) -> Result<DenseMatrix> {
    let refs: Vec<&DenseMatrix> = states.iter().map(|s| &s.values).collect();
    model.normalizer.apply(&DenseMatrix::vcat(&refs)?)
}

fn control_values(controls: &[ControlInput]) -> Vec<DenseMatrix> {
    controls.iter().map(|u| u.values.clone()).collect()
}

fn evaluate(
    model: &KoopmanModel,
    graph: &SceneGraph,
    states: &[SystemState],
    controls: &[ControlInput],
    settings: &LossSettings,
    pairs: &[(usize, usize)],
    dynamics: Option<&BlockDynamics>,
    pick: impl Fn(&LossVars) -> Var,
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Argument("loss needs at least one state".into()));
    }
    let controls = control_values(controls);
    let clip = Clip::new(graph, standardized(model, states)?, &controls)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let vars = clip_losses(&mut tape, model, &bound, &clip, settings, pairs, dynamics)?;
    Ok(tape.scalar(pick(&vars)))
}

fn zero_controls(model_graph: &SceneGraph, steps: usize) -> Vec<ControlInput> {
    vec![ControlInput::zeros(model_graph.num_objects(), 1); steps.saturating_sub(1)]
}

/// `L_ae = (1/T) Σ_t ‖ψ(φ(x^t)) − x^t‖` in standardized units.
pub fn loss_ae(model: &KoopmanModel, graph: &SceneGraph, states: &[SystemState]) -> Result<f64> {
    let n = graph.num_objects();
    let x = standardized(model, states)?;
    let recon = model.decode_normalized(graph, &model.encode_normalized(graph, &x)?)?;
    let diff = recon.sub(&x)?;
    let w = diff.cols();
    let total: f64 = diff
        .data()
        .chunks(n * w)
        .map(|step| step.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    Ok(total / states.len().max(1) as f64)
}

/// `L_pred`: roll `φ(x¹)` forward with `dynamics` (or dynamics identified on
/// these states) and compare decoded predictions to the states.
pub fn loss_pred(
    model: &KoopmanModel,
    graph: &SceneGraph,
    states: &[SystemState],
    controls: &[ControlInput],
    dynamics: Option<&BlockDynamics>,
    settings: &LossSettings,
) -> Result<f64> {
    evaluate(model, graph, states, controls, settings, &[], dynamics, |v| v.pred)
}

/// Sampled `L_metric` with `pair_count` pairs drawn from `seed`.
pub fn loss_metric(
    model: &KoopmanModel,
    graph: &SceneGraph,
    states: &[SystemState],
    pair_count: usize,
    seed: u64,
) -> Result<f64> {
    let pairs = sample_pairs(states.len(), pair_count, &mut ChaCha8Rng::seed_from_u64(seed));
    metric_with_pairs(model, graph, states, &pairs)
}

/// `L_metric` over every pair `i < j`.
pub fn loss_metric_exhaustive(model: &KoopmanModel, graph: &SceneGraph, states: &[SystemState]) -> Result<f64> {
    metric_with_pairs(model, graph, states, &all_pairs(states.len()))
}

fn metric_with_pairs(
    model: &KoopmanModel,
    graph: &SceneGraph,
    states: &[SystemState],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::Argument("metric loss needs at least two states".into()));
    }
    let controls = zero_controls(graph, states.len());
    let controls = control_values(&controls);
    let clip = Clip::new(graph, standardized(model, states)?, &controls)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(clip.states.clone());
    let g = model.encode_tape(&mut tape, &bound, &clip.batch, x)?;
    let metric = metric_on_tape(&mut tape, &clip, g, pairs)?;
    Ok(tape.scalar(metric))
}

/// `|log(‖g^i − g^j‖ / ‖x^i − x^j‖)|` per pair, skipping pairs with a zero distance.
pub fn distance_log_ratios(
    model: &KoopmanModel,
    graph: &SceneGraph,
    states: &[SystemState],
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let n = graph.num_objects();
    let x = standardized(model, states)?;
    let g = model.encode_normalized(graph, &x)?;
    let dist = |m: &DenseMatrix, i: usize, j: usize| {
        let w = m.cols();
        let a = &m.data()[i * n * w..(i + 1) * n * w];
        let b = &m.data()[j * n * w..(j + 1) * n * w];
        a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    };
    Ok(pairs
        .iter()
        .filter_map(|&(i, j)| {
            let (dg, dx) = (dist(&g, i, j), dist(&x, i, j));
            (dg > 0.0 && dx > 0.0).then(|| (dg / dx).ln().abs())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::ModelShape;
    use crate::envs::{rollout_env, EnvConfig, RandomExploration};

    fn setup() -> (KoopmanModel, SceneGraph, Vec<SystemState>, Vec<ControlInput>) {
        let cfg = EnvConfig::rope(5, 1);
        let ep = rollout_env(&cfg, &mut RandomExploration::new(1.0, 2), 10).unwrap();
        let graph = cfg.scene_graph().unwrap();
        let model = KoopmanModel::new(ModelShape::for_graph(&graph, 4, 6, 12), 5);
        (model, graph, ep.states, ep.controls)
    }

    #[test]
    fn ae_matches_tape_version() {
        let (model, graph, states, controls) = setup();
        let direct = loss_ae(&model, &graph, &states).unwrap();
        let on_tape = evaluate(&model, &graph, &states, &controls, &LossSettings::default(), &[], None, |v| v.ae).unwrap();
        assert!((direct - on_tape).abs() < 1e-12);
    }

    #[test]
    fn single_frame_prediction_equals_autoencoding() {
        let (model, graph, states, _) = setup();
        let one = &states[..1];
        let pred = loss_pred(&model, &graph, one, &[], None, &LossSettings::default()).unwrap();
        assert!((pred - loss_ae(&model, &graph, one).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_frames_add_no_metric() {
        let (model, graph, states, _) = setup();
        let same = vec![states[0].clone(); 4];
        assert_eq!(loss_metric_exhaustive(&model, &graph, &same).unwrap(), 0.0);
    }

    #[test]
    fn pairs_are_ordered_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = sample_pairs(5, 500, &mut rng);
        assert!(pairs.iter().all(|&(i, j)| i < j && j < 5));
        assert_eq!(all_pairs(64).len(), 2016);
    }
}
