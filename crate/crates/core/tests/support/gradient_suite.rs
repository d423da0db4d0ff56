//! Reverse-mode gradients against central finite differences, grouped so
//! both the unit tests and the acceptance runner can drive them.
#![allow(dead_code)]

use std::rc::Rc;

use ckpm_core::embeddings::{GraphBatch, KoopmanModel, ModelShape};
use ckpm_core::envs::{rollout_env, EnvConfig, RandomExploration, Trajectory};
use ckpm_core::graph::SceneGraph;
use ckpm_core::linalg::{check_gradients, AggregatePlan, DenseMatrix, Tape, Var};
use ckpm_core::sysid::{identify_on_tape, Design, Ridge, StructureMode};
use ckpm_core::training::{all_pairs, clip_losses, standardized, Clip, LossSettings};
use ckpm_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Worst relative error per named check.
#[derive(Debug, Default)]
pub struct Checks {
    pub results: Vec<(String, f64)>,
}

impl Checks {
    pub fn check(&mut self, name: &str, inputs: &[DenseMatrix], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let err = check_gradients(inputs, H, f).map(|r| r.max_rel_err).unwrap_or(f64::INFINITY);
        self.results.push((name.to_string(), err));
    }

    /// The worst check, if any.
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.results.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn assert_within_tolerance(&self) {
        let failed: Vec<_> = self.results.iter().filter(|(_, e)| !(*e < TOL)).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }
}

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Weighted sum with fixed weights so every output entry matters.
fn scalarize(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random(r, c, &mut rng));
    let p = t.hadamard(out, w)?;
    Ok(t.sum(p))
}

pub fn primitives(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(3, 3, &mut rng);
    let b = random(3, 3, &mut rng);
    let v = random(1, 3, &mut rng);
    // keep abs and relu away from their kinks
    let away = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });

    c.check("matmul", &[random(3, 4, &mut rng), random(4, 2, &mut rng)], |t, x| {
        let o = t.matmul(x[0], x[1])?;
        Ok(t.sum(o))
    });
    c.check("matmul_tn", &[a.clone(), b.clone()], |t, x| {
        let o = t.matmul_tn(x[0], x[1])?;
        scalarize(t, o, 2)
    });
    c.check("add", &[a.clone(), b.clone()], |t, x| {
        let o = t.add(x[0], x[1])?;
        scalarize(t, o, 3)
    });
    c.check("sub", &[a.clone(), b.clone()], |t, x| {
        let o = t.sub(x[0], x[1])?;
        scalarize(t, o, 4)
    });
    c.check("hadamard", &[a.clone(), b.clone()], |t, x| {
        let o = t.hadamard(x[0], x[1])?;
        scalarize(t, o, 5)
    });
    c.check("add_row_broadcast", &[a.clone(), v.clone()], |t, x| {
        let o = t.add_row_broadcast(x[0], x[1])?;
        scalarize(t, o, 6)
    });
    c.check("scale", &[a.clone()], |t, x| {
        let o = t.scale(x[0], -1.7);
        scalarize(t, o, 7)
    });
    c.check("relu", &[away.clone()], |t, x| {
        let o = t.relu(x[0]);
        scalarize(t, o, 8)
    });
    c.check("abs", &[away.clone()], |t, x| {
        let o = t.abs(x[0]);
        scalarize(t, o, 9)
    });
    c.check("concat_cols", &[a.clone(), random(3, 2, &mut rng)], |t, x| {
        let o = t.concat_cols(&[x[0], x[1]])?;
        scalarize(t, o, 10)
    });
    c.check("concat_rows", &[a.clone(), v.clone()], |t, x| {
        let o = t.concat_rows(&[x[0], x[1]])?;
        scalarize(t, o, 11)
    });
    c.check("slice_rows", &[a.clone()], |t, x| {
        let o = t.slice_rows(x[0], 1, 3)?;
        scalarize(t, o, 12)
    });
    c.check("reshape", &[random(2, 6, &mut rng)], |t, x| {
        let o = t.reshape(x[0], 4, 3)?;
        scalarize(t, o, 13)
    });
    c.check("gather_rows", &[a.clone()], |t, x| {
        let o = t.gather_rows(x[0], Rc::from(vec![2, 0, 2, 1]))?;
        scalarize(t, o, 14)
    });
    let mut plan = AggregatePlan::new(2, 2);
    plan.push(0, 0, 0);
    plan.push(0, 1, 1);
    plan.push(1, 1, 0);
    plan.push(1, 2, 0);
    let plan = Rc::new(plan);
    c.check("aggregate", &[a.clone()], |t, x| {
        let o = t.aggregate(x[0], plan.clone())?;
        scalarize(t, o, 15)
    });
    c.check("sum", &[a.clone()], |t, x| {
        let s = t.sum(x[0]);
        let sq = t.hadamard(s, s)?;
        Ok(t.sum(sq))
    });
    c.check("row_sum", &[a.clone()], |t, x| {
        let o = t.row_sum(x[0]);
        scalarize(t, o, 16)
    });
    c.check("frobenius", &[a.clone()], |t, x| Ok(t.frobenius(x[0])));
    c.check("l2_diff", &[a.clone(), b.clone()], |t, x| t.l2_diff(x[0], x[1]));
    c.check("group_norms", &[random(4, 3, &mut rng)], |t, x| {
        let o = t.group_norms(x[0], 2)?;
        scalarize(t, o, 17)
    });
    c.check("mean", &[a.clone()], |t, x| {
        let m = t.mean(x[0]);
        let sq = t.hadamard(m, m)?;
        Ok(t.sum(sq))
    });
    // A = MᵀM + I keeps the perturbed system symmetric positive definite
    let eye = DenseMatrix::identity(3);
    c.check("spd_solve", &[a.clone(), random(3, 2, &mut rng)], move |t, x| {
        let mm = t.matmul_tn(x[0], x[0])?;
        let i = t.constant(eye.clone());
        let spd = t.add(mm, i)?;
        let o = t.spd_solve(spd, x[1])?;
        scalarize(t, o, 18)
    });
}

fn tiny_rope() -> (Trajectory, SceneGraph, KoopmanModel) {
    let cfg = EnvConfig::rope(3, 4);
    let ep = rollout_env(&cfg, &mut RandomExploration::new(1.0, 4), 5).unwrap();
    let graph = cfg.scene_graph().unwrap();
    let mut model = KoopmanModel::new(ModelShape::for_graph(&graph, 4, 4, 8), 9);
    model.normalizer =
        ckpm_core::embeddings::Normalizer::fit(4, ep.states.iter().map(|s| &s.values)).unwrap();
    // zero biases put whole rows exactly on a ReLU kink
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for p in model.params_mut() {
        if p.rows() == 1 {
            *p = random(1, p.cols(), &mut rng).scale(0.3);
        }
    }
    (ep, graph, model)
}

fn params(model: &KoopmanModel) -> Vec<DenseMatrix> {
    model.params().into_iter().cloned().collect()
}

pub fn encoder_and_decoder(c: &mut Checks) {
    let (ep, graph, model) = tiny_rope();
    let x = standardized(&model, &ep.states).unwrap();
    let batch = GraphBatch::new(&graph, ep.states.len());
    let mut inputs = params(&model);
    inputs.push(x);
    let p = inputs.len() - 1;
    c.check("encode", &inputs, |t, v| {
        let bound = model.bind_vars(t, v[..p].to_vec())?;
        let g = model.encode_tape(t, &bound, &batch, v[p])?;
        scalarize(t, g, 20)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut inputs = params(&model);
    inputs.push(random(5 * 3, 4, &mut rng));
    c.check("decode", &inputs, |t, v| {
        let bound = model.bind_vars(t, v[..p].to_vec())?;
        let x = model.decode_tape(t, &bound, &batch, v[p])?;
        scalarize(t, x, 21)
    });
}

fn loss_check(c: &mut Checks, settings: LossSettings, pick: fn(&ckpm_core::training::LossVars) -> Var, name: &str) {
    let (ep, graph, model) = tiny_rope();
    let controls: Vec<DenseMatrix> = ep.controls.iter().map(|u| u.values.clone()).collect();
    let clip = Clip::new(&graph, standardized(&model, &ep.states).unwrap(), &controls).unwrap();
    let pairs = all_pairs(5);
    c.check(name, &params(&model), |t, v| {
        let bound = model.bind_vars(t, v.to_vec())?;
        let losses = clip_losses(t, &model, &bound, &clip, &settings, &pairs, None)?;
        Ok(pick(&losses))
    });
}

fn settings(mode: StructureMode) -> LossSettings {
    LossSettings {
        mode,
        ..LossSettings::default()
    }
}

pub fn losses(c: &mut Checks) {
    loss_check(c, settings(StructureMode::Block), |l| l.ae, "L_ae");
    for mode in [StructureMode::Block, StructureMode::Diag, StructureMode::None] {
        loss_check(c, settings(mode), |l| l.pred, &format!("L_pred {mode:?}"));
    }
    loss_check(c, settings(StructureMode::Block), |l| l.metric, "L_metric");
    loss_check(c, settings(StructureMode::Block), |l| l.total, "L");
    let absolute = LossSettings {
        ridge: Ridge::Absolute(1e-3),
        ..settings(StructureMode::Block)
    };
    loss_check(c, absolute, |l| l.total, "L with absolute ridge");
}

pub fn sysid(c: &mut Checks) {
    let graph = SceneGraph::rope(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let steps = 12;
    let g = random(steps * 3, 2, &mut rng);
    let controls: Vec<DenseMatrix> = (1..steps).map(|_| random(3, 1, &mut rng)).collect();
    for mode in [StructureMode::Block, StructureMode::Diag, StructureMode::None] {
        let design = Design::for_graph(mode, &graph, 2, 1).unwrap();
        for ridge in [Ridge::Relative(1e-3), Ridge::Absolute(1e-2)] {
            c.check(&format!("residual {mode:?} {ridge:?}"), std::slice::from_ref(&g), |t, v| {
                let fit = identify_on_tape(t, &design, v[0], &controls, ridge, true)?;
                fit.residual(t)
            });
            c.check(&format!("solution {mode:?} {ridge:?}"), std::slice::from_ref(&g), |t, v| {
                let fit = identify_on_tape(t, &design, v[0], &controls, ridge, true)?;
                scalarize(t, fit.theta, 30)
            });
        }
    }
}

pub fn all() -> Checks {
    let mut c = Checks::default();
    primitives(&mut c);
    encoder_and_decoder(&mut c);
    losses(&mut c);
    sysid(&mut c);
    c
}
