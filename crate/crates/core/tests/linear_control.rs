use ckpm_core::control::{objective, run_mpc, solve_open_loop, ControlProblem, MpcSettings};
use ckpm_core::envs::{rollout_env, ControlInput, EnvConfig, RandomExploration, SystemState};
use ckpm_core::graph::SceneGraph;
use ckpm_core::linalg::DenseMatrix;
use ckpm_core::sysid::{identify_structured, BlockDynamics, EmbeddingSequence, Ridge, StructureMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 5;
const STIFFNESS: f64 = 0.5;

/// Symplectic Euler of unit masses on a complete spring graph, written per
/// block: positions first in each 4-vector, velocities after.
fn discretized_blocks(n: usize, k: f64, dt: f64) -> ([DenseMatrix; 2], [DenseMatrix; 2]) {
    let c = (n - 1) as f64 * k;
    let mut a_self = DenseMatrix::zeros(4, 4);
    let mut a_pair = DenseMatrix::zeros(4, 4);
    let mut b_self = DenseMatrix::zeros(4, 2);
    for d in 0..2 {
        a_self[(d, d)] = 1.0 - dt * dt * c;
        a_self[(d, 2 + d)] = dt;
        a_self[(2 + d, d)] = -dt * c;
        a_self[(2 + d, 2 + d)] = 1.0;
        a_pair[(d, d)] = dt * dt * k;
        a_pair[(2 + d, d)] = dt * k;
        b_self[(d, d)] = dt * dt;
        b_self[(2 + d, d)] = dt;
    }
    ([a_self, a_pair], [b_self, DenseMatrix::zeros(4, 2)])
}

fn identified(seed: u64) -> (EnvConfig, BlockDynamics) {
    let cfg = EnvConfig::spring_balls(N, STIFFNESS, seed);
    let ep = rollout_env(&cfg, &mut RandomExploration::new(1.0, seed), 500).unwrap();
    let seq = EmbeddingSequence::new(
        ep.states.iter().map(|s| s.values.clone()).collect(),
        ep.controls.iter().map(|u| u.values.clone()).collect(),
    )
    .unwrap();
    let dynamics = identify_structured(&seq, &SceneGraph::fully_connected(N), Ridge::Absolute(1e-8)).unwrap();
    (cfg, dynamics)
}

#[test]
fn identity_observations_recover_the_integrator() {
    let (cfg, dynamics) = identified(1);
    let (a, b) = discretized_blocks(N, STIFFNESS, cfg.dt);
    for c in 0..2 {
        let ka = dynamics.k_hat[c].sub(&a[c]).unwrap().frobenius();
        let kb = dynamics.l_hat[c].sub(&b[c]).unwrap().frobenius();
        assert!(ka < 1e-6 && kb < 1e-6, "type {c}: K {ka:e}, L {kb:e}");
    }

    let start = cfg.initial_state().unwrap();
    let truth = rollout_env(&cfg, &mut RandomExploration::new(1.0, 99), 101).unwrap();
    let controls: Vec<DenseMatrix> = truth.controls.iter().map(|u| u.values.clone()).collect();
    let pred = dynamics.rollout(&start.values, &controls).unwrap();
    let mse = pred
        .iter()
        .zip(&truth.states)
        .map(|(p, s)| p.sub(&s.values).unwrap().data().iter().map(|v| v * v).sum::<f64>() / p.len() as f64)
        .sum::<f64>()
        / pred.len() as f64;
    assert!(mse < 1e-8, "rollout mse {mse:e}");
}

fn random_state(rng: &mut ChaCha8Rng, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(N, 4, |_, _| rng.random_range(-scale..scale))
}

fn problem<'a>(dynamics: &'a BlockDynamics, start: DenseMatrix, goal: DenseMatrix, horizon: usize, penalty: f64) -> ControlProblem<'a> {
    ControlProblem {
        dynamics,
        g_start: start,
        g_goal: goal,
        horizon,
        action_penalty: penalty,
        actuation_mask: vec![true; N],
    }
}

#[test]
fn open_loop_plan_reaches_the_goal_embedding() {
    let (cfg, dynamics) = identified(2);
    // a goal the system reaches under bounded forces in 19 steps
    let reach = rollout_env(&cfg, &mut RandomExploration::new(1.0, 3), 20).unwrap();
    let goal = reach.states.last().unwrap().values.clone();
    let p = problem(&dynamics, reach.states[0].values.clone(), goal, 20, 1e-6);
    let sol = solve_open_loop(&p).unwrap();
    let qp = p.condense().unwrap();
    let u = qp.solve().unwrap();
    assert!(qp.gradient(&u).unwrap().max_abs() < 1e-8);

    // the penalty leaves g^T − g* = −λ(MMᵀ + λI)⁻¹ r with r = g* − K^{T−1}g¹
    let r = qp.goal.sub(&qp.free_response).unwrap();
    let mut gram = qp.m.matmul(&qp.m.transpose()).unwrap();
    for i in 0..gram.rows() {
        gram[(i, i)] += 1e-6;
    }
    let bias = solve_dense(&gram, &r).scale(-1e-6);
    let miss = sol.predicted_terminal.clone().reshape(N * 4, 1).unwrap().sub(&qp.goal).unwrap();
    assert!(miss.sub(&bias).unwrap().max_abs() < 1e-6 * bias.max_abs(), "{miss:?} vs {bias:?}");

    // gently forced goals are hit almost exactly
    let soft = rollout_env(&cfg, &mut RandomExploration::new(0.1, 3), 20).unwrap();
    let p = problem(&dynamics, soft.states[0].values.clone(), soft.states[19].values.clone(), 20, 1e-6);
    let miss = solve_open_loop(&p).unwrap().predicted_terminal.sub(&p.g_goal).unwrap().frobenius();
    assert!(miss < 1e-4, "terminal miss {miss:e}");
}

/// Gaussian elimination with partial pivoting on a copy of `a`.
fn solve_dense(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let mut a = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs())).unwrap();
        for c in 0..n {
            let t = a[(col, c)];
            a[(col, c)] = a[(piv, c)];
            a[(piv, c)] = t;
        }
        let t = x[(col, 0)];
        x[(col, 0)] = x[(piv, 0)];
        x[(piv, 0)] = t;
        for r in col + 1..n {
            let f = a[(r, col)] / a[(col, col)];
            for c in col..n {
                a[(r, c)] -= f * a[(col, c)];
            }
            x[(r, 0)] -= f * x[(col, 0)];
        }
    }
    for r in (0..n).rev() {
        let mut v = x[(r, 0)];
        for c in r + 1..n {
            v -= a[(r, c)] * x[(c, 0)];
        }
        x[(r, 0)] = v / a[(r, r)];
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn plan_is_stationary_and_its_cost_is_consistent(
        seed in any::<u64>(),
        horizon in 2usize..=24,
        penalty in prop::sample::select(vec![1e-4, 1e-3, 1e-2, 1.0]),
        actuated in prop::collection::vec(any::<bool>(), N),
    ) {
        let dynamics = shared_dynamics();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = problem(dynamics, random_state(&mut rng, 1.0), random_state(&mut rng, 1.0), horizon, penalty);
        p.actuation_mask = actuated;
        let qp = p.condense().unwrap();
        prop_assume!(!qp.columns.is_empty());
        let u = qp.solve().unwrap();
        let grad = qp.gradient(&u).unwrap().max_abs();
        prop_assert!(grad < 1e-8, "gradient {grad:e}");

        let sol = solve_open_loop(&p).unwrap();
        let (recomputed, _) = objective(dynamics, &p.g_start, &p.g_goal, &sol.controls, penalty).unwrap();
        prop_assert!((recomputed - sol.objective_value).abs() < 1e-9);
        prop_assert!((qp.objective(&u).unwrap() - sol.objective_value).abs() < 1e-9);
        for (t, c) in sol.controls.iter().enumerate() {
            for (i, &on) in p.actuation_mask.iter().enumerate() {
                if !on {
                    prop_assert!(c.row(i).iter().all(|&v| v == 0.0), "step {t} drives object {i}");
                }
            }
        }
    }

    #[test]
    fn replanning_never_loses_to_the_open_loop_plan(
        seed in any::<u64>(),
        steps in 4usize..=30,
        period in 1usize..=8,
    ) {
        let dynamics = shared_dynamics();
        let cfg = EnvConfig::spring_balls(N, STIFFNESS, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = SystemState::new(random_state(&mut rng, 1.0));
        let goal = SystemState::new(random_state(&mut rng, 0.5));
        let penalty = 1e-3;
        let terminal_cost = |s: &SystemState| s.values.sub(&goal.values).unwrap().data().iter().map(|v| v * v).sum::<f64>();

        let p = problem(dynamics, start.values.clone(), goal.values.clone(), steps + 1, penalty);
        let plan = solve_open_loop(&p).unwrap();
        let mut state = start.clone();
        for u in &plan.controls {
            state = cfg.step(&state, &ControlInput::new(u.clone())).unwrap();
        }
        let open = terminal_cost(&state);

        let settings = MpcSettings { steps, period, action_penalty: penalty };
        let mut encode = |s: &SystemState| Ok(s.values.clone());
        let out = run_mpc(&cfg, start, &goal, &mut encode, dynamics, settings).unwrap();
        let closed = terminal_cost(out.trajectory.states.last().unwrap());
        prop_assert!(closed <= open + 1e-9, "mpc {closed:e} vs open loop {open:e}");
    }
}

/// The analytic integrator, so the model is exact up to roundoff.
fn shared_dynamics() -> &'static BlockDynamics {
    static CELL: std::sync::OnceLock<BlockDynamics> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let (a, b) = discretized_blocks(N, STIFFNESS, 0.01);
        BlockDynamics {
            mode: StructureMode::Block,
            h: 2,
            m: 4,
            l: 2,
            sigma: SceneGraph::fully_connected(N).sigma().to_vec(),
            k_hat: a.to_vec(),
            l_hat: b.to_vec(),
            empty_types: Vec::new(),
        }
    })
}

