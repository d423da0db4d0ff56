//! Simulation-error, control-error and sweep protocols.

use ckpm_core::control::{control_error, run_mpc, saturation, MpcSettings};
use ckpm_core::envs::{EnvConfig, Trajectory};
use ckpm_core::graph::SceneGraph;
use ckpm_core::linalg::DenseMatrix;
use ckpm_core::sysid::{identify, BlockDynamics, Design, EmbeddingSequence, StructureMode};
use ckpm_core::training::{init_model, train, LossRecord};
use ckpm_core::{Error, Result};

use crate::data::sysid_episodes;
use crate::experiment::ExperimentSpec;
use crate::observer::Observer;
use crate::report::{mse, ControlMetrics, ControlProtocol, Quartiles, SimRow, SimulationMetrics, SweepMetrics, SweepRow};

/// Dynamics of one test system, identified from fresh episodes of it.
#[derive(Debug, Clone)]
pub struct SystemFit {
    pub graph: SceneGraph,
    pub dynamics: BlockDynamics,
    pub sequences: Vec<EmbeddingSequence>,
}

pub fn default_transitions(spec: &ExperimentSpec) -> usize {
    spec.model.sysid_episodes * (spec.episode_len - 1)
}

pub fn fit_system(
    spec: &ExperimentSpec,
    observer: &Observer,
    cfg: &EnvConfig,
    mode: StructureMode,
    transitions: usize,
    salt: u64,
) -> Result<SystemFit> {
    let graph = cfg.scene_graph()?;
    let sequences = sysid_episodes(spec, cfg, transitions, salt)?
        .iter()
        .map(|ep| observer.embed(&graph, ep))
        .collect::<Result<Vec<_>>>()?;
    let design = Design::for_graph(mode, &graph, observer.width(cfg.state_dim())?, cfg.action_dim())?;
    let dynamics = identify(&design, &sequences, spec.train.ridge)?;
    Ok(SystemFit {
        graph,
        dynamics,
        sequences,
    })
}

/// Per-step MSE of the open rollout from the encoded first state, `horizon`
/// values starting at `t = 1`. Divergent rollouts yield `+∞`.
pub fn simulation_errors(observer: &Observer, fit: &SystemFit, ep: &Trajectory, horizon: usize) -> Result<Vec<f64>> {
    if ep.states.len() < horizon {
        return Err(Error::Config(format!(
            "episode has {} states, the simulation horizon is {horizon}",
            ep.states.len()
        )));
    }
    let d = ep.config.state_dim();
    let g1 = observer.encode(&fit.graph, &ep.states[0].values)?;
    let controls: Vec<DenseMatrix> = ep.controls[..horizon - 1].iter().map(|u| u.values.clone()).collect();
    let rolled = fit.dynamics.rollout(&g1, &controls)?;
    let refs: Vec<&DenseMatrix> = rolled.iter().collect();
    let decoded = observer.decode(&fit.graph, &DenseMatrix::vcat(&refs)?, d)?;
    let n = fit.graph.num_objects();
    Ok((0..horizon)
        .map(|t| {
            let pred = &decoded.data()[t * n * d..(t + 1) * n * d];
            let e = mse(pred, ep.states[t].flat());
            if e.is_finite() {
                e
            } else {
                f64::INFINITY
            }
        })
        .collect())
}

fn trials<'a>(spec: &ExperimentSpec, episodes: &'a [Trajectory]) -> Result<&'a [Trajectory]> {
    if episodes.is_empty() {
        return Err(Error::Config("no evaluation episodes".into()));
    }
    Ok(&episodes[..spec.eval.trials.min(episodes.len())])
}

pub fn eval_sim(
    spec: &ExperimentSpec,
    observer: &Observer,
    episodes: &[Trajectory],
    transitions: usize,
    salt: u64,
) -> Result<SimulationMetrics> {
    let eps = trials(spec, episodes)?;
    let horizon = spec.eval.sim_horizon;
    let mode = spec.model.mode.structure();
    let mut per_episode = Vec::with_capacity(eps.len());
    for (k, ep) in eps.iter().enumerate() {
        let wrap = |e: Error| Error::Episode {
            episode: k,
            source: Box::new(e),
        };
        let fit = fit_system(spec, observer, &ep.config, mode, transitions, salt).map_err(wrap)?;
        per_episode.push(simulation_errors(observer, &fit, ep, horizon).map_err(wrap)?);
    }
    let curve = (0..horizon)
        .map(|t| {
            let at: Vec<f64> = per_episode.iter().map(|e| e[t]).collect();
            SimRow {
                t: t + 1,
                error: Quartiles::of(&at),
            }
        })
        .collect();
    let counts = eps.iter().map(|e| e.config.num_objects);
    Ok(SimulationMetrics {
        episodes: eps.len(),
        object_counts: [counts.clone().min().unwrap_or(0), counts.max().unwrap_or(0)],
        sysid_transitions: transitions,
        non_finite: per_episode.iter().filter(|e| e.iter().any(|v| !v.is_finite())).count(),
        curve,
    })
}

/// Drives each test system from its first state to its state after
/// `control_horizon` steps, re-planning every `mpc_period` steps, and scores
/// the final state against that goal.
pub fn eval_control(spec: &ExperimentSpec, observer: &Observer, episodes: &[Trajectory]) -> Result<ControlMetrics> {
    let eps = trials(spec, episodes)?;
    let e = &spec.eval;
    let settings = MpcSettings {
        steps: e.control_horizon,
        period: e.mpc_period,
        action_penalty: e.action_penalty,
    };
    let mut errors = Vec::with_capacity(eps.len());
    let mut max_abs: f64 = 0.0;
    let mut over = 0.0;
    let mut solves = 0;
    for (k, ep) in eps.iter().enumerate() {
        let wrap = |e: Error| Error::Episode {
            episode: k,
            source: Box::new(e),
        };
        let cfg = &ep.config;
        let fit = fit_system(spec, observer, cfg, spec.model.mode.structure(), default_transitions(spec), 0).map_err(wrap)?;
        let goal = ep
            .states
            .get(e.control_horizon)
            .ok_or_else(|| wrap(Error::Config("episode shorter than the control horizon".into())))?;
        let mut encode = |s: &ckpm_core::envs::SystemState| observer.encode(&fit.graph, &s.values);
        let outcome =
            run_mpc(cfg, ep.states[0].clone(), goal, &mut encode, &fit.dynamics, settings).map_err(wrap)?;
        let last = outcome.trajectory.states.last().expect("trajectory includes the start");
        errors.push(control_error(last, goal).map_err(wrap)?);
        let sat = saturation(&outcome.trajectory.controls, &cfg.actuation_mask(), cfg.params.action_bound);
        max_abs = max_abs.max(sat.max_abs);
        over += sat.over_bound;
        solves = outcome.solutions.len();
    }
    let n = errors.len() as f64;
    Ok(ControlMetrics {
        protocol: ControlProtocol {
            horizon: e.control_horizon,
            mpc_period: e.mpc_period,
            solves_per_trial: solves,
            action_penalty: e.action_penalty,
        },
        summary: Quartiles::of(&errors),
        mean: errors.iter().sum::<f64>() / n,
        errors,
        saturation: ckpm_core::control::Saturation {
            max_abs,
            over_bound: over / n,
        },
    })
}

/// Median simulation error at the horizon for growing amounts of
/// identification data, repeated over `sweep_seeds` data draws.
pub fn sweep_sysid_data(spec: &ExperimentSpec, observer: &Observer, episodes: &[Trajectory]) -> Result<SweepMetrics> {
    let rows = spec
        .eval
        .sweep_sysid_samples
        .iter()
        .map(|&samples| {
            let seeds = (0..spec.eval.sweep_seeds as u64)
                .map(|salt| Ok(eval_sim(spec, observer, episodes, samples, salt)?.final_median()))
                .collect::<Result<Vec<f64>>>()?;
            Ok(SweepRow {
                value: samples,
                median: Quartiles::of(&seeds).median,
                seeds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepMetrics {
        axis: "sysid_data".into(),
        rows,
    })
}

/// Trains one model per embedding width and evaluates each.
pub fn sweep_embedding_dim(
    spec: &ExperimentSpec,
    train_set: &[Trajectory],
    test_set: &[Trajectory],
    progress: &mut dyn FnMut(usize, &LossRecord),
) -> Result<SweepMetrics> {
    if !spec.model.mode.is_learned() {
        return Err(Error::Config("the embedding-dimension sweep needs a learned model".into()));
    }
    let rows = spec
        .eval
        .sweep_m
        .iter()
        .map(|&m| {
            let mut s = spec.clone();
            s.model.m = m;
            let s = s.resolved()?;
            let model = init_model(&s.train, train_set)?;
            let trained = train(&s.train, train_set, model, &mut |r| progress(m, r))?;
            let observer = Observer::Learned(trained.model);
            let v = eval_sim(&s, &observer, test_set, default_transitions(&s), 0)?.final_median();
            Ok(SweepRow {
                value: m,
                seeds: vec![v],
                median: v,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepMetrics {
        axis: "embedding_dim".into(),
        rows,
    })
}
