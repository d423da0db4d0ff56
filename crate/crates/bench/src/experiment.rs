use std::fmt;
use std::str::FromStr;

use ckpm_core::envs::{EnvConfig, EnvKind, LatticeLayout, QuadKind};
use ckpm_core::sysid::StructureMode;
use ckpm_core::training::TrainConfig;
use ckpm_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which observables and which dynamics structure an experiment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Block,
    Diag,
    None,
    /// Per-object polynomial dictionary with block-structured dynamics.
    #[serde(rename = "KPM")]
    Kpm,
}

impl ModelKind {
    pub fn structure(self) -> StructureMode {
        match self {
            ModelKind::Block | ModelKind::Kpm => StructureMode::Block,
            ModelKind::Diag => StructureMode::Diag,
            ModelKind::None => StructureMode::None,
        }
    }

    pub fn is_learned(self) -> bool {
        self != ModelKind::Kpm
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Block => "block",
            ModelKind::Diag => "diag",
            ModelKind::None => "none",
            ModelKind::Kpm => "kpm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Block => "Block",
            ModelKind::Diag => "Diag",
            ModelKind::None => "None",
            ModelKind::Kpm => "KPM",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "block" => Ok(ModelKind::Block),
            "diag" => Ok(ModelKind::Diag),
            "none" => Ok(ModelKind::None),
            "kpm" => Ok(ModelKind::Kpm),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected Block, Diag, None or KPM"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// States per simulation-error curve, counting the encoded start.
    pub sim_horizon: usize,
    /// Controls per control task.
    pub control_horizon: usize,
    /// Re-plan every this many steps; `≥ control_horizon` is open loop.
    pub mpc_period: usize,
    /// Test episodes used per evaluation.
    pub trials: usize,
    pub action_penalty: f64,
    pub sweep_m: Vec<usize>,
    /// Transition counts for the system-identification data sweep.
    pub sweep_sysid_samples: Vec<usize>,
    pub sweep_seeds: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            sim_horizon: 100,
            control_horizon: 40,
            mpc_period: 40,
            trials: 50,
            action_penalty: ckpm_core::control::DEFAULT_ACTION_PENALTY,
            sweep_m: vec![8, 16, 32, 64],
            sweep_sysid_samples: vec![200, 400, 800, 1600],
            sweep_seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub mode: ModelKind,
    pub m: usize,
    /// Fresh episodes of the test system used to identify its dynamics.
    pub sysid_episodes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            mode: ModelKind::Block,
            m: 32,
            sysid_episodes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Template; object count and seed are set per episode.
    pub env: EnvConfig,
    pub object_count_range: [usize; 2],
    pub extrapolation_range: [usize; 2],
    pub episodes: usize,
    /// States per episode.
    pub episode_len: usize,
    /// Training fraction.
    pub split: f64,
    pub seed: u64,
    pub eval: EvalSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Where outputs go. Left out of reports, which depend only on what was run.
    #[serde(skip_serializing_if = "String::is_empty")]
    pub output_dir: String,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self::rope()
    }
}

impl ExperimentSpec {
    pub fn rope() -> Self {
        Self {
            env: EnvConfig::rope(5, 0),
            object_count_range: [5, 9],
            extrapolation_range: [10, 14],
            episodes: 1000,
            episode_len: 100,
            split: 0.9,
            seed: 0,
            eval: EvalSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            output_dir: "runs/rope".into(),
        }
    }

    /// Actuated lattices controlled with feedback after 32 of 64 steps.
    pub fn soft_lattice() -> Self {
        let mut spec = Self::rope();
        spec.env = EnvConfig::soft_lattice(LatticeLayout::block(2, 1, QuadKind::Soft), 0);
        spec.eval.control_horizon = 64;
        spec.eval.mpc_period = 32;
        spec.output_dir = "runs/soft".into();
        spec
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    /// Copies the model settings into the training config and checks ranges.
    pub fn resolved(mut self) -> Result<Self> {
        self.train.m = self.model.m;
        self.train.mode = self.model.mode.structure();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        for (name, [lo, hi]) in [
            ("object_count_range", self.object_count_range),
            ("extrapolation_range", self.extrapolation_range),
        ] {
            if lo > hi || lo < ckpm_core::envs::MIN_OBJECTS || hi > ckpm_core::envs::MAX_OBJECTS {
                return bad(format!("{name} [{lo}, {hi}] is not a valid object range"));
            }
        }
        if self.episodes == 0 {
            return bad("episodes must be positive".into());
        }
        if !(self.split > 0.0 && self.split <= 1.0) {
            return bad(format!("split {} outside (0, 1]", self.split));
        }
        if self.episode_len < 2 {
            return bad("episode_len must be at least 2".into());
        }
        let e = &self.eval;
        if e.sim_horizon < 1 || e.sim_horizon > self.episode_len {
            return bad(format!("sim_horizon {} must lie in [1, episode_len]", e.sim_horizon));
        }
        if e.control_horizon < 1 || e.control_horizon >= self.episode_len {
            return bad(format!("control_horizon {} must lie in [1, episode_len)", e.control_horizon));
        }
        if e.mpc_period == 0 || e.trials == 0 || e.sweep_seeds == 0 {
            return bad("mpc_period, trials and sweep_seeds must be positive".into());
        }
        if !(e.action_penalty.is_finite() && e.action_penalty > 0.0) {
            return bad(format!("action_penalty must be positive, got {}", e.action_penalty));
        }
        if self.model.m == 0 || self.model.sysid_episodes == 0 {
            return bad("model.m and model.sysid_episodes must be positive".into());
        }
        if self.env.env_kind == EnvKind::SoftLattice2D && self.env.layout.is_none() {
            return bad("SoftLattice2D template needs a layout".into());
        }
        self.train.validate()
    }

    pub fn train_count(&self) -> usize {
        ((self.episodes as f64 * self.split).round() as usize).min(self.episodes)
    }

    pub fn test_count(&self) -> usize {
        self.episodes - self.train_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_evaluation_protocol() {
        let s = ExperimentSpec::default();
        assert_eq!(s.eval.sim_horizon, 100);
        assert_eq!(s.object_count_range, [5, 9]);
        assert_eq!(s.extrapolation_range, [10, 14]);
        assert_eq!((s.model.sysid_episodes, s.model.m), (8, 32));
        let soft = ExperimentSpec::soft_lattice();
        assert_eq!((soft.eval.control_horizon, soft.eval.mpc_period), (64, 32));
    }

    #[test]
    fn ten_episodes_split_nine_to_one() {
        let s = ExperimentSpec {
            episodes: 10,
            ..ExperimentSpec::default()
        };
        assert_eq!((s.train_count(), s.test_count()), (9, 1));
    }

    #[test]
    fn partial_json_fills_defaults_and_unknown_keys_fail() {
        let s = ExperimentSpec::from_json(r#"{"episodes": 12, "model": {"mode": "KPM"}}"#).unwrap();
        assert_eq!(s.episodes, 12);
        assert_eq!(s.model.mode, ModelKind::Kpm);
        assert_eq!(s.model.m, 32);
        assert!(ExperimentSpec::from_json(r#"{"episode": 12}"#).is_err());
    }

    #[test]
    fn resolve_syncs_training_width() {
        let mut s = ExperimentSpec::default();
        s.model.m = 16;
        s.model.mode = ModelKind::Diag;
        let r = s.resolved().unwrap();
        assert_eq!(r.train.m, 16);
        assert_eq!(r.train.mode, StructureMode::Diag);
    }

    #[test]
    fn mode_names_parse_either_case() {
        for (s, k) in [("Block", ModelKind::Block), ("diag", ModelKind::Diag), ("NONE", ModelKind::None), ("KPM", ModelKind::Kpm)] {
            assert_eq!(s.parse::<ModelKind>().unwrap(), k);
            assert_eq!(k.to_string().parse::<ModelKind>().unwrap(), k);
        }
        assert!("full".parse::<ModelKind>().is_err());
    }
}
