//! Episodes as JSON Lines: one `{config, states, controls}` object per line,
//! each state and control flattened row-major.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{ControlInput, EnvConfig, SystemState, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    config: EnvConfig,
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
    /// Hidden actuator scales of the soft lattice, per state.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    actuation: Vec<Vec<f64>>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn episode_to_line(ep: &Trajectory) -> Result<String> {
    let hidden = ep.states.iter().any(|s| !s.actuation.is_empty());
    let record = EpisodeRecord {
        config: ep.config.clone(),
        states: ep.states.iter().map(|s| s.flat().to_vec()).collect(),
        controls: ep.controls.iter().map(|u| u.values.data().to_vec()).collect(),
        actuation: if hidden {
            ep.states.iter().map(|s| s.actuation.clone()).collect()
        } else {
            Vec::new()
        },
    };
    Ok(serde_json::to_string(&record)?)
}

pub fn episode_from_line(line: &str) -> Result<Trajectory> {
    let record: EpisodeRecord = serde_json::from_str(line)?;
    let cfg = record.config;
    let (n, d, l) = (cfg.num_objects, cfg.state_dim(), cfg.action_dim());
    let mut states = Vec::with_capacity(record.states.len());
    for (t, flat) in record.states.into_iter().enumerate() {
        let mut s = SystemState::new(DenseMatrix::new(n, d, flat)?);
        if let Some(a) = record.actuation.get(t) {
            s.actuation = a.clone();
        }
        states.push(s);
    }
    let controls = record
        .controls
        .into_iter()
        .map(|flat| Ok(ControlInput::new(DenseMatrix::new(n, l, flat)?)))
        .collect::<Result<Vec<_>>>()?;
    let ep = Trajectory {
        config: cfg,
        states,
        controls,
    };
    ep.validate()?;
    Ok(ep)
}

pub fn write_episodes(path: &Path, episodes: &[Trajectory]) -> Result<()> {
    let mut out = Vec::new();
    for ep in episodes {
        out.extend_from_slice(episode_to_line(ep)?.as_bytes());
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&out).map_err(|e| io_err(path, e))
}

pub fn read_episodes(path: &Path) -> Result<Vec<Trajectory>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(episode_from_line(&line).map_err(|e| Error::Episode {
            episode: k,
            source: Box::new(e),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{rollout_env, LatticeLayout, QuadKind, RandomExploration};

    #[test]
    fn rope_episode_round_trips_bitwise() {
        let cfg = EnvConfig::rope(5, 11);
        let ep = rollout_env(&cfg, &mut RandomExploration::new(1.0, 3), 20).unwrap();
        let back = episode_from_line(&episode_to_line(&ep).unwrap()).unwrap();
        assert_eq!(back, ep);
    }

    #[test]
    fn lattice_episode_keeps_hidden_actuation() {
        let mut layout = LatticeLayout::block(2, 1, QuadKind::Soft);
        layout.cells[0].kind = QuadKind::Actuated;
        let cfg = EnvConfig::soft_lattice(layout, 2);
        let ep = rollout_env(&cfg, &mut RandomExploration::new(2.0, 4), 10).unwrap();
        let back = episode_from_line(&episode_to_line(&ep).unwrap()).unwrap();
        assert_eq!(back, ep);
    }

    #[test]
    fn truncated_line_is_rejected() {
        let cfg = EnvConfig::rope(4, 1);
        let ep = rollout_env(&cfg, &mut RandomExploration::new(1.0, 1), 5).unwrap();
        let line = episode_to_line(&ep).unwrap();
        assert!(episode_from_line(&line[..line.len() / 2]).is_err());
    }
}
