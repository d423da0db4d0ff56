//! Deterministic episode generation and the on-disk dataset layout.

use std::fs;
use std::path::Path;

use ckpm_core::dataset::{read_episodes, write_episodes};
use ckpm_core::envs::{rollout_env, EnvConfig, EnvKind, LatticeLayout, RandomExploration, Trajectory};
use ckpm_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::experiment::ExperimentSpec;
use crate::report::{io_err, sha256_hex};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const EXTRAPOLATION_FILE: &str = "extrapolate.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Independent seed streams.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Train = 1,
    Test = 2,
    Extrapolation = 3,
    Sysid = 4,
    Policy = 5,
}

/// SplitMix64 finalizer over `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    let mut z = base
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The template with `n` objects and episode seed `seed`. Lattices get a
/// random connected layout unless the template already has `n` cells.
pub fn env_for(template: &EnvConfig, n: usize, seed: u64) -> Result<EnvConfig> {
    let mut cfg = template.clone();
    cfg.num_objects = n;
    cfg.seed = seed;
    if cfg.env_kind == EnvKind::SoftLattice2D && cfg.layout.as_ref().is_none_or(|l| l.cells.len() != n) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.layout = Some(LatticeLayout::random(n, &mut rng));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `states` states driven by exploration noise seeded from the config.
pub fn generate_episode(cfg: &EnvConfig, states: usize) -> Result<Trajectory> {
    let mut policy = RandomExploration::new(cfg.params.action_bound, derive_seed(cfg.seed, Stream::Policy, 0));
    rollout_env(cfg, &mut policy, states)
}

fn generate_set(spec: &ExperimentSpec, stream: Stream, range: [usize; 2], count: usize) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream, u64::MAX));
    (0..count)
        .map(|k| {
            let n = rng.random_range(range[0]..=range[1]);
            let cfg = env_for(&spec.env, n, derive_seed(spec.seed, stream, k as u64))?;
            generate_episode(&cfg, spec.episode_len).map_err(|e| Error::Episode {
                episode: k,
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    /// Test-sized set drawn from the extrapolation object range.
    pub extrapolation: Vec<Trajectory>,
}

pub fn generate(spec: &ExperimentSpec) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_set(spec, Stream::Train, spec.object_count_range, spec.train_count())?,
        test: generate_set(spec, Stream::Test, spec.object_count_range, spec.test_count())?,
        extrapolation: generate_set(spec, Stream::Extrapolation, spec.extrapolation_range, spec.test_count())?,
    })
}

/// Fresh episodes of the system in `cfg` (same objects and physical
/// parameters, new initial states and exploration noise) totalling
/// `transitions` transitions; the last episode is cut short when needed.
pub fn sysid_episodes(spec: &ExperimentSpec, cfg: &EnvConfig, transitions: usize, salt: u64) -> Result<Vec<Trajectory>> {
    let per = spec.episode_len - 1;
    let count = transitions.div_ceil(per);
    let base = derive_seed(spec.seed ^ cfg.seed, Stream::Sysid, salt);
    let mut left = transitions;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut sys = cfg.clone();
        sys.seed = derive_seed(base, Stream::Sysid, k as u64);
        let take = left.min(per);
        out.push(generate_episode(&sys, take + 1)?);
        left -= take;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub env_kind: EnvKind,
    pub seed: u64,
    pub episodes: usize,
    pub train: usize,
    pub test: usize,
    pub extrapolation: usize,
    pub episode_len: usize,
    pub object_count_range: [usize; 2],
    pub extrapolation_range: [usize; 2],
    /// File name → SHA-256 of its bytes.
    pub files: std::collections::BTreeMap<String, String>,
}

pub fn write_dataset(spec: &ExperimentSpec, data: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut files = std::collections::BTreeMap::new();
    for (name, eps) in [
        (TRAIN_FILE, &data.train),
        (TEST_FILE, &data.test),
        (EXTRAPOLATION_FILE, &data.extrapolation),
    ] {
        let path = dir.join(name);
        write_episodes(&path, eps)?;
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        files.insert(name.to_string(), sha256_hex(&bytes));
    }
    let manifest = Manifest {
        env_kind: spec.env.env_kind,
        seed: spec.seed,
        episodes: spec.episodes,
        train: data.train.len(),
        test: data.test.len(),
        extrapolation: data.extrapolation.len(),
        episode_len: spec.episode_len,
        object_count_range: spec.object_count_range,
        extrapolation_range: spec.extrapolation_range,
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn load_split(dir: &Path, file: &str) -> Result<Vec<Trajectory>> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(Error::Config(format!("{} not found; run datagen first", path.display())));
    }
    read_episodes(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentSpec {
        ExperimentSpec {
            episodes: 10,
            episode_len: 12,
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn split_sizes_and_episode_shapes() {
        let spec = ExperimentSpec {
            episode_len: 100,
            ..small()
        };
        let data = generate(&spec).unwrap();
        assert_eq!((data.train.len(), data.test.len(), data.extrapolation.len()), (9, 1, 1));
        for ep in data.train.iter().chain(&data.test) {
            assert_eq!((ep.states.len(), ep.controls.len()), (100, 99));
            assert!((5..=9).contains(&ep.config.num_objects));
        }
        assert!((10..=14).contains(&data.extrapolation[0].config.num_objects));
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate(&small()).unwrap();
        assert_eq!(a, generate(&small()).unwrap());
        let other = ExperimentSpec { seed: 1, ..small() };
        assert_ne!(a.train, generate(&other).unwrap().train);
    }

    #[test]
    fn sysid_data_matches_the_system_and_budget() {
        let spec = small();
        let cfg = env_for(&spec.env, 6, 77).unwrap();
        let eps = sysid_episodes(&spec, &cfg, 25, 0).unwrap();
        assert_eq!(eps.iter().map(|e| e.controls.len()).sum::<usize>(), 25);
        assert_eq!(eps.len(), 3);
        for e in &eps {
            assert_eq!(e.config.num_objects, 6);
            assert_eq!(e.config.params, cfg.params);
            assert_ne!(e.config.seed, cfg.seed);
        }
        assert_ne!(eps[0].states[0], eps[1].states[0]);
    }

    #[test]
    fn lattice_template_gets_layouts_of_the_right_size() {
        let spec = ExperimentSpec::soft_lattice();
        let cfg = env_for(&spec.env, 7, 3).unwrap();
        assert_eq!(cfg.layout.unwrap().cells.len(), 7);
    }

    #[test]
    fn seeds_differ_across_streams_and_indices() {
        let s: std::collections::BTreeSet<u64> = (0..100)
            .flat_map(|k| [derive_seed(0, Stream::Train, k), derive_seed(0, Stream::Test, k)])
            .collect();
        assert_eq!(s.len(), 200);
    }
}
