//! In-memory walkthrough datasets: environments, trajectories, per-step frame
//! features, local-state labels and room labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{generate_walkthrough, walkthrough_seed, AgentError, Pose, Walkthrough};
use crate::localstate::{local_state_label, DirectionParams, LocalStateLabel};
use crate::observation::{egocentric_features, ObservationParams};
use crate::worldgen::{generate_environment, room_at, EnvironmentSpec, GenParams, WorldError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("environment {seed}: {source}")]
    World { seed: u64, source: WorldError },
    #[error("walkthrough {index} in environment {seed}: {source}")]
    Agent { seed: u64, index: usize, source: AgentError },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub env_seeds: Vec<u64>,
    pub walks_per_env: usize,
    pub steps: usize,
    pub seed: u64,
    pub gen: GenParams,
    pub obs: ObservationParams,
    pub direction: DirectionParams,
}

impl DatasetConfig {
    /// Desk split: `n_envs` consecutive environment seeds from `first_env`.
    pub fn desk(first_env: u64, n_envs: usize, walks_per_env: usize, seed: u64) -> Self {
        Self {
            env_seeds: (first_env..first_env + n_envs as u64).collect(),
            walks_per_env,
            steps: 128,
            seed,
            gen: GenParams::default(),
            obs: ObservationParams::default(),
            direction: DirectionParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Index into `Dataset::envs`.
    pub env: usize,
    pub walkthrough: Walkthrough,
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<LocalStateLabel>,
    /// Room label at each step; `None` in doorways.
    pub rooms: Vec<Option<usize>>,
}

impl Episode {
    pub fn poses(&self) -> &[Pose] {
        &self.walkthrough.poses
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub envs: Vec<EnvironmentSpec>,
    pub episodes: Vec<Episode>,
    pub obs: ObservationParams,
    pub direction: DirectionParams,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.features[0].len())
    }

    pub fn n_classes(&self) -> usize {
        self.envs.first().map_or(0, |e| e.n_object_classes())
    }

    pub fn env_of(&self, episode: &Episode) -> &EnvironmentSpec {
        &self.envs[episode.env]
    }
}

/// Mixes a base seed with a sequence of tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z ^= t.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Runs `f` on a pool of `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, DatasetError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| DatasetError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Features, labels and rooms for a walkthrough in `env`.
pub fn annotate(env: &EnvironmentSpec, env_index: usize, walkthrough: Walkthrough, obs: &ObservationParams, direction: &DirectionParams) -> Episode {
    let features = walkthrough.poses.iter().map(|p| egocentric_features(env, p, obs)).collect();
    let labels = walkthrough.poses.iter().map(|p| local_state_label(env, p, direction)).collect();
    let rooms = walkthrough.poses.iter().map(|p| room_at(env, p.position()).ok().flatten()).collect();
    Episode { env: env_index, walkthrough, features, labels, rooms }
}

pub fn build_dataset(cfg: &DatasetConfig, workers: usize) -> Result<Dataset, DatasetError> {
    if cfg.env_seeds.is_empty() || cfg.walks_per_env == 0 {
        return Err(DatasetError::Empty);
    }
    with_workers(workers, || {
        let envs = cfg
            .env_seeds
            .par_iter()
            .map(|&seed| generate_environment(seed, &cfg.gen).map_err(|source| DatasetError::World { seed, source }))
            .collect::<Result<Vec<_>, _>>()?;
        let jobs: Vec<(usize, usize)> = (0..envs.len()).flat_map(|e| (0..cfg.walks_per_env).map(move |w| (e, w))).collect();
        let episodes = jobs
            .par_iter()
            .map(|&(e, w)| {
                let env = &envs[e];
                let seed = walkthrough_seed(cfg.seed, env.seed, w as u64);
                let walk = generate_walkthrough(env, seed, cfg.steps)
                    .map_err(|source| DatasetError::Agent { seed: env.seed, index: w, source })?;
                Ok(annotate(env, e, walk, &cfg.obs, &cfg.direction))
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        Ok(Dataset { envs, episodes, obs: cfg.obs, direction: cfg.direction })
    })?
}
