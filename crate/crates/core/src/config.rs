//! Training configuration document.
//!
//! Every section has defaults, so a config file only needs the fields it
//! changes. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{Morphology, NUM_JOINTS};
use crate::rewards::{CommandRanges, RewardMode, RewardWeights};
use crate::sim::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub num_envs: usize,
    pub steps_per_env: usize,
    pub minibatch_size: usize,
    pub desired_kl: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub max_grad_norm: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub init_std: f64,
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 5,
            num_envs: 64,
            steps_per_env: 24,
            minibatch_size: 256,
            desired_kl: 0.01,
            learning_rate: 1e-3,
            iterations: 500,
            max_grad_norm: 1.0,
            value_coef: 1.0,
            entropy_coef: 0.0,
            init_std: 0.25,
            checkpoint_interval: 50,
            seed: 1,
        }
    }
}

impl PpoConfig {
    pub fn batch_size(&self) -> usize {
        self.num_envs * self.steps_per_env
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmpConfig {
    pub gp_weight: f64,
    pub learning_rate: f64,
    pub replay_capacity: usize,
    /// Procedural clip length when no dataset directory is given.
    pub clip_duration: f64,
    pub clip_fps: f64,
}

impl Default for AmpConfig {
    fn default() -> Self {
        AmpConfig { gp_weight: 10.0, learning_rate: 1e-4, replay_capacity: 100_000, clip_duration: 1.1, clip_fps: 30.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { policy_hidden: vec![256, 128, 64], value_hidden: vec![256, 128, 64], disc_hidden: vec![512, 256] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub reward_mode: RewardMode,
    pub morphology: Morphology,
    pub sim: SimConfig,
    pub commands: CommandRanges,
    pub rewards: RewardWeights,
    pub ppo: PpoConfig,
    pub amp: AmpConfig,
    pub networks: NetworkConfig,
    /// Directory of clip files; the procedural gaits are used when absent.
    pub dataset: Option<PathBuf>,
    pub episode_length: f64,
    pub randomize: bool,
    /// Joint targets are the standing pose plus this times the policy action.
    pub action_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small enough to train on a laptop CPU. Forward commands are limited
    /// to `[0, 1.5]` m/s; backward walking does not fit the desk budget.
    pub fn desk() -> Self {
        TrainConfig {
            reward_mode: RewardMode::Amp,
            morphology: Morphology::default(),
            sim: SimConfig::default(),
            commands: CommandRanges { vx: [0.0, 1.5], ..CommandRanges::default() },
            rewards: RewardWeights::default(),
            ppo: PpoConfig::default(),
            amp: AmpConfig::default(),
            networks: NetworkConfig::default(),
            dataset: None,
            episode_length: 20.0,
            randomize: true,
            action_scale: 1.0,
        }
    }

    /// The original GPU-scale batch and network sizes.
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.commands = CommandRanges::default();
        c.ppo.num_envs = 5280;
        c.ppo.minibatch_size = 21_120;
        c.networks = NetworkConfig {
            policy_hidden: vec![512, 256, 128],
            value_hidden: vec![512, 256, 128],
            disc_hidden: vec![1024, 512],
        };
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "full" => Some(Self::full_scale()),
            _ => None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let config: TrainConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// PD targets for a policy action.
    pub fn joint_targets(&self, action: &[f64; NUM_JOINTS]) -> [f64; NUM_JOINTS] {
        let standing = self.morphology.standing_pose(self.morphology.nominal_height());
        std::array::from_fn(|j| standing[j] + self.action_scale * action[j])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.ppo;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(p.gamma > 0.0 && p.gamma <= 1.0) || !(p.lambda > 0.0 && p.lambda <= 1.0) {
            return bad(format!("gamma and lambda must lie in (0, 1], got {} and {}", p.gamma, p.lambda));
        }
        if p.epochs == 0 || p.num_envs == 0 || p.steps_per_env == 0 || p.minibatch_size == 0 {
            return bad("epochs, num_envs, steps_per_env and minibatch_size must be positive".into());
        }
        if p.batch_size() % p.minibatch_size != 0 {
            return bad(format!("minibatch size {} does not divide batch size {}", p.minibatch_size, p.batch_size()));
        }
        if !(p.learning_rate > 0.0) || !(p.init_std > 0.0) || !(p.clip > 0.0) {
            return bad("learning_rate, init_std and clip must be positive".into());
        }
        if !(self.action_scale > 0.0) {
            return bad(format!("action_scale must be positive, got {}", self.action_scale));
        }
        if !(self.episode_length > 0.0) {
            return bad(format!("episode_length must be positive, got {}", self.episode_length));
        }
        if self.amp.replay_capacity < p.minibatch_size {
            return bad("amp.replay_capacity must hold at least one minibatch".into());
        }
        self.morphology.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
