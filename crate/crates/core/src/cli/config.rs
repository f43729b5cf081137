//! Run configuration, its canonical form and the seed streams derived from it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envsuite::{toy_suite, TaskSpec, ACTION_DIM, OBS_DIM};
use crate::modnet::PolicyShape;
use crate::routing::RoutingFunction;
use crate::sacmt::SacConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid TOML: {0}")]
    Syntax(String),
    #[error("config key `{path}`: {message}")]
    Key { path: String, message: String },
    #[error("config key `{path}`: {message}")]
    Invalid { path: &'static str, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_modules: usize,
    pub module_width: usize,
    pub encoder_widths: Vec<usize>,
    pub routing_hidden: Vec<usize>,
    /// Routers see the state representation as well as the task embedding.
    pub route_on_state: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_modules: 8,
            module_width: 64,
            encoder_widths: vec![64],
            routing_hidden: vec![32],
            route_on_state: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Environment steps summed over all tasks.
    pub total_env_steps: u64,
    /// Steps with uniform random actions before updates start.
    pub warmup_env_steps: u64,
    /// Replay capacity summed over all tasks.
    pub buffer_capacity: usize,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub checkpoint_interval: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            total_env_steps: 200_000,
            warmup_env_steps: 2_000,
            buffer_capacity: 400_000,
            eval_interval: 10_000,
            eval_episodes: 10,
            checkpoint_interval: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub sac: SacConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "toy_suite")]
    pub suite: Vec<TaskSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetworkConfig::default(),
            sac: SacConfig::default(),
            training: TrainingConfig::default(),
            suite: toy_suite(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ConfigError::Key {
                path,
                message: inner.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Serialised form that every artifact is tied to.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }

    pub fn hash(&self) -> String {
        hex_sha256(self.canonical().as_bytes())
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape {
            n_modules: self.network.n_modules,
            module_width: self.network.module_width,
            encoder_widths: self.network.encoder_widths.clone(),
            routing_hidden: self.network.routing_hidden.clone(),
            obs_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            n_tasks: self.suite.len(),
            route_on_state: self.network.route_on_state,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |path: &'static str, message: &str| {
            Err(ConfigError::Invalid {
                path,
                message: message.to_string(),
            })
        };
        let net = &self.network;
        let sac = &self.sac;
        let tr = &self.training;
        if net.n_modules < 2 {
            return invalid("network.n_modules", "needs at least 2 modules");
        }
        if net.module_width == 0 {
            return invalid("network.module_width", "must be positive");
        }
        if net.encoder_widths.is_empty() || net.encoder_widths.contains(&0) {
            return invalid("network.encoder_widths", "needs at least one positive width");
        }
        if net.routing_hidden.contains(&0) {
            return invalid("network.routing_hidden", "widths must be positive");
        }
        if sac.k == 0 {
            return invalid("sac.k", "must be at least 1");
        }
        if sac.k > 1 && sac.routing == RoutingFunction::Hard {
            return invalid("sac.k", "hard routing selects a single source; set k = 1");
        }
        if !(0.0..=1.0).contains(&sac.gamma) {
            return invalid("sac.gamma", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&sac.polyak) {
            return invalid("sac.polyak", "must lie in [0, 1]");
        }
        for (path, v) in [
            ("sac.actor_lr", sac.actor_lr),
            ("sac.critic_lr", sac.critic_lr),
            ("sac.alpha_lr", sac.alpha_lr),
            ("sac.init_alpha", sac.init_alpha),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return invalid(path, "must be positive and finite");
            }
        }
        if !sac.reward_scale.is_finite() {
            return invalid("sac.reward_scale", "must be finite");
        }
        if sac.maskout_threshold.is_nan() || sac.maskout_threshold <= 0.0 {
            return invalid("sac.maskout_threshold", "must be positive (inf disables)");
        }
        if sac.batch_per_task == 0 {
            return invalid("sac.batch_per_task", "must be positive");
        }
        if self.suite.is_empty() {
            return invalid("suite", "needs at least one task");
        }
        if self.suite.iter().any(|t| t.horizon == 0) {
            return invalid("suite.horizon", "must be positive");
        }
        if tr.buffer_capacity < self.suite.len() * sac.batch_per_task {
            return invalid("training.buffer_capacity", "must hold one batch for every task");
        }
        if tr.eval_interval == 0 {
            return invalid("training.eval_interval", "must be positive");
        }
        if tr.checkpoint_interval == 0 {
            return invalid("training.checkpoint_interval", "must be positive");
        }
        Ok(())
    }

    /// Independent generator for one named purpose, so adding draws to one
    /// stream never shifts another.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        seed_stream(self.seed, name)
    }
}

pub fn seed_stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
