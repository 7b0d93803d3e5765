//! Run configuration file.
//!
//! A run is described by one TOML document:
//!
//! ```toml
//! schema_version = 1
//! seed = 0
//! output_dir = "runs/background-xy"
//!
//! [env]
//! variant = "background"
//! mixing = "random-orthogonal"
//!
//! [model]
//! variant = "xy"
//! beta = 0.25
//!
//! [policy]
//! algo = "dynamics-backprop"
//!
//! [train]
//! total_env_steps = 50000
//!
//! [probe]
//! policy_episodes = 100
//! ```
//!
//! Every table and key except `schema_version` is optional and falls back
//! to its default; unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, EnvVariant, Mixing};
use crate::error::{Error, Result};
use crate::policy::{Algo, FeatureSource, PolicyConfig};
use crate::probe::ProbeConfig;
use crate::trainer::TrainConfig;
use crate::world_model::{ModelConfig, ModelVariant};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: default_output_dir(),
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(text, &e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.env.validate()?;
        self.model.validate()?;
        self.policy.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if self.policy.algo == Algo::LatentSac && self.train.segment_length < 2 {
            return Err(Error::config("latent-sac needs train.segment_length >= 2"));
        }
        Ok(())
    }
}

fn span_hint(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

/// Model column of the preset grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetModel {
    Variant(ModelVariant),
    /// True-state SAC reference, no world model in the loop.
    OracleState,
}

impl PresetModel {
    pub fn name(self) -> &'static str {
        match self {
            PresetModel::Variant(v) => v.name(),
            PresetModel::OracleState => "oracle-state",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "oracle-state" {
            return Some(PresetModel::OracleState);
        }
        ModelVariant::parse(s).map(PresetModel::Variant)
    }
}

/// Environment variants in the shipped grid.
pub const PRESET_ENVS: [EnvVariant; 4] = [
    EnvVariant::Noiseless,
    EnvVariant::Background,
    EnvVariant::BackgroundSensor,
    EnvVariant::BackgroundJitter,
];

/// Desk-scale configuration for one grid cell.
pub fn desk_preset(env: EnvVariant, model: PresetModel, algo: Algo) -> RunConfig {
    let mut run = RunConfig {
        seed: 0,
        output_dir: PathBuf::from(format!(
            "runs/{}-{}-{}",
            env.name().replace('+', "-"),
            model.name(),
            algo.name()
        )),
        ..RunConfig::default()
    };
    run.env = EnvConfig {
        variant: env,
        mixing: Mixing::RandomOrthogonal,
        episode_cap: 500,
        ..EnvConfig::default()
    };
    run.model.hidden_width = 64;
    run.model.embed_dim = 64;
    run.model.learning_rate = 1e-3;
    // 3 free nats suit 30-dim stochastic states; desk latents have 8 (16 monolithic).
    run.model.free_nats = 1.0;
    run.model.beta = if env == EnvVariant::Noiseless { 1.0 } else { 0.25 };
    run.policy.algo = algo;
    run.policy.hidden_width = 64;
    run.policy.actor_lr = 3e-4;
    run.policy.value_lr = 3e-4;
    run.policy.imagination_starts = 128;
    run.train = TrainConfig {
        total_env_steps: 50_000,
        prefill_episodes: 5,
        train_steps_per_episode: 25,
        batch_size: 16,
        segment_length: 32,
        buffer_capacity_steps: 1_000_000,
        checkpoint_every_episodes: 10,
        eval_every_episodes: 10,
        eval_episodes: 5,
    };
    run.probe.policy_episodes = 20;
    run.probe.random_episodes = 20;
    match model {
        PresetModel::Variant(v) => run.model.variant = v,
        PresetModel::OracleState => {
            run.policy.algo = Algo::LatentSac;
            run.policy.features = FeatureSource::OracleState;
        }
    }
    run
}

/// Parses `<env>/<model>/<algo>`, e.g. `background/xy/dynamics-backprop`.
pub fn preset(name: &str) -> Result<RunConfig> {
    let parts: Vec<&str> = name.split('/').collect();
    let bad = || Error::config(format!("unknown preset `{name}`; expected <env>/<model>/<algo>, see `preset_names()`"));
    let [e, m, a] = parts[..] else {
        return Err(bad());
    };
    let env = EnvVariant::parse(e).filter(|v| PRESET_ENVS.contains(v)).ok_or_else(bad)?;
    let model = PresetModel::parse(m).ok_or_else(bad)?;
    let algo = Algo::parse(a).ok_or_else(bad)?;
    if model == PresetModel::OracleState && algo != Algo::LatentSac {
        return Err(bad());
    }
    Ok(desk_preset(env, model, algo))
}

/// Every shipped preset name.
pub fn preset_names() -> Vec<String> {
    let mut out = Vec::new();
    for env in PRESET_ENVS {
        for model in ModelVariant::ALL {
            for algo in [Algo::DynamicsBackprop, Algo::LatentSac] {
                out.push(format!("{}/{}/{}", env.name(), model.name(), algo.name()));
            }
        }
        out.push(format!("{}/oracle-state/latent-sac", env.name()));
    }
    out
}
