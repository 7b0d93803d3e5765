//! Fixtures shared by the benchmarks.

use dmdp_core::env::{EnvConfig, EnvVariant, Mixing};
use dmdp_core::replay::{ReplayBuffer, SegmentBatch};
use dmdp_core::rng::seeded;
use dmdp_core::trainer::{run_episode, Controller};
use dmdp_core::world_model::{ModelConfig, WorldModel};
use dmdp_core::Result;

pub fn desk_env() -> EnvConfig {
    EnvConfig {
        variant: EnvVariant::Background,
        mixing: Mixing::RandomOrthogonal,
        episode_cap: 500,
        ..EnvConfig::default()
    }
}

pub fn desk_model(env: &EnvConfig) -> Result<WorldModel> {
    let cfg = ModelConfig {
        hidden_width: 64,
        embed_dim: 64,
        ..ModelConfig::default()
    };
    WorldModel::new(cfg, env.obs_dim(), env.action_dim(), 0)
}

/// A buffer of random episodes and one sampled segment batch.
pub fn desk_segment(env: &EnvConfig, batch: usize, len: usize) -> Result<SegmentBatch> {
    let mut e = dmdp_core::env::Env::new(env.clone())?;
    let mut rng = seeded(0, 0);
    let mut buf = ReplayBuffer::new(1_000_000);
    for i in 0..3 {
        buf.push(run_episode(&mut e, Controller::Random, i, &mut rng)?.episode);
    }
    buf.sample_segments(batch, len, &mut rng)
}
