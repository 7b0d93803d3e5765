//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/config.toml          resolved run config
//! <dir>/model.bin            world-model parameters and optimizer moments
//! <dir>/model.toml           model config sidecar
//! <dir>/<store>.bin          one file per policy parameter store
//! <dir>/buffer.bin           replay buffer episodes
//! <dir>/trainer_state.json   counters, returns, rng states
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::policy::Agent;
use crate::replay::{Episode, ReplayBuffer};
use crate::rng::SimRng;
use crate::tensor::{read_archive, write_archive, Tensor};
use crate::world_model::WorldModel;

pub const CHECKPOINT_LATEST: &str = "ckpt-latest";
pub const CHECKPOINT_FINAL: &str = "ckpt-final";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub update_step: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub wall_time_offset: f64,
    pub episode_returns: Vec<f64>,
    pub train_rng: Option<SimRng>,
    pub collect_rng: Option<SimRng>,
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    obs_dim: usize,
    action_dim: usize,
    model: crate::world_model::ModelConfig,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub(crate) fn write(
    dir: &Path,
    run: &RunConfig,
    model: &WorldModel,
    agent: &Agent,
    buffer: &ReplayBuffer,
    state: &TrainerState,
) -> Result<()> {
    let tmp: PathBuf = {
        let mut s = dir.as_os_str().to_os_string();
        s.push(".partial");
        s.into()
    };
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    std::fs::write(tmp.join("config.toml"), run.to_toml_string()?)?;
    model.save(tmp.join("model.bin"))?;
    let sidecar = ModelSidecar {
        obs_dim: model.obs_dim(),
        action_dim: model.action_dim(),
        model: model.config().clone(),
    };
    std::fs::write(
        tmp.join("model.toml"),
        toml::to_string(&sidecar).map_err(|e| Error::config(e.to_string()))?,
    )?;
    for (name, store) in agent.stores() {
        store.save(tmp.join(format!("{name}.bin")))?;
    }
    save_buffer(tmp.join("buffer.bin"), buffer)?;
    std::fs::write(tmp.join("trainer_state.json"), serde_json::to_string(state)?)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

pub(crate) fn read_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join("config.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| format_err(&path, format!("cannot read: {e}")))?;
    RunConfig::from_toml_str(&text)
}

pub(crate) fn restore(
    dir: &Path,
    model: &mut WorldModel,
    agent: &mut Agent,
    buffer: &mut ReplayBuffer,
) -> Result<TrainerState> {
    let state = restore_params(dir, model, agent)?;
    *buffer = load_buffer(dir.join("buffer.bin"))?;
    Ok(state)
}

pub(crate) fn restore_params(dir: &Path, model: &mut WorldModel, agent: &mut Agent) -> Result<TrainerState> {
    model.load_params(dir.join("model.bin"))?;
    for (name, store) in agent.stores_mut() {
        store.load_into(dir.join(format!("{name}.bin")))?;
    }
    let path = dir.join("trainer_state.json");
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
}

pub fn save_buffer(path: impl AsRef<Path>, buffer: &ReplayBuffer) -> Result<()> {
    let mut records = vec![(
        "buffer/meta".to_string(),
        Tensor::vector(vec![buffer.capacity_steps() as f64, buffer.num_episodes() as f64]),
    )];
    for (i, ep) in buffer.episodes().enumerate() {
        let n = ep.len();
        records.push((
            format!("e{i}/dims"),
            Tensor::vector(vec![ep.obs_dim as f64, ep.action_dim as f64, ep.label_dim as f64]),
        ));
        records.push((format!("e{i}/obs"), Tensor::matrix(n, ep.obs_dim, ep.obs.clone())?));
        records.push((format!("e{i}/actions"), Tensor::matrix(n, ep.action_dim, ep.actions.clone())?));
        records.push((format!("e{i}/rewards"), Tensor::vector(ep.rewards.clone())));
        if ep.label_dim > 0 {
            records.push((format!("e{i}/labels"), Tensor::matrix(n, ep.label_dim, ep.labels.clone())?));
        }
    }
    write_archive(path, &records)
}

pub fn load_buffer(path: impl AsRef<Path>) -> Result<ReplayBuffer> {
    let path = path.as_ref();
    let records = read_archive(path)?;
    let mut it = records.into_iter().peekable();
    let meta = match it.next() {
        Some((name, t)) if name == "buffer/meta" && t.numel() == 2 => t,
        _ => return Err(format_err(path, "missing buffer header")),
    };
    let capacity = meta.data()[0] as usize;
    let count = meta.data()[1] as usize;
    let mut buffer = ReplayBuffer::new(capacity);
    let mut take = |want: &str| -> Result<Tensor> {
        match it.next() {
            Some((name, t)) if name == want => Ok(t),
            Some((name, _)) => Err(format_err(path, format!("expected {want}, found {name}"))),
            None => Err(format_err(path, format!("truncated before {want}"))),
        }
    };
    for i in 0..count {
        let dims = take(&format!("e{i}/dims"))?;
        let (od, ad, ld) = (dims.data()[0] as usize, dims.data()[1] as usize, dims.data()[2] as usize);
        let mut ep = Episode::new(od, ad, ld);
        ep.obs = take(&format!("e{i}/obs"))?.into_data();
        ep.actions = take(&format!("e{i}/actions"))?.into_data();
        ep.rewards = take(&format!("e{i}/rewards"))?.into_data();
        if ld > 0 {
            ep.labels = take(&format!("e{i}/labels"))?.into_data();
        }
        buffer.push(ep);
    }
    Ok(buffer)
}
