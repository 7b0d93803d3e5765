//! Online loop: prefill with random episodes, then alternate model and
//! policy updates with policy-driven collection.

mod checkpoint;
mod collect;
mod metrics;

pub use checkpoint::{load_buffer, save_buffer, TrainerState, CHECKPOINT_FINAL, CHECKPOINT_LATEST};
pub use collect::{derive_seed, run_episode, Controller, EpisodeRecord, Filter};
pub use metrics::{read_metrics, MetricsLog, MetricsRecord};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{Env, SIGNAL_DIM};
use crate::error::{Error, Result};
use crate::policy::{apply_update, ActMode, Agent, FeatureSource, Transitions};
use crate::replay::{ReplayBuffer, SegmentBatch};
use crate::rng::{seeded, SimRng};
use crate::tensor::{Adam, Tape, Tensor};
use crate::world_model::{LatentSnapshot, Sampling, WorldModel};

const SEED_TAG_TRAIN_EPISODE: u64 = 1;
const STREAM_TRAIN: u64 = 10;
const STREAM_COLLECT: u64 = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Stop once this many environment steps (counting repeats) were taken.
    pub total_env_steps: usize,
    pub prefill_episodes: usize,
    /// Model and policy updates between collected episodes.
    pub train_steps_per_episode: usize,
    pub batch_size: usize,
    pub segment_length: usize,
    pub buffer_capacity_steps: usize,
    /// Write `ckpt-latest` every this many collected episodes; `0` only
    /// writes the final checkpoint.
    pub checkpoint_every_episodes: usize,
    /// Evaluate every this many collected episodes; `0` disables.
    pub eval_every_episodes: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_env_steps: 1_000_000,
            prefill_episodes: 5,
            train_steps_per_episode: 100,
            batch_size: 50,
            segment_length: 50,
            buffer_capacity_steps: 1_000_000,
            checkpoint_every_episodes: 10,
            eval_every_episodes: 0,
            eval_episodes: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("total_env_steps", self.total_env_steps),
            ("batch_size", self.batch_size),
            ("segment_length", self.segment_length),
            ("buffer_capacity_steps", self.buffer_capacity_steps),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Outcome of [`Trainer::run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_checkpoint: Option<PathBuf>,
    pub episodes: u64,
    pub env_steps: u64,
    pub update_steps: u64,
}

pub struct Trainer {
    run: RunConfig,
    env: Env,
    pub model: WorldModel,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    state: TrainerState,
    train_rng: SimRng,
    collect_rng: SimRng,
    metrics: MetricsLog,
    out_dir: Option<PathBuf>,
    started: Instant,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    /// Fresh run. With `out_dir`, metrics and checkpoints go there and the
    /// resolved config is written as `config.toml`.
    pub fn new(run: RunConfig, out_dir: Option<&Path>) -> Result<Self> {
        let seed = run.seed;
        let (env, model, agent) = build_parts(&run)?;
        let metrics = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("config.toml"), run.to_toml_string()?)?;
                MetricsLog::append_to(dir.join("metrics.jsonl"))?
            }
            None => MetricsLog::in_memory(),
        };
        Ok(Self {
            buffer: ReplayBuffer::new(run.train.buffer_capacity_steps),
            env,
            model,
            agent,
            state: TrainerState::default(),
            train_rng: seeded(seed, STREAM_TRAIN),
            collect_rng: seeded(seed, STREAM_COLLECT),
            metrics,
            out_dir: out_dir.map(Path::to_path_buf),
            started: Instant::now(),
            last_checkpoint: None,
            run,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    /// Lets a resumed run extend its budget or cadences.
    pub fn train_config_mut(&mut self) -> &mut crate::trainer::TrainConfig {
        &mut self.run.train
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        self.metrics.records()
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    fn uses_model(&self) -> bool {
        self.run.policy.features == FeatureSource::Latent
    }

    fn wall_time(&self) -> f64 {
        self.state.wall_time_offset + self.started.elapsed().as_secs_f64()
    }

    fn record(&mut self, values: BTreeMap<String, f64>) -> Result<()> {
        if let Some((k, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numerical {
                step: self.state.update_step as usize,
                detail: format!("metric {k} is {v}"),
                last_checkpoint: None,
            });
        }
        let rec = MetricsRecord {
            step: self.state.update_step,
            wall_time: self.wall_time(),
            values,
        };
        self.metrics.push(rec)
    }

    fn controller(&self, mode: ActMode) -> Controller<'_> {
        Controller::Agent {
            model: Some(&self.model),
            agent: &self.agent,
            mode,
        }
    }

    fn store_episode(&mut self, rec: EpisodeRecord, prefill: bool) -> Result<()> {
        self.state.env_steps += rec.env_steps as u64;
        self.state.episodes += 1;
        self.state.episode_returns.push(rec.total_return);
        let mut values = BTreeMap::new();
        values.insert("episode/return".to_string(), rec.total_return);
        values.insert("episode/length".to_string(), (rec.episode.len() - 1) as f64);
        values.insert("episode/env_steps".to_string(), self.state.env_steps as f64);
        values.insert("episode/prefill".to_string(), f64::from(u8::from(prefill)));
        self.buffer.push(rec.episode);
        self.record(values)
    }

    /// Collects `prefill_episodes` random episodes.
    pub fn prefill(&mut self) -> Result<()> {
        for _ in 0..self.run.train.prefill_episodes {
            let seed = derive_seed(self.run.seed, SEED_TAG_TRAIN_EPISODE, self.state.episodes);
            let rec = run_episode(&mut self.env, Controller::Random, seed, &mut self.collect_rng)?;
            self.store_episode(rec, true)?;
        }
        self.metrics.flush()
    }

    /// One exploration episode with the current policy.
    pub fn collect_episode(&mut self) -> Result<f64> {
        let seed = derive_seed(self.run.seed, SEED_TAG_TRAIN_EPISODE, self.state.episodes);
        let mut env = self.env.clone();
        let mut rng = self.collect_rng.clone();
        let rec = run_episode(&mut env, self.controller(ActMode::Explore), seed, &mut rng)?;
        self.env = env;
        self.collect_rng = rng;
        let ret = rec.total_return;
        self.store_episode(rec, false)?;
        Ok(ret)
    }

    /// Mean and std of eval-mode returns over fixed seeds.
    pub fn evaluate(&self, episodes: usize) -> Result<(f64, f64)> {
        let stats = crate::probe::evaluate_controller(&self.run.env, self.controller(ActMode::Eval), episodes, self.run.seed)?;
        Ok((stats.mean, stats.std))
    }

    /// One model update followed by one policy update.
    pub fn train_step(&mut self) -> Result<()> {
        let tc = &self.run.train;
        let segment = self.buffer.sample_segments(tc.batch_size, tc.segment_length, &mut self.train_rng)?;
        let mut values = BTreeMap::new();
        if self.uses_model() {
            let snapshots = self.model_step(&segment, &mut values)?;
            self.policy_step_latent(&segment, &snapshots, &mut values)?;
        } else {
            let tr = oracle_transitions(&segment)?;
            let Agent::LatentSac(sac) = &mut self.agent else {
                return Err(Error::config("oracle-state features require latent-sac"));
            };
            values.extend(sac.update(&tr, &mut self.train_rng)?);
        }
        self.state.update_step += 1;
        self.record(values)
    }

    fn model_step(&mut self, segment: &SegmentBatch, values: &mut BTreeMap<String, f64>) -> Result<Vec<LatentSnapshot>> {
        let tape = Tape::new();
        let p = self.model.store.bind(&tape);
        let (observed, out) = self.model.loss(&tape, &p, segment, &mut Sampling::Random(&mut self.train_rng))?;
        let grads = tape.backward(out.terms.total)?;
        let cfg = self.model.config();
        let (lr, clip) = (cfg.learning_rate, cfg.grad_clip);
        let norm = apply_update(&mut self.model.store, &p, &grads, &Adam::new(lr), Some(clip))?;
        for (k, v) in out.breakdown.named_values() {
            values.insert(k.to_string(), v);
        }
        values.insert("model/grad_norm".to_string(), norm);
        Ok(observed.posteriors.iter().map(|s| s.snapshot()).collect())
    }

    fn policy_step_latent(
        &mut self,
        segment: &SegmentBatch,
        snapshots: &[LatentSnapshot],
        values: &mut BTreeMap<String, f64>,
    ) -> Result<()> {
        let control = self.model.control_factor();
        match &mut self.agent {
            Agent::DynamicsBackprop(db) => {
                let all = LatentSnapshot::concat(snapshots)?;
                let n = all.deter[0].rows();
                let k = db.config().imagination_starts;
                let starts = if k > 0 && k < n {
                    let idx: Vec<usize> = (0..k).map(|_| self.train_rng.gen_range(0..n)).collect();
                    all.select_rows(&idx)?
                } else {
                    all
                };
                values.extend(db.update(&self.model, &starts, &mut self.train_rng)?);
            }
            Agent::LatentSac(sac) => {
                let len = snapshots.len();
                if len < 2 {
                    return Err(Error::config("latent-sac needs segments of at least 2 steps"));
                }
                let feats: Vec<Tensor> = snapshots
                    .iter()
                    .map(|s| s.features(control).expect("control factor"))
                    .collect();
                let tape = Tape::new();
                let p = self.model.store.bind_frozen(&tape);
                let mut parts = Vec::with_capacity(len - 1);
                for t in 0..len - 1 {
                    let r = self.model.reward_x_mean(&p, tape.constant(feats[t + 1].clone()))?;
                    parts.push(Transitions {
                        features: feats[t].clone(),
                        actions: segment.actions[t + 1].clone(),
                        rewards: (*r.value()).clone(),
                        next_features: feats[t + 1].clone(),
                    });
                }
                let tr = Transitions::concat(&parts)?;
                values.extend(sac.update(&tr, &mut self.train_rng)?);
            }
        }
        Ok(())
    }

    /// Runs until the env-step budget is spent, then writes `ckpt-final`.
    pub fn run(&mut self) -> Result<RunSummary> {
        match self.run_inner() {
            Ok(s) => Ok(s),
            Err(Error::Numerical { detail, .. }) => {
                let step = self.state.update_step as usize;
                if let Some(dir) = &self.out_dir {
                    let dump = serde_json::json!({
                        "step": step,
                        "detail": detail,
                        "last_checkpoint": self.last_checkpoint,
                        "env_steps": self.state.env_steps,
                    });
                    let _ = std::fs::write(dir.join("abort.json"), serde_json::to_string_pretty(&dump)?);
                }
                let _ = self.metrics.flush();
                Err(Error::Numerical {
                    step,
                    detail,
                    last_checkpoint: self.last_checkpoint.clone(),
                })
            }
            Err(e) => Err(e),
        }
    }

    fn run_inner(&mut self) -> Result<RunSummary> {
        if self.buffer.num_episodes() == 0 {
            self.prefill()?;
        }
        let total = self.run.train.total_env_steps as u64;
        while self.state.env_steps < total {
            if self.buffer.num_windows(self.run.train.segment_length) > 0 {
                for _ in 0..self.run.train.train_steps_per_episode {
                    self.train_step()?;
                }
            }
            self.collect_episode()?;
            let collected = self.state.episodes - self.run.train.prefill_episodes as u64;
            let tc = &self.run.train;
            if tc.eval_every_episodes > 0 && collected % tc.eval_every_episodes as u64 == 0 {
                let (m, s) = self.evaluate(tc.eval_episodes)?;
                let mut values = BTreeMap::new();
                values.insert("eval/return_mean".to_string(), m);
                values.insert("eval/return_std".to_string(), s);
                values.insert("eval/env_steps".to_string(), self.state.env_steps as f64);
                self.record(values)?;
            }
            let every = self.run.train.checkpoint_every_episodes as u64;
            if every > 0 && collected % every == 0 && self.out_dir.is_some() {
                self.checkpoint(CHECKPOINT_LATEST)?;
            }
            self.metrics.flush()?;
        }
        let final_checkpoint = match self.out_dir {
            Some(_) => Some(self.checkpoint(CHECKPOINT_FINAL)?),
            None => None,
        };
        Ok(RunSummary {
            final_checkpoint,
            episodes: self.state.episodes,
            env_steps: self.state.env_steps,
            update_steps: self.state.update_step,
        })
    }

    /// Writes a checkpoint directory under the output dir.
    pub fn checkpoint(&mut self, name: &str) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .as_ref()
            .ok_or_else(|| Error::config("checkpointing needs an output directory"))?
            .join(name);
        self.save_to(&dir)?;
        self.last_checkpoint = Some(dir.clone());
        Ok(dir)
    }

    /// Writes the full training state to `dir`, replacing it atomically.
    pub fn save_to(&mut self, dir: &Path) -> Result<()> {
        self.metrics.flush()?;
        let mut state = self.state.clone();
        state.wall_time_offset = self.wall_time();
        state.train_rng = Some(self.train_rng.clone());
        state.collect_rng = Some(self.collect_rng.clone());
        checkpoint::write(dir, &self.run, &self.model, &self.agent, &self.buffer, &state)
    }

    /// Restores a run from a checkpoint directory.
    ///
    /// Metrics continue in `out_dir` (or the checkpoint's parent directory).
    pub fn resume(dir: &Path, out_dir: Option<&Path>) -> Result<Self> {
        let run = checkpoint::read_config(dir)?;
        let out = out_dir.map(Path::to_path_buf).or_else(|| dir.parent().map(Path::to_path_buf));
        let mut t = Trainer::new(run, out.as_deref())?;
        let state = checkpoint::restore(dir, &mut t.model, &mut t.agent, &mut t.buffer)?;
        t.train_rng = state.train_rng.clone().ok_or_else(|| Error::Format {
            path: dir.to_path_buf(),
            detail: "missing rng state".into(),
        })?;
        t.collect_rng = state.collect_rng.clone().ok_or_else(|| Error::Format {
            path: dir.to_path_buf(),
            detail: "missing rng state".into(),
        })?;
        t.state = state;
        t.last_checkpoint = Some(dir.to_path_buf());
        Ok(t)
    }
}

fn build_parts(run: &RunConfig) -> Result<(Env, WorldModel, Agent)> {
    run.validate()?;
    let env = Env::new(run.env.clone())?;
    let seed = run.seed;
    let model = WorldModel::new(run.model.clone(), env.obs_dim(), env.action_dim(), derive_seed(seed, 100, 0))?;
    let feature_dim = match run.policy.features {
        FeatureSource::Latent => model.feature_dim(model.control_factor()),
        FeatureSource::OracleState => SIGNAL_DIM,
    };
    let agent = Agent::new(&run.policy, feature_dim, env.action_dim(), derive_seed(seed, 101, 0))?;
    Ok((env, model, agent))
}

/// Model, agent and counters of a checkpoint, without the replay buffer.
pub struct LoadedCheckpoint {
    pub run: RunConfig,
    pub model: WorldModel,
    pub agent: Agent,
    pub state: TrainerState,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let run = checkpoint::read_config(dir)?;
    let (_, mut model, mut agent) = build_parts(&run)?;
    let state = checkpoint::restore_params(dir, &mut model, &mut agent)?;
    Ok(LoadedCheckpoint { run, model, agent, state })
}

/// Ground-truth signal features and real rewards from a segment.
fn oracle_transitions(seg: &SegmentBatch) -> Result<Transitions> {
    let len = seg.len();
    if len < 2 || seg.labels.is_empty() {
        return Err(Error::config("oracle transitions need labelled segments of at least 2 steps"));
    }
    let signal = |t: &Tensor| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r)[..SIGNAL_DIM].to_vec()).collect();
        Tensor::from_rows(&rows)
    };
    let mut parts = Vec::with_capacity(len - 1);
    for t in 0..len - 1 {
        parts.push(Transitions {
            features: signal(&seg.labels[t])?,
            actions: seg.actions[t + 1].clone(),
            rewards: seg.rewards[t + 1].clone(),
            next_features: signal(&seg.labels[t + 1])?,
        });
    }
    Transitions::concat(&parts)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}
