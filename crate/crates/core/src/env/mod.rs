//! Synthetic factored environments.
//!
//! The state splits into up to four blocks, one per combination of
//! controllable / uncontrollable and reward-relevant / reward-irrelevant:
//!
//! | block              | moved by actions | enters reward |
//! |--------------------|------------------|---------------|
//! | `signal`           | yes              | yes           |
//! | `ctrl_irrelevant`  | yes              | no            |
//! | `unctrl_relevant`  | no               | additively    |
//! | `unctrl_irrelevant`| no               | no            |
//!
//! The signal block is a point mass in the walled square `[-1, 1]^2`
//! chasing a goal, observed as `(pos - goal, velocity)`, with reward
//! `-|pos - goal|`. Uncontrollable
//! blocks draw from their own random streams, so for a fixed episode seed
//! they are the same under every action sequence.
//!
//! Observations are `Q (concat(blocks) + jitter)` where `Q` is the identity
//! or a fixed random orthogonal matrix.

mod dump;
mod jitter;

pub use dump::{read_dump, write_dump, TrajectoryRecord};
pub use jitter::{apply_jitter, JitterConfig, JitterState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIGNAL_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

const VEL_DECAY: f64 = 0.95;
// Velocity is measured in units that give it roughly unit spread under a
// random policy, comparable to the position offset.
const ACCEL_GAIN: f64 = 0.5;
const POS_GAIN: f64 = 0.02;
/// Half-width of the square the point mass lives in.
pub const ARENA: f64 = 1.0;
const CTRL_IRRELEVANT_DECAY: f64 = 0.9;
const CTRL_IRRELEVANT_GAIN: f64 = 0.3;

const STREAM_SIGNAL: u64 = 0;
const STREAM_UNCTRL_RELEVANT: u64 = 1;
const STREAM_UNCTRL_IRRELEVANT: u64 = 2;
const STREAM_JITTER: u64 = 3;
const STREAM_MIXING: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvVariant {
    #[serde(rename = "noiseless")]
    Noiseless,
    #[serde(rename = "background")]
    Background,
    #[serde(rename = "background+sensor")]
    BackgroundSensor,
    #[serde(rename = "background+jitter")]
    BackgroundJitter,
    #[serde(rename = "full")]
    Full,
}

impl EnvVariant {
    pub const ALL: [EnvVariant; 5] = [
        EnvVariant::Noiseless,
        EnvVariant::Background,
        EnvVariant::BackgroundSensor,
        EnvVariant::BackgroundJitter,
        EnvVariant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvVariant::Noiseless => "noiseless",
            EnvVariant::Background => "background",
            EnvVariant::BackgroundSensor => "background+sensor",
            EnvVariant::BackgroundJitter => "background+jitter",
            EnvVariant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn has_ctrl_irrelevant(self) -> bool {
        self == EnvVariant::Full
    }

    pub fn has_unctrl_relevant(self) -> bool {
        matches!(self, EnvVariant::BackgroundSensor | EnvVariant::Full)
    }

    pub fn has_unctrl_irrelevant(self) -> bool {
        self != EnvVariant::Noiseless
    }

    pub fn has_jitter(self) -> bool {
        matches!(self, EnvVariant::BackgroundJitter | EnvVariant::Full)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixing {
    Identity,
    RandomOrthogonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub variant: EnvVariant,
    pub ctrl_irrelevant_dim: usize,
    pub unctrl_irrelevant_dim: usize,
    pub mixing: Mixing,
    /// Seed of the fixed mixing matrix and action-push matrix.
    pub structure_seed: u64,
    /// Maximum environment steps per episode.
    pub episode_cap: usize,
    /// Environment steps per agent action.
    pub action_repeat: usize,
    /// AR(1) coefficient of the additive reward noise, per env step.
    pub reward_noise_coef: f64,
    /// Stationary std of the additive reward noise.
    pub reward_noise_std: f64,
    /// AR(1) coefficient of the reward-irrelevant background block.
    pub background_coef: f64,
    pub jitter: JitterConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            variant: EnvVariant::Background,
            ctrl_irrelevant_dim: 4,
            unctrl_irrelevant_dim: 16,
            mixing: Mixing::Identity,
            structure_seed: 7,
            episode_cap: 1000,
            action_repeat: 2,
            reward_noise_coef: 0.95,
            reward_noise_std: 0.5,
            background_coef: 0.95,
            jitter: JitterConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn with_variant(variant: EnvVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.variant;
        if v.has_ctrl_irrelevant() && self.ctrl_irrelevant_dim == 0 {
            return Err(Error::config("ctrl_irrelevant_dim must be positive for this variant"));
        }
        if v.has_unctrl_irrelevant() && self.unctrl_irrelevant_dim == 0 {
            return Err(Error::config("unctrl_irrelevant_dim must be positive for this variant"));
        }
        if self.episode_cap == 0 || self.action_repeat == 0 {
            return Err(Error::config("episode_cap and action_repeat must be positive"));
        }
        for (name, c) in [
            ("reward_noise_coef", self.reward_noise_coef),
            ("background_coef", self.background_coef),
        ] {
            if !(0.0..1.0).contains(&c) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {c}")));
            }
        }
        if self.reward_noise_std < 0.0 {
            return Err(Error::config("reward_noise_std must be non-negative"));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        let v = self.variant;
        SIGNAL_DIM
            + if v.has_ctrl_irrelevant() { self.ctrl_irrelevant_dim } else { 0 }
            + usize::from(v.has_unctrl_relevant())
            + if v.has_unctrl_irrelevant() { self.unctrl_irrelevant_dim } else { 0 }
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    /// The reward-noise process as observed and labelled: in units of its
    /// stationary std, so it is as visible as the other unit-spread blocks.
    /// The reward adds the raw value, `reward_noise_std` times this.
    pub fn noise_display(&self, raw: f64) -> f64 {
        if self.reward_noise_std > 0.0 {
            raw / self.reward_noise_std
        } else {
            raw
        }
    }

    /// Agent steps per episode: `ceil(cap / repeat)`.
    pub fn agent_steps_per_episode(&self) -> usize {
        self.episode_cap.div_ceil(self.action_repeat)
    }
}

/// Identifies one ground-truth block for probing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Block {
    Signal,
    CtrlIrrelevant,
    UnctrlRelevant,
    UnctrlIrrelevant,
}

impl Block {
    pub const ALL: [Block; 4] = [
        Block::Signal,
        Block::CtrlIrrelevant,
        Block::UnctrlRelevant,
        Block::UnctrlIrrelevant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Signal => "signal",
            Block::CtrlIrrelevant => "ctrl-irrelevant",
            Block::UnctrlRelevant => "unctrl-relevant",
            Block::UnctrlIrrelevant => "unctrl-irrelevant",
        }
    }
}

/// Ground-truth block values at one agent step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorLabels {
    pub signal: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctrl_irrelevant: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unctrl_relevant: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unctrl_irrelevant: Option<Vec<f64>>,
}

impl FactorLabels {
    pub fn block(&self, block: Block) -> Option<&[f64]> {
        match block {
            Block::Signal => Some(&self.signal),
            Block::CtrlIrrelevant => self.ctrl_irrelevant.as_deref(),
            Block::UnctrlRelevant => self.unctrl_relevant.as_deref(),
            Block::UnctrlIrrelevant => self.unctrl_irrelevant.as_deref(),
        }
    }

    pub fn present_blocks(&self) -> Vec<Block> {
        Block::ALL.into_iter().filter(|b| self.block(*b).is_some()).collect()
    }

    /// Blocks in observation order.
    pub fn concat(&self) -> Vec<f64> {
        Block::ALL
            .into_iter()
            .filter_map(|b| self.block(b))
            .flat_map(|s| s.iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvInfo {
    pub labels: FactorLabels,
    /// Summed `-|pos - goal|` over the repeated env steps.
    pub reward_signal: f64,
    /// Summed additive reward noise over the repeated env steps.
    pub reward_noise: f64,
    /// The per-env-step noise values that make up `reward_noise`.
    pub reward_noise_terms: Vec<f64>,
    pub jitter_offset: Option<Vec<f64>>,
    /// Environment steps elapsed in this episode.
    pub env_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: EnvInfo,
}

impl EnvStep {
    /// Ground-truth labels for probe regression targets.
    pub fn oracle_labels(&self) -> &FactorLabels {
        &self.info.labels
    }
}

/// Full ground-truth state.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
    pub ctrl_irrelevant: Vec<f64>,
    pub unctrl_relevant: f64,
    pub unctrl_irrelevant: Vec<f64>,
    pub jitter: Option<JitterState>,
    pub env_steps: usize,
}

impl EnvState {
    fn offset(&self) -> [f64; 2] {
        [self.position[0] - self.goal[0], self.position[1] - self.goal[1]]
    }
}

#[derive(Clone, Debug)]
pub struct Env {
    config: EnvConfig,
    /// Row-major `obs_dim x obs_dim` orthogonal matrix, if mixing.
    mixing: Option<Vec<f64>>,
    /// Row-major `ctrl_irrelevant_dim x ACTION_DIM`.
    push: Vec<f64>,
    state: Option<EnvState>,
    streams: Option<Streams>,
}

#[derive(Clone, Debug)]
struct Streams {
    unctrl_relevant: ChaCha8Rng,
    unctrl_irrelevant: ChaCha8Rng,
    jitter: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let n = config.obs_dim();
        let mut rng = stream(config.structure_seed, STREAM_MIXING);
        let mixing = match config.mixing {
            Mixing::Identity => None,
            Mixing::RandomOrthogonal => Some(random_orthogonal(n, &mut rng)),
        };
        let push = (0..config.ctrl_irrelevant_dim * ACTION_DIM)
            .map(|_| rng.sample::<f64, _>(StandardNormal) / (ACTION_DIM as f64).sqrt())
            .collect();
        Ok(Self {
            config,
            mixing,
            push,
            state: None,
            streams: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    /// Row-major mixing matrix, `None` for identity mixing.
    pub fn mixing(&self) -> Option<&[f64]> {
        self.mixing.as_deref()
    }

    /// Applies `Q^T`, undoing the mixing (jitter stays in the result).
    pub fn unmix(&self, observation: &[f64]) -> Vec<f64> {
        match &self.mixing {
            None => observation.to_vec(),
            Some(q) => {
                let n = observation.len();
                (0..n)
                    .map(|j| (0..n).map(|i| q[i * n + j] * observation[i]).sum())
                    .collect()
            }
        }
    }

    /// Starts an episode. Every random stream derives from `seed`.
    pub fn reset(&mut self, seed: u64) -> EnvStep {
        let cfg = &self.config;
        let v = cfg.variant;
        let mut init = stream(seed, STREAM_SIGNAL);
        let mut ur = stream(seed, STREAM_UNCTRL_RELEVANT);
        let mut ui = stream(seed, STREAM_UNCTRL_IRRELEVANT);
        let jitter = stream(seed, STREAM_JITTER);
        let goal = [init.gen_range(-1.0..1.0), init.gen_range(-1.0..1.0)];
        let position = [init.gen_range(-1.0..1.0), init.gen_range(-1.0..1.0)];
        let unctrl_relevant = if v.has_unctrl_relevant() {
            cfg.reward_noise_std * ur.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let unctrl_irrelevant = if v.has_unctrl_irrelevant() {
            (0..cfg.unctrl_irrelevant_dim)
                .map(|_| ui.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            Vec::new()
        };
        let state = EnvState {
            position,
            velocity: [0.0, 0.0],
            goal,
            ctrl_irrelevant: vec![0.0; if v.has_ctrl_irrelevant() { cfg.ctrl_irrelevant_dim } else { 0 }],
            unctrl_relevant,
            unctrl_irrelevant,
            jitter: v.has_jitter().then(|| JitterState::at_rest(cfg.obs_dim())),
            env_steps: 0,
        };
        self.state = Some(state);
        self.streams = Some(Streams {
            unctrl_relevant: ur,
            unctrl_irrelevant: ui,
            jitter,
        });
        self.emit(0.0, 0.0, Vec::new(), false)
    }

    /// Advances `action_repeat` env steps (fewer at the episode cap).
    pub fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        if action.len() != ACTION_DIM {
            return Err(Error::Env(format!(
                "action has {} components, expected {ACTION_DIM}",
                action.len()
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Env("non-finite action".into()));
        }
        let cfg = self.config.clone();
        let v = cfg.variant;
        let (Some(state), Some(streams)) = (self.state.as_mut(), self.streams.as_mut()) else {
            return Err(Error::Env("step before reset".into()));
        };
        if state.env_steps >= cfg.episode_cap {
            return Err(Error::Env("step after episode end".into()));
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let ur_gain = cfg.reward_noise_std * (1.0 - cfg.reward_noise_coef.powi(2)).sqrt();
        let ui_gain = (1.0 - cfg.background_coef.powi(2)).sqrt();
        let mut reward_signal = 0.0;
        let mut noise_terms = Vec::with_capacity(cfg.action_repeat);
        for _ in 0..cfg.action_repeat {
            if state.env_steps >= cfg.episode_cap {
                break;
            }
            for i in 0..2 {
                state.velocity[i] = VEL_DECAY * state.velocity[i] + ACCEL_GAIN * a[i];
                state.position[i] += POS_GAIN * state.velocity[i];
                // inelastic walls
                if state.position[i].abs() > ARENA {
                    state.position[i] = state.position[i].clamp(-ARENA, ARENA);
                    state.velocity[i] = 0.0;
                }
            }
            let off = state.offset();
            reward_signal += -(off[0] * off[0] + off[1] * off[1]).sqrt();

            for (k, c) in state.ctrl_irrelevant.iter_mut().enumerate() {
                let push = self.push[k * ACTION_DIM] * a[0] + self.push[k * ACTION_DIM + 1] * a[1];
                *c = CTRL_IRRELEVANT_DECAY * *c + CTRL_IRRELEVANT_GAIN * push;
            }
            if v.has_unctrl_relevant() {
                let eps: f64 = streams.unctrl_relevant.sample(StandardNormal);
                state.unctrl_relevant = cfg.reward_noise_coef * state.unctrl_relevant + ur_gain * eps;
                noise_terms.push(state.unctrl_relevant);
            }
            for u in &mut state.unctrl_irrelevant {
                let eps: f64 = streams.unctrl_irrelevant.sample(StandardNormal);
                *u = cfg.background_coef * *u + ui_gain * eps;
            }
            if let Some(j) = &mut state.jitter {
                j.advance(&cfg.jitter, &mut streams.jitter);
            }
            state.env_steps += 1;
        }
        let reward_noise: f64 = noise_terms.iter().sum();
        let done = state.env_steps >= cfg.episode_cap;
        Ok(self.emit(reward_signal, reward_noise, noise_terms, done))
    }

    fn emit(&self, reward_signal: f64, reward_noise: f64, terms: Vec<f64>, done: bool) -> EnvStep {
        let state = self.state.as_ref().expect("emit after reset");
        let v = self.config.variant;
        let off = state.offset();
        let labels = FactorLabels {
            signal: vec![off[0], off[1], state.velocity[0], state.velocity[1]],
            ctrl_irrelevant: v.has_ctrl_irrelevant().then(|| state.ctrl_irrelevant.clone()),
            unctrl_relevant: v.has_unctrl_relevant().then(|| vec![self.config.noise_display(state.unctrl_relevant)]),
            unctrl_irrelevant: v.has_unctrl_irrelevant().then(|| state.unctrl_irrelevant.clone()),
        };
        let mut raw = labels.concat();
        if let Some(j) = &state.jitter {
            raw = apply_jitter(&raw, j);
        }
        let observation = match &self.mixing {
            None => raw,
            Some(q) => {
                let n = raw.len();
                (0..n)
                    .map(|i| (0..n).map(|j| q[i * n + j] * raw[j]).sum())
                    .collect()
            }
        };
        EnvStep {
            observation,
            reward: reward_signal + reward_noise,
            done,
            info: EnvInfo {
                labels,
                reward_signal,
                reward_noise,
                reward_noise_terms: terms,
                jitter_offset: state.jitter.as_ref().map(|j| j.position.clone()),
                env_steps: state.env_steps,
            },
        }
    }
}

fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let g = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    // Fix column signs so the draw is Haar-distributed and reproducible.
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(q[(i, j)]);
        }
    }
    out
}
