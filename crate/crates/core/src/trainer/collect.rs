use rand::Rng;

use crate::env::{Env, SIGNAL_DIM};
use crate::error::{Error, Result};
use crate::policy::{ActMode, Agent, FeatureSource};
use crate::replay::Episode;
use crate::rng::SimRng;
use crate::tensor::{Tape, Tensor};
use crate::world_model::{LatentSnapshot, Sampling, WorldModel};

/// Who picks actions during a rollout.
#[derive(Clone, Copy)]
pub enum Controller<'a> {
    /// Uniform actions in `[-1, 1]`.
    Random,
    /// All-zero actions.
    Zero,
    Agent {
        model: Option<&'a WorldModel>,
        agent: &'a Agent,
        mode: ActMode,
    },
}

/// A finished episode plus ground-truth reward decomposition.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub episode: Episode,
    /// Undiscounted return.
    pub total_return: f64,
    /// Per step (index 0 is the reset and carries zeros).
    pub reward_signal: Vec<f64>,
    pub reward_noise: Vec<f64>,
    /// Environment steps, counting action repeats.
    pub env_steps: usize,
    /// Filtered latent after each observation, when a model was used.
    pub latents: Option<Vec<LatentSnapshot>>,
}

/// Posterior filter that carries the latent state across environment steps.
pub struct Filter<'m> {
    model: &'m WorldModel,
    state: LatentSnapshot,
}

impl<'m> Filter<'m> {
    pub fn new(model: &'m WorldModel) -> Self {
        Self {
            model,
            state: model.initial_snapshot(1),
        }
    }

    /// Incorporates the observation reached by taking `action`.
    pub fn observe(&mut self, obs: &[f64], action: &[f64]) -> Result<&LatentSnapshot> {
        let tape = Tape::new();
        let p = self.model.store.bind_frozen(&tape);
        let prev = self.state.to_state(&tape);
        let o = tape.constant(Tensor::matrix(1, obs.len(), obs.to_vec())?);
        let a = tape.constant(Tensor::matrix(1, action.len(), action.to_vec())?);
        let post = self.model.posterior_step(&tape, &p, &prev, o, a, &mut Sampling::Mean)?;
        if !post.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                detail: "non-finite latent while filtering an episode".into(),
                last_checkpoint: None,
            });
        }
        self.state = post.snapshot();
        Ok(&self.state)
    }

    pub fn state(&self) -> &LatentSnapshot {
        &self.state
    }
}

/// Runs one full episode from `reset(seed)`.
pub fn run_episode(env: &mut Env, controller: Controller<'_>, seed: u64, rng: &mut SimRng) -> Result<EpisodeRecord> {
    let ad = env.action_dim();
    let first = env.reset(seed);
    let labels = first.info.labels.concat();
    let mut ep = Episode::new(env.obs_dim(), ad, labels.len());
    let zero = vec![0.0; ad];
    ep.push(&first.observation, &zero, 0.0, &labels);
    let mut reward_signal = vec![0.0];
    let mut reward_noise = vec![0.0];

    let model = match controller {
        Controller::Agent { model, agent, .. } if agent.config().features == FeatureSource::Latent => {
            Some(model.ok_or_else(|| Error::config("latent-feature agent needs a world model"))?)
        }
        _ => None,
    };
    let mut filter = model.map(Filter::new);
    let mut latents = filter.as_ref().map(|_| Vec::new());
    if let (Some(f), Some(l)) = (filter.as_mut(), latents.as_mut()) {
        l.push(f.observe(&first.observation, &zero)?.clone());
    }
    let mut last_labels = labels;
    let mut env_steps = 0;
    let mut done = false;
    while !done {
        let action: Vec<f64> = match controller {
            Controller::Random => (0..ad).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            Controller::Zero => zero.clone(),
            Controller::Agent { agent, mode, .. } => {
                let features = match &filter {
                    Some(f) => f
                        .state()
                        .features(f.model.control_factor())
                        .expect("control factor present"),
                    None => Tensor::matrix(1, SIGNAL_DIM, last_labels[..SIGNAL_DIM].to_vec())?,
                };
                agent.act(&features, mode, rng)?.into_data()
            }
        };
        let step = env.step(&action)?;
        let labels = step.info.labels.concat();
        ep.push(&step.observation, &action, step.reward, &labels);
        reward_signal.push(step.info.reward_signal);
        reward_noise.push(step.info.reward_noise);
        env_steps = step.info.env_steps;
        if let (Some(f), Some(l)) = (filter.as_mut(), latents.as_mut()) {
            l.push(f.observe(&step.observation, &action)?.clone());
        }
        last_labels = labels;
        done = step.done;
    }
    Ok(EpisodeRecord {
        total_return: ep.total_reward(),
        episode: ep,
        reward_signal,
        reward_noise,
        env_steps,
        latents,
    })
}

/// Mixes a base seed with a purpose tag and an index.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
