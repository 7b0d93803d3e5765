//! Policy optimizers over the control latent.
//!
//! [`DynamicsBackprop`] trains an actor by backpropagating lambda-returns
//! through imagined rollouts of the control factor. [`LatentSac`] runs soft
//! actor-critic on encoded transitions. Both act through a tanh-squashed
//! Gaussian [`Actor`].

mod dynamics;
mod sac;

pub use dynamics::DynamicsBackprop;
pub use sac::{LatentSac, Transitions};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::tensor::{clip_grad_norm, Adam, Bound, Gradients, ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    DynamicsBackprop,
    LatentSac,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::DynamicsBackprop => "dynamics-backprop",
            Algo::LatentSac => "latent-sac",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Algo::DynamicsBackprop, Algo::LatentSac].into_iter().find(|a| a.name() == s)
    }
}

/// What the policy observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Control-factor features of the filtered posterior.
    Latent,
    /// Ground-truth signal block from the environment, with real rewards.
    OracleState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub learning_rate: f64,
    /// Soft target update rate.
    pub tau: f64,
    pub init_temperature: f64,
    /// Defaults to `-action_dim`.
    pub target_entropy: Option<f64>,
    /// Optional global-norm clip on every SAC update.
    pub grad_clip: Option<f64>,
    /// Transitions per update, subsampled from the encoded segments.
    pub batch_size: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            tau: 0.005,
            init_temperature: 0.1,
            target_entropy: None,
            grad_clip: None,
            batch_size: 256,
        }
    }
}

impl SacConfig {
    /// Lower learning rate plus clipping, for runs that diverge.
    pub fn stable_fallback() -> Self {
        Self {
            learning_rate: 1e-4,
            grad_clip: Some(100.0),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub algo: Algo,
    pub features: FeatureSource,
    pub gamma: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub grad_clip: f64,
    pub actor_lr: f64,
    pub value_lr: f64,
    pub hidden_width: usize,
    /// Std of the Gaussian noise added to actions while collecting.
    pub explore_std: f64,
    /// Posterior states seeding imagination per update; `0` uses all.
    pub imagination_starts: usize,
    pub sac: SacConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            algo: Algo::DynamicsBackprop,
            features: FeatureSource::Latent,
            gamma: 0.99,
            lambda: 0.95,
            horizon: 15,
            grad_clip: 100.0,
            actor_lr: 8e-5,
            value_lr: 8e-5,
            hidden_width: 256,
            explore_std: 0.3,
            imagination_starts: 0,
            sac: SacConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.horizon < 1 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(self.grad_clip > 0.0) || !(self.actor_lr > 0.0) || !(self.value_lr > 0.0) {
            return Err(Error::config("grad_clip and learning rates must be positive"));
        }
        if self.hidden_width == 0 {
            return Err(Error::config("hidden_width must be positive"));
        }
        if self.explore_std < 0.0 {
            return Err(Error::config("explore_std must be non-negative"));
        }
        let s = &self.sac;
        if !(s.learning_rate > 0.0) || !(s.tau > 0.0 && s.tau <= 1.0) || !(s.init_temperature > 0.0) {
            return Err(Error::config("sac learning_rate, tau and init_temperature must be positive (tau <= 1)"));
        }
        if s.grad_clip.is_some_and(|c| !(c > 0.0)) || s.batch_size == 0 {
            return Err(Error::config("sac grad_clip and batch_size must be positive"));
        }
        if self.features == FeatureSource::OracleState && self.algo != Algo::LatentSac {
            return Err(Error::config("oracle-state features are only supported with latent-sac"));
        }
        Ok(())
    }
}

/// `G_t = r_t + gamma * ((1 - lambda) * v_{t+1} + lambda * G_{t+1})`, with
/// `G_{H-1} = r_{H-1} + gamma * v_H`.
///
/// `values` has one more entry than `rewards`; `values[0]` is unused.
pub fn lambda_return(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let h = rewards.len();
    if values.len() != h + 1 {
        return Err(Error::shape(
            "lambda_return",
            format!("{h} rewards need {} values, got {}", h + 1, values.len()),
        ));
    }
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        let g = rewards[t] + gamma * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = g;
        next = g;
    }
    Ok(out)
}

/// Taped version of [`lambda_return`] over `[B, 1]` columns.
pub fn lambda_return_vars<'t>(
    rewards: &[Var<'t>],
    values: &[Var<'t>],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Var<'t>>> {
    let h = rewards.len();
    if values.len() != h + 1 {
        return Err(Error::shape(
            "lambda_return",
            format!("{h} rewards need {} values, got {}", h + 1, values.len()),
        ));
    }
    let mut out = Vec::with_capacity(h);
    let mut next = values[h];
    for t in (0..h).rev() {
        let blend = values[t + 1].scale(1.0 - lambda).add(next.scale(lambda))?;
        let g = rewards[t].add(blend.scale(gamma))?;
        out.push(g);
        next = g;
    }
    out.reverse();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Eval,
}

/// Smallest pre-squash std.
const ACTOR_MIN_STD: f64 = 0.1;
/// Raw offset so a zero network output maps to std 1.
const ACTOR_STD_SHIFT: f64 = 0.378_164_557_091_277_8;

/// Tanh-squashed diagonal Gaussian policy.
#[derive(Clone, Debug)]
pub struct Actor {
    net: Mlp,
    pub store: ParameterStore,
    pub feature_dim: usize,
    pub action_dim: usize,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, action_dim: usize, width: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParameterStore::new();
        let net = Mlp::new(&mut store, "actor", feature_dim, &[width, width], 2 * action_dim, Activation::Elu, rng)?;
        Ok(Self {
            net,
            store,
            feature_dim,
            action_dim,
        })
    }

    /// Pre-squash Gaussian.
    pub fn dist<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<DiagGaussian<'t>> {
        let out = self.net.forward(p, features)?;
        let d = self.action_dim;
        let mean = out.slice_cols(0, d)?;
        let std = out.slice_cols(d, 2 * d)?.shift(ACTOR_STD_SHIFT).softplus().shift(ACTOR_MIN_STD);
        DiagGaussian::new(mean, std)
    }

    /// Reparameterized squashed sample and its log-density.
    pub fn sample<'t, R: Rng + ?Sized>(
        &self,
        p: &Bound<'t>,
        features: Var<'t>,
        rng: &mut R,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let dist = self.dist(p, features)?;
        let u = dist.rsample(rng)?;
        let log_u = dist.log_prob(u)?;
        // log(1 - tanh(u)^2) = 2 * (ln 2 - u - softplus(-2u))
        let log_det = u
            .neg()
            .sub(u.scale(-2.0).softplus())?
            .shift(std::f64::consts::LN_2)
            .scale(2.0)
            .sum_last();
        Ok((u.tanh(), log_u.sub(log_det)?))
    }

    /// `tanh(mean)`.
    pub fn mode<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        Ok(self.dist(p, features)?.mean.tanh())
    }

    /// Environment action for a batch of feature rows, outside any training tape.
    ///
    /// `explore_std: Some(s)` adds `N(0, s^2)` noise to the mode; `None`
    /// samples the squashed Gaussian. Output is clipped to `[-1, 1]`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        features: &Tensor,
        mode: ActMode,
        explore_std: Option<f64>,
        rng: &mut R,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let f = tape.constant(features.clone());
        let a = match (mode, explore_std) {
            (ActMode::Eval, _) => (*self.mode(&p, f)?.value()).clone(),
            (ActMode::Explore, Some(s)) => {
                let mut a = (*self.mode(&p, f)?.value()).clone();
                for v in a.data_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v += s * e;
                }
                a
            }
            (ActMode::Explore, None) => (*self.sample(&p, f, rng)?.0.value()).clone(),
        };
        Ok(a.map(|v| v.clamp(-1.0, 1.0)))
    }
}

/// Accumulates, clips and applies one optimizer step.
///
/// Returns the global gradient norm before clipping.
pub(crate) fn apply_update(
    store: &mut ParameterStore,
    bound: &Bound<'_>,
    grads: &Gradients,
    opt: &Adam,
    clip: Option<f64>,
) -> Result<f64> {
    store.zero_grad();
    store.accumulate(bound, grads);
    store.fill_missing_grads();
    let norm = store.grad_norm();
    if !norm.is_finite() {
        store.zero_grad();
        return Err(Error::Numerical {
            step: 0,
            detail: "non-finite policy gradient".into(),
            last_checkpoint: None,
        });
    }
    if let Some(c) = clip {
        clip_grad_norm(store, c)?;
    }
    opt.step(store)?;
    Ok(norm)
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Agent {
    DynamicsBackprop(DynamicsBackprop),
    LatentSac(LatentSac),
}

impl Agent {
    pub fn new(cfg: &PolicyConfig, feature_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.algo {
            Algo::DynamicsBackprop => Agent::DynamicsBackprop(DynamicsBackprop::new(cfg.clone(), feature_dim, action_dim, seed)?),
            Algo::LatentSac => Agent::LatentSac(LatentSac::new(cfg.clone(), feature_dim, action_dim, seed)?),
        })
    }

    pub fn actor(&self) -> &Actor {
        match self {
            Agent::DynamicsBackprop(a) => &a.actor,
            Agent::LatentSac(a) => &a.actor,
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        match self {
            Agent::DynamicsBackprop(a) => &a.cfg,
            Agent::LatentSac(a) => &a.cfg,
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, features: &Tensor, mode: ActMode, rng: &mut R) -> Result<Tensor> {
        let explore = match self {
            Agent::DynamicsBackprop(a) => Some(a.cfg.explore_std),
            Agent::LatentSac(_) => None,
        };
        self.actor().act(features, mode, explore, rng)
    }

    /// Named parameter stores, for checkpointing.
    pub fn stores(&self) -> Vec<(&'static str, &ParameterStore)> {
        match self {
            Agent::DynamicsBackprop(a) => vec![("actor", &a.actor.store), ("value", &a.value_store)],
            Agent::LatentSac(a) => vec![
                ("actor", &a.actor.store),
                ("critic", &a.critic_store),
                ("critic_target", &a.target_store),
                ("temperature", &a.alpha_store),
            ],
        }
    }

    pub fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParameterStore)> {
        match self {
            Agent::DynamicsBackprop(a) => vec![("actor", &mut a.actor.store), ("value", &mut a.value_store)],
            Agent::LatentSac(a) => vec![
                ("actor", &mut a.actor.store),
                ("critic", &mut a.critic_store),
                ("critic_target", &mut a.target_store),
                ("temperature", &mut a.alpha_store),
            ],
        }
    }
}
