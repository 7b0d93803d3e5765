//! Factorized recurrent latent world model.
//!
//! Each latent factor carries a deterministic recurrent part `h` and a
//! stochastic part `s`. All recurrent parts advance with [`GruCell`]s:
//!
//! | factor | recurrent input     | prior head input          |
//! |--------|---------------------|---------------------------|
//! | `x`    | `s_x, a`            | `h_x`                     |
//! | `y`    | `s_y`               | `h_y`                     |
//! | `z`    | `s_z, a`            | `h_z, x_t, y_t` (`y_t` dropped in the modified variant) |
//! | mono   | `s, a`              | `h`                       |
//!
//! Posteriors see the freshly advanced recurrent parts of every factor plus
//! the observation embedding; the `z` posterior additionally sees the
//! freshly sampled `x_t` and `y_t`, so sampling order is `x`, `y`, `z`.
//! The first step of every sequence conditions on an all-zero previous
//! latent and an all-zero action.
//!
//! The observation head reads every factor, the `r_x` head reads only `x`
//! and the `r_y` head reads only `y`. Observation and reward heads have
//! fixed unit standard deviation; the observed reward is modelled as
//! `r_x + r_y`.

mod config;
mod loss;

pub use config::{Factor, FactorSize, FreeNatsStrategy, ModelConfig, ModelVariant};
pub use loss::{combine_terms, LossBreakdown, LossOutput, LossTerms};

use std::path::Path;

use rand::SeedableRng;

use crate::distributions::{compose_reward, DiagGaussian, HEAD_STD};
use crate::error::{Error, Result};
use crate::nn::{Activation, GruCell, Mlp};
use crate::replay::SegmentBatch;
use crate::rng::SimRng;
use crate::tensor::{Bound, ParameterStore, Tape, Tensor, Var};

/// How stochastic parts are drawn from their distributions.
pub enum Sampling<'r> {
    /// Reparameterized sample.
    Random(&'r mut SimRng),
    /// Use the distribution mean (deterministic evaluation).
    Mean,
}

impl Sampling<'_> {
    pub fn draw<'t>(&mut self, dist: &DiagGaussian<'t>) -> Result<Var<'t>> {
        match self {
            Sampling::Random(rng) => dist.rsample(*rng),
            Sampling::Mean => Ok(dist.mean),
        }
    }

    pub fn rng(&mut self) -> Option<&mut SimRng> {
        match self {
            Sampling::Random(rng) => Some(rng),
            Sampling::Mean => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FactorLatent<'t> {
    pub factor: Factor,
    pub deter: Var<'t>,
    pub stoch: Var<'t>,
    pub dist: DiagGaussian<'t>,
}

impl<'t> FactorLatent<'t> {
    /// `[deter, stoch]`.
    pub fn features(&self, tape: &'t Tape) -> Result<Var<'t>> {
        tape.concat(&[self.deter, self.stoch])
    }
}

#[derive(Clone, Debug)]
pub struct LatentState<'t> {
    pub variant: ModelVariant,
    pub factors: Vec<FactorLatent<'t>>,
}

impl<'t> LatentState<'t> {
    pub fn get(&self, f: Factor) -> Option<&FactorLatent<'t>> {
        self.factors.iter().find(|l| l.factor == f)
    }

    pub fn factor(&self, f: Factor) -> Result<&FactorLatent<'t>> {
        self.get(f)
            .ok_or_else(|| Error::config(format!("variant {} has no factor {}", self.variant.name(), f.name())))
    }

    pub fn batch_size(&self) -> usize {
        self.factors[0].deter.value().rows()
    }

    pub fn is_finite(&self) -> bool {
        self.factors.iter().all(|l| {
            l.stoch.value().all_finite()
                && l.deter.value().all_finite()
                && l.dist.mean.value().all_finite()
                && l.dist.std.value().all_finite()
        })
    }

    pub fn snapshot(&self) -> LatentSnapshot {
        LatentSnapshot {
            variant: self.variant,
            deter: self.factors.iter().map(|l| (*l.deter.value()).clone()).collect(),
            stoch: self.factors.iter().map(|l| (*l.stoch.value()).clone()).collect(),
        }
    }
}

/// Tape-independent copy of a latent state, for carrying filtering state
/// across steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSnapshot {
    pub variant: ModelVariant,
    pub deter: Vec<Tensor>,
    pub stoch: Vec<Tensor>,
}

impl LatentSnapshot {
    /// Constants on `tape`; distributions are placeholders centred on `stoch`.
    pub fn to_state<'t>(&self, tape: &'t Tape) -> LatentState<'t> {
        let factors = self
            .variant
            .factors()
            .iter()
            .zip(self.deter.iter().zip(&self.stoch))
            .map(|(&factor, (d, s))| {
                let stoch = tape.constant(s.clone());
                FactorLatent {
                    factor,
                    deter: tape.constant(d.clone()),
                    stoch,
                    dist: DiagGaussian::with_fixed_std(stoch, 1.0),
                }
            })
            .collect();
        LatentState {
            variant: self.variant,
            factors,
        }
    }

    pub fn factor_index(&self, f: Factor) -> Option<usize> {
        self.variant.factors().iter().position(|&g| g == f)
    }

    /// `[deter, stoch]` of one factor as a plain matrix.
    pub fn features(&self, f: Factor) -> Option<Tensor> {
        let i = self.factor_index(f)?;
        Tensor::concat_cols(&[&self.deter[i], &self.stoch[i]]).ok()
    }

    /// Keeps only the given rows of every factor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            variant: self.variant,
            deter: self.deter.iter().map(|t| t.select_rows(idx)).collect::<Result<_>>()?,
            stoch: self.stoch.iter().map(|t| t.select_rows(idx)).collect::<Result<_>>()?,
        })
    }

    /// Stacks snapshots of the same variant along the batch axis.
    pub fn concat(parts: &[LatentSnapshot]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("snapshot concat", "no inputs"))?;
        let n = first.deter.len();
        let mut deter = Vec::with_capacity(n);
        let mut stoch = Vec::with_capacity(n);
        for i in 0..n {
            let d: Vec<&Tensor> = parts.iter().map(|p| &p.deter[i]).collect();
            let s: Vec<&Tensor> = parts.iter().map(|p| &p.stoch[i]).collect();
            deter.push(Tensor::concat_rows(&d)?);
            stoch.push(Tensor::concat_rows(&s)?);
        }
        Ok(Self {
            variant: first.variant,
            deter,
            stoch,
        })
    }
}

/// Decoded heads for one latent state.
#[derive(Clone, Copy, Debug)]
pub struct Decoded<'t> {
    pub obs: DiagGaussian<'t>,
    /// `p(r_x | x)`; for the monolithic variant, the single reward head.
    pub reward_x: DiagGaussian<'t>,
    /// `p(r_y | y)`; absent for the monolithic variant.
    pub reward_y: Option<DiagGaussian<'t>>,
    /// Distribution of the observed reward.
    pub reward: DiagGaussian<'t>,
}

/// Posterior states and matching priors along a sequence.
pub struct Observed<'t> {
    pub posteriors: Vec<LatentState<'t>>,
    /// `priors[t][i]` is the prior of factor `variant.factors()[i]` at step `t`.
    pub priors: Vec<Vec<DiagGaussian<'t>>>,
}

/// A rollout of the control factor under the model prior.
pub struct Imagined<'t> {
    /// `H + 1` feature matrices, starting with the start state.
    pub features: Vec<Var<'t>>,
    /// `H` actions; `actions[k]` is taken from `features[k]`.
    pub actions: Vec<Var<'t>>,
    /// `H` reward means; `rewards[k]` is received on reaching `features[k + 1]`.
    pub rewards: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
struct FactorNet {
    factor: Factor,
    size: FactorSize,
    cell: GruCell,
    prior: Mlp,
    posterior: Mlp,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    config: ModelConfig,
    obs_dim: usize,
    action_dim: usize,
    pub store: ParameterStore,
    encoder: Mlp,
    nets: Vec<FactorNet>,
    obs_head: Mlp,
    reward_x: Mlp,
    reward_y: Option<Mlp>,
}

impl WorldModel {
    pub fn new(config: ModelConfig, obs_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if obs_dim == 0 || action_dim == 0 {
            return Err(Error::config("observation and action dims must be positive"));
        }
        let mut rng = SimRng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let w = config.hidden_width;
        let act = Activation::Elu;
        let variant = config.variant;
        let factors = variant.factors();

        let encoder = Mlp::new(&mut store, "encoder", obs_dim, &[w, w], config.embed_dim, act, &mut rng)?;
        let mut nets = Vec::with_capacity(factors.len());
        for &f in factors {
            let size = config.size(f);
            let cell_in = size.stoch + if f.takes_action() { action_dim } else { 0 };
            let cell = GruCell::new(&mut store, &format!("{}/cell", f.name()), cell_in, size.deter, &mut rng)?;
            let prior_in = match f {
                Factor::Z => {
                    let mut n = size.deter + config.x.features();
                    if variant == ModelVariant::Xyz {
                        n += config.y.features();
                    }
                    n
                }
                _ => size.deter,
            };
            let posterior_in = match f {
                Factor::Z => size.deter + config.x.features() + config.y.features() + config.embed_dim,
                _ => factors.iter().map(|&g| config.size(g).deter).sum::<usize>() + config.embed_dim,
            };
            let prior = Mlp::new(&mut store, &format!("{}/prior", f.name()), prior_in, &[w], 2 * size.stoch, act, &mut rng)?;
            let posterior = Mlp::new(
                &mut store,
                &format!("{}/posterior", f.name()),
                posterior_in,
                &[w],
                2 * size.stoch,
                act,
                &mut rng,
            )?;
            nets.push(FactorNet {
                factor: f,
                size,
                cell,
                prior,
                posterior,
            });
        }
        let total_features: usize = factors.iter().map(|&f| config.size(f).features()).sum();
        let obs_head = Mlp::new(&mut store, "decoder", total_features, &[w, w], obs_dim, act, &mut rng)?;
        let control = variant.control_factor();
        let reward_name = if control == Factor::X { "reward_x" } else { "reward" };
        let reward_x = Mlp::new(&mut store, reward_name, config.size(control).features(), &[w, w], 1, act, &mut rng)?;
        let reward_y = if variant.has(Factor::Y) {
            Some(Mlp::new(&mut store, "reward_y", config.y.features(), &[w, w], 1, act, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            obs_dim,
            action_dim,
            store,
            encoder,
            nets,
            obs_head,
            reward_x,
            reward_y,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn control_factor(&self) -> Factor {
        self.config.variant.control_factor()
    }

    pub fn feature_dim(&self, f: Factor) -> usize {
        self.config.size(f).features()
    }

    /// Replaces the loss-weighting hyperparameters without touching weights.
    pub fn set_loss_weights(&mut self, alpha: f64, beta: f64, free_nats: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.alpha = alpha;
        c.beta = beta;
        c.free_nats = free_nats;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.save(path)
    }

    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.store.load_into(path)
    }

    /// All-zero latent for a batch of `batch` sequences.
    pub fn initial_state<'t>(&self, tape: &'t Tape, batch: usize) -> LatentState<'t> {
        let factors = self
            .nets
            .iter()
            .map(|n| {
                let stoch = tape.constant(Tensor::zeros([batch, n.size.stoch]));
                FactorLatent {
                    factor: n.factor,
                    deter: tape.constant(Tensor::zeros([batch, n.size.deter])),
                    stoch,
                    dist: DiagGaussian::with_fixed_std(stoch, 1.0),
                }
            })
            .collect();
        LatentState {
            variant: self.variant(),
            factors,
        }
    }

    pub fn initial_snapshot(&self, batch: usize) -> LatentSnapshot {
        LatentSnapshot {
            variant: self.variant(),
            deter: self.nets.iter().map(|n| Tensor::zeros([batch, n.size.deter])).collect(),
            stoch: self.nets.iter().map(|n| Tensor::zeros([batch, n.size.stoch])).collect(),
        }
    }

    fn check_variant(&self, state: &LatentState<'_>) -> Result<()> {
        if state.variant != self.variant() || state.factors.len() != self.nets.len() {
            return Err(Error::config(format!(
                "latent state of variant {} passed to a {} model",
                state.variant.name(),
                self.variant().name()
            )));
        }
        Ok(())
    }

    fn advance_deters<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        prev: &LatentState<'t>,
        action: Var<'t>,
    ) -> Result<Vec<Var<'t>>> {
        self.nets
            .iter()
            .zip(&prev.factors)
            .map(|(net, lat)| {
                let input = if net.factor.takes_action() {
                    tape.concat(&[lat.stoch, action])?
                } else {
                    lat.stoch
                };
                net.cell.forward(p, input, lat.deter)
            })
            .collect()
    }

    fn prior_dist<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        i: usize,
        deters: &[Var<'t>],
        fresh: &[FactorLatent<'t>],
    ) -> Result<DiagGaussian<'t>> {
        let net = &self.nets[i];
        let input = match net.factor {
            Factor::Z => {
                let find = |f: Factor| fresh.iter().find(|l| l.factor == f).copied();
                let x = find(Factor::X).ok_or_else(|| Error::Tape("z prior before x".into()))?;
                let mut parts = vec![deters[i], x.deter, x.stoch];
                if self.variant() == ModelVariant::Xyz {
                    let y = find(Factor::Y).ok_or_else(|| Error::Tape("z prior before y".into()))?;
                    parts.push(y.deter);
                    parts.push(y.stoch);
                }
                tape.concat(&parts)?
            }
            _ => deters[i],
        };
        DiagGaussian::from_params(net.prior.forward(p, input)?)
    }

    fn posterior_dist<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        i: usize,
        deters: &[Var<'t>],
        fresh: &[FactorLatent<'t>],
        embed: Var<'t>,
    ) -> Result<DiagGaussian<'t>> {
        let net = &self.nets[i];
        let input = match net.factor {
            Factor::Z => {
                let mut parts = vec![deters[i]];
                for l in fresh {
                    parts.push(l.deter);
                    parts.push(l.stoch);
                }
                parts.push(embed);
                tape.concat(&parts)?
            }
            _ => {
                let mut parts = vec![deters[i]];
                parts.extend(deters.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, d)| *d));
                parts.push(embed);
                tape.concat(&parts)?
            }
        };
        DiagGaussian::from_params(net.posterior.forward(p, input)?)
    }

    /// One transition under the prior, without an observation.
    pub fn prior_step<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        prev: &LatentState<'t>,
        action: Var<'t>,
        sampling: &mut Sampling<'_>,
    ) -> Result<LatentState<'t>> {
        self.check_variant(prev)?;
        let deters = self.advance_deters(tape, p, prev, action)?;
        let mut factors: Vec<FactorLatent<'t>> = Vec::with_capacity(self.nets.len());
        for (i, net) in self.nets.iter().enumerate() {
            let dist = self.prior_dist(tape, p, i, &deters, &factors)?;
            let stoch = sampling.draw(&dist)?;
            factors.push(FactorLatent {
                factor: net.factor,
                deter: deters[i],
                stoch,
                dist,
            });
        }
        Ok(LatentState {
            variant: self.variant(),
            factors,
        })
    }

    /// Posterior state and the matching per-factor priors for one step.
    ///
    /// The `z` prior is evaluated at the posterior samples of `x_t`, `y_t`.
    pub fn observe_step<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        prev: &LatentState<'t>,
        obs: Var<'t>,
        action: Var<'t>,
        sampling: &mut Sampling<'_>,
    ) -> Result<(LatentState<'t>, Vec<DiagGaussian<'t>>)> {
        self.check_variant(prev)?;
        let embed = self.encoder.forward(p, obs)?;
        let deters = self.advance_deters(tape, p, prev, action)?;
        let mut factors: Vec<FactorLatent<'t>> = Vec::with_capacity(self.nets.len());
        let mut priors = Vec::with_capacity(self.nets.len());
        for (i, net) in self.nets.iter().enumerate() {
            let dist = self.posterior_dist(tape, p, i, &deters, &factors, embed)?;
            let prior = self.prior_dist(tape, p, i, &deters, &factors)?;
            let stoch = sampling.draw(&dist)?;
            factors.push(FactorLatent {
                factor: net.factor,
                deter: deters[i],
                stoch,
                dist,
            });
            priors.push(prior);
        }
        Ok((
            LatentState {
                variant: self.variant(),
                factors,
            },
            priors,
        ))
    }

    pub fn posterior_step<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        prev: &LatentState<'t>,
        obs: Var<'t>,
        action: Var<'t>,
        sampling: &mut Sampling<'_>,
    ) -> Result<LatentState<'t>> {
        Ok(self.observe_step(tape, p, prev, obs, action, sampling)?.0)
    }

    pub fn decode<'t>(&self, tape: &'t Tape, p: &Bound<'t>, latent: &LatentState<'t>) -> Result<Decoded<'t>> {
        self.check_variant(latent)?;
        let mut parts = Vec::with_capacity(2 * latent.factors.len());
        for l in &latent.factors {
            parts.push(l.deter);
            parts.push(l.stoch);
        }
        let all = tape.concat(&parts)?;
        let obs = DiagGaussian::with_fixed_std(self.obs_head.forward(p, all)?, HEAD_STD);
        let control = latent.factor(self.control_factor())?.features(tape)?;
        let reward_x = DiagGaussian::with_fixed_std(self.reward_x.forward(p, control)?, HEAD_STD);
        let (reward_y, reward) = match &self.reward_y {
            Some(head) => {
                let y = latent.factor(Factor::Y)?.features(tape)?;
                let ry = DiagGaussian::with_fixed_std(head.forward(p, y)?, HEAD_STD);
                (Some(ry), compose_reward(&reward_x, &ry)?)
            }
            None => (None, reward_x),
        };
        Ok(Decoded {
            obs,
            reward_x,
            reward_y,
            reward,
        })
    }

    pub fn reward_x_head(&self) -> &Mlp {
        &self.reward_x
    }

    pub fn reward_y_head(&self) -> Option<&Mlp> {
        self.reward_y.as_ref()
    }

    /// Mean of `p(r_x | features)` for control-factor feature rows.
    pub fn reward_x_mean<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        self.reward_x.forward(p, features)
    }

    /// Filters a segment batch with the posterior.
    pub fn observe_sequence<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        segment: &SegmentBatch,
        sampling: &mut Sampling<'_>,
    ) -> Result<Observed<'t>> {
        let len = segment.len();
        if len == 0 {
            return Err(Error::config("empty segment"));
        }
        let batch = segment.batch_size();
        let mut prev = self.initial_state(tape, batch);
        let zero_action = tape.constant(Tensor::zeros([batch, self.action_dim]));
        let mut posteriors = Vec::with_capacity(len);
        let mut priors = Vec::with_capacity(len);
        for t in 0..len {
            let obs = tape.constant(segment.obs[t].clone());
            let action = if t == 0 {
                zero_action
            } else {
                tape.constant(segment.actions[t].clone())
            };
            let (post, prior) = self.observe_step(tape, p, &prev, obs, action, sampling)?;
            if !post.is_finite() {
                return Err(Error::Numerical {
                    step: t,
                    detail: "non-finite latent in observe_sequence".into(),
                    last_checkpoint: None,
                });
            }
            prev = post.clone();
            posteriors.push(post);
            priors.push(prior);
        }
        Ok(Observed { posteriors, priors })
    }

    /// Rolls the control factor forward `horizon` steps under `policy`.
    ///
    /// Other factors of `start` are ignored; `policy` maps control features
    /// to actions.
    pub fn imagine<'t, P>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        start: &LatentState<'t>,
        horizon: usize,
        mut policy: P,
        sampling: &mut Sampling<'_>,
    ) -> Result<Imagined<'t>>
    where
        P: FnMut(Var<'t>, &mut Sampling<'_>) -> Result<Var<'t>>,
    {
        if horizon < 1 {
            return Err(Error::config("imagination horizon must be at least 1"));
        }
        let control = self.control_factor();
        let i = self
            .nets
            .iter()
            .position(|n| n.factor == control)
            .expect("control factor exists");
        let net = &self.nets[i];
        let s0 = start.factor(control)?;
        let (mut h, mut s) = (s0.deter, s0.stoch);
        let mut features = vec![tape.concat(&[h, s])?];
        let mut actions = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let a = policy(features[k], sampling)?;
            h = net.cell.forward(p, tape.concat(&[s, a])?, h)?;
            let dist = DiagGaussian::from_params(net.prior.forward(p, h)?)?;
            s = sampling.draw(&dist)?;
            let f = tape.concat(&[h, s])?;
            rewards.push(self.reward_x.forward(p, f)?);
            actions.push(a);
            features.push(f);
        }
        Ok(Imagined {
            features,
            actions,
            rewards,
        })
    }
}

#[cfg(test)]
mod tests;
