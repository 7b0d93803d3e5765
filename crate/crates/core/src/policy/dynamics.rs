use rand::SeedableRng;

use super::{apply_update, lambda_return_vars, Actor, PolicyConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::rng::SimRng;
use crate::tensor::{Adam, Bound, Tape, Tensor, Var, ParameterStore};
use crate::world_model::{LatentSnapshot, Sampling, WorldModel};

/// Actor and value trained through imagined rollouts of the control factor.
///
/// The actor maximizes the mean lambda-return of its imagined trajectories,
/// with gradients flowing through the frozen model dynamics and value net.
/// The value regresses onto the (stopped) lambda-returns.
#[derive(Clone, Debug)]
pub struct DynamicsBackprop {
    pub(crate) cfg: PolicyConfig,
    pub actor: Actor,
    value: Mlp,
    pub value_store: ParameterStore,
}

struct Rollout<'t> {
    features: Vec<Var<'t>>,
    rewards: Vec<Var<'t>>,
    returns: Vec<Var<'t>>,
}

impl DynamicsBackprop {
    pub fn new(cfg: PolicyConfig, feature_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SimRng::seed_from_u64(seed);
        let actor = Actor::new(feature_dim, action_dim, cfg.hidden_width, &mut rng)?;
        let mut value_store = ParameterStore::new();
        let w = cfg.hidden_width;
        let value = Mlp::new(&mut value_store, "value", feature_dim, &[w, w], 1, Activation::Elu, &mut rng)?;
        Ok(Self {
            cfg,
            actor,
            value,
            value_store,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn value_net(&self) -> &Mlp {
        &self.value
    }

    /// State values for feature rows, `[N, 1]`.
    pub fn values(&self, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.value_store.bind_frozen(&tape);
        Ok((*self.value.forward(&p, tape.constant(features.clone()))?.value()).clone())
    }

    fn rollout<'t>(
        &self,
        tape: &'t Tape,
        model: &WorldModel,
        pm: &Bound<'t>,
        pa: &Bound<'t>,
        pv: &Bound<'t>,
        starts: &LatentSnapshot,
        rng: &mut SimRng,
    ) -> Result<Rollout<'t>> {
        let start = starts.to_state(tape);
        let actor = &self.actor;
        let im = model.imagine(
            tape,
            pm,
            &start,
            self.cfg.horizon,
            |f, s| match s.rng() {
                Some(r) => Ok(actor.sample(pa, f.detach(), r)?.0),
                None => actor.mode(pa, f.detach()),
            },
            &mut Sampling::Random(rng),
        )?;
        let values = im
            .features
            .iter()
            .map(|&f| self.value.forward(pv, f))
            .collect::<Result<Vec<_>>>()?;
        let returns = lambda_return_vars(&im.rewards, &values, self.cfg.gamma, self.cfg.lambda)?;
        Ok(Rollout {
            features: im.features,
            rewards: im.rewards,
            returns,
        })
    }

    fn mean_over_steps<'t>(xs: &[Var<'t>]) -> Result<Var<'t>> {
        let mut acc = xs[0].mean();
        for x in &xs[1..] {
            acc = acc.add(x.mean())?;
        }
        Ok(acc.scale(1.0 / xs.len() as f64))
    }

    /// Mean imagined lambda-return from `starts` under the current actor.
    ///
    /// Deterministic for a fixed `rng` state.
    pub fn imagined_return(&self, model: &WorldModel, starts: &LatentSnapshot, rng: &mut SimRng) -> Result<f64> {
        let tape = Tape::new();
        let pm = model.store.bind_frozen(&tape);
        let pa = self.actor.store.bind_frozen(&tape);
        let pv = self.value_store.bind_frozen(&tape);
        let r = self.rollout(&tape, model, &pm, &pa, &pv, starts, rng)?;
        Ok(Self::mean_over_steps(&r.returns)?.item())
    }

    /// One actor and one value update from imagination seeded at `starts`.
    pub fn update(
        &mut self,
        model: &WorldModel,
        starts: &LatentSnapshot,
        rng: &mut SimRng,
    ) -> Result<Vec<(String, f64)>> {
        let tape = Tape::new();
        let pm = model.store.bind_frozen(&tape);
        let pa = self.actor.store.bind(&tape);
        let pv_frozen = self.value_store.bind_frozen(&tape);
        let pv = self.value_store.bind(&tape);
        let r = self.rollout(&tape, model, &pm, &pa, &pv_frozen, starts, rng)?;

        let actor_loss = Self::mean_over_steps(&r.returns)?.neg();
        let mut sq = Vec::with_capacity(r.returns.len());
        for (f, g) in r.features.iter().zip(&r.returns) {
            let v = self.value.forward(&pv, f.detach())?;
            sq.push(v.sub(g.detach())?.square());
        }
        let value_loss = Self::mean_over_steps(&sq)?.scale(0.5);
        let total = actor_loss.add(value_loss)?;
        if !total.value().all_finite() {
            return Err(Error::Numerical {
                step: 0,
                detail: format!("non-finite policy loss (actor {}, value {})", actor_loss.item(), value_loss.item()),
                last_checkpoint: None,
            });
        }
        let grads = tape.backward(total)?;
        let clip = Some(self.cfg.grad_clip);
        let actor_norm = apply_update(&mut self.actor.store, &pa, &grads, &Adam::new(self.cfg.actor_lr), clip)?;
        let value_norm = apply_update(&mut self.value_store, &pv, &grads, &Adam::new(self.cfg.value_lr), clip)?;
        let reward_mean = Self::mean_over_steps(&r.rewards)?.item();
        Ok(vec![
            ("actor/loss".into(), actor_loss.item()),
            ("actor/grad_norm".into(), actor_norm),
            ("value/loss".into(), value_loss.item()),
            ("value/grad_norm".into(), value_norm),
            ("imagine/reward_mean".into(), reward_mean),
            ("imagine/return_mean".into(), -actor_loss.item()),
        ])
    }
}
