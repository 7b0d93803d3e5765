use rand::{Rng, SeedableRng};

use super::{apply_update, Actor, PolicyConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::rng::SimRng;
use crate::tensor::{Adam, Bound, ParamId, ParameterStore, Tape, Tensor, Var};

/// Encoded transitions `(f_t, a, r, f_{t+1})`, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Transitions {
    pub features: Tensor,
    pub actions: Tensor,
    /// `[N, 1]`.
    pub rewards: Tensor,
    pub next_features: Tensor,
}

impl Transitions {
    pub fn len(&self) -> usize {
        self.rewards.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_rows(idx)?,
            actions: self.actions.select_rows(idx)?,
            rewards: self.rewards.select_rows(idx)?,
            next_features: self.next_features.select_rows(idx)?,
        })
    }

    pub fn concat(parts: &[Transitions]) -> Result<Self> {
        let cat = |f: fn(&Transitions) -> &Tensor| -> Result<Tensor> {
            let v: Vec<&Tensor> = parts.iter().map(f).collect();
            Tensor::concat_rows(&v)
        };
        Ok(Self {
            features: cat(|t| &t.features)?,
            actions: cat(|t| &t.actions)?,
            rewards: cat(|t| &t.rewards)?,
            next_features: cat(|t| &t.next_features)?,
        })
    }
}

/// Soft actor-critic with twin critics and automatic temperature.
#[derive(Clone, Debug)]
pub struct LatentSac {
    pub(crate) cfg: PolicyConfig,
    pub actor: Actor,
    q1: Mlp,
    q2: Mlp,
    pub critic_store: ParameterStore,
    pub target_store: ParameterStore,
    pub alpha_store: ParameterStore,
    log_alpha: ParamId,
    /// When false the temperature stays at its initial value.
    pub auto_temperature: bool,
}

impl LatentSac {
    pub fn new(cfg: PolicyConfig, feature_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SimRng::seed_from_u64(seed);
        let w = cfg.hidden_width;
        let actor = Actor::new(feature_dim, action_dim, w, &mut rng)?;
        let mut critic_store = ParameterStore::new();
        let inp = feature_dim + action_dim;
        let q1 = Mlp::new(&mut critic_store, "q1", inp, &[w, w], 1, Activation::Elu, &mut rng)?;
        let q2 = Mlp::new(&mut critic_store, "q2", inp, &[w, w], 1, Activation::Elu, &mut rng)?;
        let target_store = critic_store.clone();
        let mut alpha_store = ParameterStore::new();
        let log_alpha = alpha_store.add("log_alpha", Tensor::scalar(cfg.sac.init_temperature.ln()))?;
        Ok(Self {
            cfg,
            actor,
            q1,
            q2,
            critic_store,
            target_store,
            alpha_store,
            log_alpha,
            auto_temperature: true,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn temperature(&self) -> f64 {
        self.alpha_store.value(self.log_alpha).item().exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.cfg.sac.target_entropy.unwrap_or(-(self.actor.action_dim as f64))
    }

    fn q_pair<'t>(&self, tape: &'t Tape, p: &Bound<'t>, f: Var<'t>, a: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let x = tape.concat(&[f, a])?;
        Ok((self.q1.forward(p, x)?, self.q2.forward(p, x)?))
    }

    /// Both online critics, `[N, 1]` each.
    pub fn q_values(&self, features: &Tensor, actions: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let p = self.critic_store.bind_frozen(&tape);
        let (a, b) = self.q_pair(&tape, &p, tape.constant(features.clone()), tape.constant(actions.clone()))?;
        Ok(((*a.value()).clone(), (*b.value()).clone()))
    }

    /// Entropy-regularized bootstrap targets and the per-critic values
    /// they take the minimum of.
    pub fn critic_targets(&self, tr: &Transitions, rng: &mut SimRng) -> Result<(Tensor, Tensor, Tensor)> {
        let tape = Tape::new();
        let pa = self.actor.store.bind_frozen(&tape);
        let pt = self.target_store.bind_frozen(&tape);
        let next = tape.constant(tr.next_features.clone());
        let (a, logp) = self.actor.sample(&pa, next, rng)?;
        let (t1, t2) = self.q_pair(&tape, &pt, next, a)?;
        let alpha = self.temperature();
        let r = tape.constant(tr.rewards.clone());
        let g = self.cfg.gamma;
        let soft = |q: Var<'_>| -> Result<Tensor> {
            let v = q.sub(logp.scale(alpha))?;
            Ok((*r.add(v.scale(g))?.value()).clone())
        };
        let y1 = soft(t1)?;
        let y2 = soft(t2)?;
        let y = y1.data().iter().zip(y2.data()).map(|(a, b)| a.min(*b)).collect();
        Ok((Tensor::new(y1.shape().to_vec(), y)?, y1, y2))
    }

    pub fn update(&mut self, batch: &Transitions, rng: &mut SimRng) -> Result<Vec<(String, f64)>> {
        if batch.is_empty() {
            return Err(Error::NotReady("no transitions for sac update".into()));
        }
        let bs = self.cfg.sac.batch_size;
        let sub;
        let tr = if batch.len() > bs {
            let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..batch.len())).collect();
            sub = batch.select_rows(&idx)?;
            &sub
        } else {
            batch
        };
        let opt = Adam::new(self.cfg.sac.learning_rate);
        let clip = self.cfg.sac.grad_clip;

        let (y, _, _) = self.critic_targets(tr, rng)?;
        let (critic_loss, critic_norm, q_mean) = {
            let tape = Tape::new();
            let pc = self.critic_store.bind(&tape);
            let f = tape.constant(tr.features.clone());
            let a = tape.constant(tr.actions.clone());
            let y = tape.constant(y);
            let (q1, q2) = self.q_pair(&tape, &pc, f, a)?;
            let loss = q1.sub(y)?.square().mean().add(q2.sub(y)?.square().mean())?.scale(0.5);
            let grads = tape.backward(loss)?;
            let norm = apply_update(&mut self.critic_store, &pc, &grads, &opt, clip)?;
            (loss.item(), norm, q1.value().sum() / tr.len() as f64)
        };

        let alpha = self.temperature();
        let target_entropy = self.target_entropy();
        let (actor_loss, actor_norm, entropy) = {
            let tape = Tape::new();
            let pa = self.actor.store.bind(&tape);
            let pc = self.critic_store.bind_frozen(&tape);
            let pl = self.alpha_store.bind(&tape);
            let f = tape.constant(tr.features.clone());
            let (a, logp) = self.actor.sample(&pa, f, rng)?;
            let (q1, q2) = self.q_pair(&tape, &pc, f, a)?;
            let actor_loss = logp.scale(alpha).sub(q1.minimum(q2)?)?.mean();
            let alpha_loss = logp.detach().shift(target_entropy).mul(pl.get(self.log_alpha))?.mean().neg();
            let grads = tape.backward(actor_loss.add(alpha_loss)?)?;
            let norm = apply_update(&mut self.actor.store, &pa, &grads, &opt, clip)?;
            if self.auto_temperature {
                apply_update(&mut self.alpha_store, &pl, &grads, &opt, None)?;
            }
            (actor_loss.item(), norm, -logp.value().sum() / tr.len() as f64)
        };
        self.target_store.soft_update_from(&self.critic_store, self.cfg.sac.tau);
        Ok(vec![
            ("sac/critic_loss".into(), critic_loss),
            ("sac/critic_grad_norm".into(), critic_norm),
            ("sac/q_mean".into(), q_mean),
            ("sac/actor_loss".into(), actor_loss),
            ("sac/actor_grad_norm".into(), actor_norm),
            ("sac/entropy".into(), entropy),
            ("sac/temperature".into(), self.temperature()),
        ])
    }
}
