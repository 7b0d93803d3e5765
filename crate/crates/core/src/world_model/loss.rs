//! Training objective.
//!
//! All terms are sums over time (and latent or observation dims) averaged
//! over the batch:
//!
//! ```text
//! total = recon + alpha * ((kl_x' + beta * kl_y) + beta * kl_z)
//! ```
//!
//! `kl_x'` is the `x` KL after free nats. With threshold `f` over a
//! length-`T` segment, each sequence contributes `T * max(kl_x / T, f)`,
//! i.e. the floor is per step. Under the split strategy only a `beta` share
//! is clamped: `kl_x' = beta * clamp(kl_x) + (1 - beta) * kl_x`.
//!
//! The monolithic variant reports its single KL as `kl_x`.

use serde::{Deserialize, Serialize};

use super::{Factor, FreeNatsStrategy, Observed, Sampling, WorldModel};
use crate::distributions::kl;
use crate::error::{Error, Result};
use crate::replay::SegmentBatch;
use crate::tensor::{Bound, Tape, Var};

/// Differentiable loss components (all scalars).
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub recon: Var<'t>,
    pub obs_nll: Var<'t>,
    pub reward_nll: Var<'t>,
    pub kl_x: Var<'t>,
    pub kl_x_effective: Var<'t>,
    pub kl_y: Var<'t>,
    pub kl_z: Var<'t>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub obs_nll: f64,
    pub reward_nll: f64,
    pub kl_x: f64,
    pub kl_x_effective: f64,
    pub kl_y: f64,
    pub kl_z: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// Re-assembles the total from the stored components.
    pub fn recompute_total(&self) -> f64 {
        combine_terms(self.recon, self.kl_x_effective, self.kl_y, self.kl_z, self.alpha, self.beta)
    }

    pub fn named_values(&self) -> [(&'static str, f64); 8] {
        [
            ("loss/total", self.total),
            ("loss/recon", self.recon),
            ("loss/obs_nll", self.obs_nll),
            ("loss/reward_nll", self.reward_nll),
            ("loss/kl_x", self.kl_x),
            ("loss/kl_x_effective", self.kl_x_effective),
            ("loss/kl_y", self.kl_y),
            ("loss/kl_z", self.kl_z),
        ]
    }
}

/// Same operation order as the taped assembly, so the result is bit-exact.
pub fn combine_terms(recon: f64, kl_x: f64, kl_y: f64, kl_z: f64, alpha: f64, beta: f64) -> f64 {
    recon + (kl_x + kl_y * beta + kl_z * beta) * alpha
}

pub struct LossOutput<'t> {
    pub terms: LossTerms<'t>,
    pub breakdown: LossBreakdown,
}

impl WorldModel {
    /// Reconstruction and KL terms for a filtered segment.
    pub fn assemble_loss<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        segment: &SegmentBatch,
        observed: &Observed<'t>,
    ) -> Result<LossOutput<'t>> {
        let cfg = &self.config;
        cfg.validate()?;
        let len = segment.len();
        if observed.posteriors.len() != len || observed.priors.len() != len {
            return Err(Error::shape(
                "assemble_loss",
                format!("{} steps of latents for a length-{len} segment", observed.posteriors.len()),
            ));
        }
        let factors = self.variant().factors();
        let mut obs_ll: Option<Var<'t>> = None;
        let mut rew_ll: Option<Var<'t>> = None;
        let mut kls: Vec<Option<Var<'t>>> = vec![None; factors.len()];
        let acc = |slot: &mut Option<Var<'t>>, v: Var<'t>| -> Result<()> {
            *slot = Some(match slot.take() {
                Some(s) => s.add(v)?,
                None => v,
            });
            Ok(())
        };
        for t in 0..len {
            let post = &observed.posteriors[t];
            let dec = self.decode(tape, p, post)?;
            let obs = tape.constant(segment.obs[t].clone());
            let rew = tape.constant(segment.rewards[t].clone());
            acc(&mut obs_ll, dec.obs.log_prob(obs)?)?;
            acc(&mut rew_ll, dec.reward.log_prob(rew)?)?;
            for (i, lat) in post.factors.iter().enumerate() {
                acc(&mut kls[i], kl(&lat.dist, &observed.priors[t][i])?)?;
            }
        }
        // Per-sequence sums are [B, 1]; batch-average at the end.
        let obs_nll = obs_ll.expect("non-empty").mean().neg();
        let reward_nll = rew_ll.expect("non-empty").mean().neg();
        let recon = obs_nll.add(reward_nll)?;

        let kl_of = |f: Factor| factors.iter().position(|&g| g == f).map(|i| kls[i].expect("non-empty"));
        let control = self.control_factor();
        let kl_x_seq = kl_of(control).expect("control factor");
        let kl_x = kl_x_seq.mean();
        let kl_x_effective = if cfg.free_nats > 0.0 {
            let t = len as f64;
            let clamped = kl_x_seq.scale(1.0 / t).clamp_min(cfg.free_nats).scale(t).mean();
            match cfg.free_nats_strategy {
                FreeNatsStrategy::ClampAllKlx => clamped,
                FreeNatsStrategy::SplitVaeVsMi => clamped.scale(cfg.beta).add(kl_x.scale(1.0 - cfg.beta))?,
            }
        } else {
            kl_x
        };
        let zero = || tape.scalar(0.0);
        let kl_y = kl_of(Factor::Y).map(|v| v.mean()).unwrap_or_else(zero);
        let kl_z = kl_of(Factor::Z).map(|v| v.mean()).unwrap_or_else(zero);

        let total = recon.add(
            kl_x_effective
                .add(kl_y.scale(cfg.beta))?
                .add(kl_z.scale(cfg.beta))?
                .scale(cfg.alpha),
        )?;
        let terms = LossTerms {
            total,
            recon,
            obs_nll,
            reward_nll,
            kl_x,
            kl_x_effective,
            kl_y,
            kl_z,
        };
        let breakdown = LossBreakdown {
            total: total.item(),
            recon: recon.item(),
            obs_nll: obs_nll.item(),
            reward_nll: reward_nll.item(),
            kl_x: kl_x.item(),
            kl_x_effective: kl_x_effective.item(),
            kl_y: kl_y.item(),
            kl_z: kl_z.item(),
            alpha: cfg.alpha,
            beta: cfg.beta,
        };
        if !breakdown.total.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                detail: format!("non-finite model loss {breakdown:?}"),
                last_checkpoint: None,
            });
        }
        Ok(LossOutput { terms, breakdown })
    }

    /// Filters `segment` and assembles the loss in one go.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        segment: &SegmentBatch,
        sampling: &mut Sampling<'_>,
    ) -> Result<(Observed<'t>, LossOutput<'t>)> {
        let observed = self.observe_sequence(tape, p, segment, sampling)?;
        let out = self.assemble_loss(tape, p, segment, &observed)?;
        Ok((observed, out))
    }
}
