//! Diagonal Gaussians over the tape.
//!
//! Every distribution is batched: `mean` and `std` have shape `[batch, dim]`
//! and per-element reductions (`log_prob`, `kl`) return `[batch, 1]`.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Floor added after the softplus that produces standard deviations.
pub const MIN_STD: f64 = 1e-4;

/// Fixed standard deviation of the observation and reward heads.
pub const HEAD_STD: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'t> {
    pub mean: Var<'t>,
    pub std: Var<'t>,
}

impl<'t> DiagGaussian<'t> {
    pub fn new(mean: Var<'t>, std: Var<'t>) -> Result<Self> {
        if mean.shape() != std.shape() {
            return Err(Error::shape(
                "gaussian",
                format!("mean {:?} vs std {:?}", mean.shape(), std.shape()),
            ));
        }
        Ok(Self { mean, std })
    }

    /// `std = softplus(raw) + MIN_STD`.
    pub fn from_raw(mean: Var<'t>, raw_std: Var<'t>) -> Result<Self> {
        Self::new(mean, raw_std.softplus().shift(MIN_STD))
    }

    /// Splits `[batch, 2d]` network output into mean and raw std halves.
    pub fn from_params(params: Var<'t>) -> Result<Self> {
        let c = params.value().cols();
        if c % 2 != 0 {
            return Err(Error::shape("gaussian", format!("odd parameter width {c}")));
        }
        let d = c / 2;
        Self::from_raw(params.slice_cols(0, d)?, params.slice_cols(d, c)?)
    }

    /// Fixed-deviation distribution centred on `mean`.
    pub fn with_fixed_std(mean: Var<'t>, std: f64) -> Self {
        let tape = mean.tape();
        let s = tape.constant(Tensor::full(mean.shape(), std));
        Self { mean, std: s }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.mean.shape()
    }

    /// Reparameterized draw `mean + std * eps`.
    pub fn rsample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Var<'t>> {
        let eps = self.mean.tape().constant(Tensor::randn(self.mean.shape(), rng));
        self.sample_with(eps)
    }

    /// Reparameterized draw with caller-supplied standard-normal noise.
    pub fn sample_with(&self, eps: Var<'t>) -> Result<Var<'t>> {
        self.mean.add(self.std.mul(eps)?)
    }

    /// Summed Gaussian log-density over the last axis.
    pub fn log_prob(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.shape() != self.mean.shape() {
            return Err(Error::shape(
                "log_prob",
                format!("value {:?} vs distribution {:?}", x.shape(), self.mean.shape()),
            ));
        }
        let z = x.sub(self.mean)?.div(self.std)?;
        let per_dim = z
            .square()
            .scale(-0.5)
            .sub(self.std.log())?
            .shift(-0.5 * (2.0 * PI).ln());
        Ok(per_dim.sum_last())
    }

    pub fn detach(&self) -> Self {
        Self {
            mean: self.mean.detach(),
            std: self.std.detach(),
        }
    }
}

/// `KL(q || p)` summed over the last axis.
///
/// `log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2` per dimension.
pub fn kl<'t>(q: &DiagGaussian<'t>, p: &DiagGaussian<'t>) -> Result<Var<'t>> {
    if q.shape() != p.shape() {
        return Err(Error::shape(
            "kl",
            format!("q {:?} vs p {:?}", q.shape(), p.shape()),
        ));
    }
    let log_ratio = p.std.log().sub(q.std.log())?;
    let num = q.std.square().add(q.mean.sub(p.mean)?.square())?;
    let den = p.std.square().scale(2.0);
    Ok(log_ratio.add(num.div(den)?)?.shift(-0.5).sum_last())
}

/// Distribution of `r_x + r_y` for independent Gaussian summands.
pub fn compose_reward<'t>(rx: &DiagGaussian<'t>, ry: &DiagGaussian<'t>) -> Result<DiagGaussian<'t>> {
    let mean = rx.mean.add(ry.mean)?;
    let std = rx.std.square().add(ry.std.square())?.sqrt();
    DiagGaussian::new(mean, std)
}
