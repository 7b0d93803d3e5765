use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which latent factorization the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    /// Signal `x` plus one noise factor `y` that never sees actions.
    #[serde(rename = "xy")]
    Xy,
    /// Adds a controllable, reward-irrelevant factor `z` with prior
    /// `p(z_t | x_t, y_t, z_{t-1}, a)`.
    #[serde(rename = "xyz")]
    Xyz,
    /// Like [`ModelVariant::Xyz`] but the `z` prior drops `y_t`:
    /// `p(z_t | x_t, z_{t-1}, a)`.
    #[serde(rename = "xyz-modified-z-prior")]
    XyzModifiedZPrior,
    /// A single unfactorized latent, for ablations.
    #[serde(rename = "monolithic")]
    Monolithic,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Xy,
        ModelVariant::Xyz,
        ModelVariant::XyzModifiedZPrior,
        ModelVariant::Monolithic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Xy => "xy",
            ModelVariant::Xyz => "xyz",
            ModelVariant::XyzModifiedZPrior => "xyz-modified-z-prior",
            ModelVariant::Monolithic => "monolithic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn factors(self) -> &'static [Factor] {
        match self {
            ModelVariant::Xy => &[Factor::X, Factor::Y],
            ModelVariant::Xyz | ModelVariant::XyzModifiedZPrior => &[Factor::X, Factor::Y, Factor::Z],
            ModelVariant::Monolithic => &[Factor::Monolithic],
        }
    }

    /// The factor the policy acts on.
    pub fn control_factor(self) -> Factor {
        match self {
            ModelVariant::Monolithic => Factor::Monolithic,
            _ => Factor::X,
        }
    }

    pub fn has(self, f: Factor) -> bool {
        self.factors().contains(&f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factor {
    X,
    Y,
    Z,
    Monolithic,
}

impl Factor {
    pub fn name(self) -> &'static str {
        match self {
            Factor::X => "x",
            Factor::Y => "y",
            Factor::Z => "z",
            Factor::Monolithic => "monolithic",
        }
    }

    /// Whether this factor's transition consumes the action.
    pub fn takes_action(self) -> bool {
        !matches!(self, Factor::Y)
    }
}

/// Recurrent (deterministic) and stochastic widths of one factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSize {
    pub deter: usize,
    pub stoch: usize,
}

impl FactorSize {
    pub const fn new(deter: usize, stoch: usize) -> Self {
        Self { deter, stoch }
    }

    pub fn features(self) -> usize {
        self.deter + self.stoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreeNatsStrategy {
    /// Clamp the whole `x` KL from below.
    ClampAllKlx,
    /// Split `KL_x = beta * KL_x + (1 - beta) * KL_x` and clamp only the
    /// first (model-fitting) share.
    SplitVaeVsMi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub x: FactorSize,
    pub y: FactorSize,
    pub z: FactorSize,
    pub monolithic: FactorSize,
    /// Width of encoder, decoder and head hidden layers.
    pub hidden_width: usize,
    /// Output width of the observation encoder.
    pub embed_dim: usize,
    /// Overall KL weight.
    pub alpha: f64,
    /// Relative weight of the `y`/`z` KL terms, in `(0, 1]`.
    pub beta: f64,
    /// Per-step free nats on the `x` KL; `0` disables clamping.
    pub free_nats: f64,
    pub free_nats_strategy: FreeNatsStrategy,
    pub learning_rate: f64,
    pub grad_clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::Xy,
            x: FactorSize::new(32, 8),
            y: FactorSize::new(32, 8),
            z: FactorSize::new(32, 8),
            monolithic: FactorSize::new(64, 16),
            hidden_width: 256,
            embed_dim: 256,
            alpha: 1.0,
            beta: 0.25,
            free_nats: 3.0,
            free_nats_strategy: FreeNatsStrategy::ClampAllKlx,
            learning_rate: 3e-4,
            grad_clip: 100.0,
        }
    }
}

impl ModelConfig {
    /// Latent sizes used for image-scale control suites.
    pub fn image_scale() -> Self {
        Self {
            x: FactorSize::new(120, 20),
            y: FactorSize::new(120, 20),
            z: FactorSize::new(70, 10),
            monolithic: FactorSize::new(200, 30),
            ..Self::default()
        }
    }

    pub fn size(&self, f: Factor) -> FactorSize {
        match f {
            Factor::X => self.x,
            Factor::Y => self.y,
            Factor::Z => self.z,
            Factor::Monolithic => self.monolithic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.free_nats < 0.0 {
            return Err(Error::config("free_nats must be non-negative"));
        }
        for &f in self.variant.factors() {
            let s = self.size(f);
            if s.deter == 0 || s.stoch == 0 {
                return Err(Error::config(format!("factor {} has zero width", f.name())));
            }
        }
        if self.hidden_width == 0 || self.embed_dim == 0 {
            return Err(Error::config("network widths must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("learning_rate and grad_clip must be positive"));
        }
        Ok(())
    }
}
