use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Smooth random drift applied to every observation coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    /// Std of the Gaussian acceleration added each step.
    pub sigma_accel: f64,
    /// Multiplicative velocity decay per step.
    pub decay: f64,
    /// Coordinates beyond this magnitude feel the restoring pull.
    pub bound: f64,
    /// Spring constant of the restoring pull.
    pub pull: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            sigma_accel: 0.05,
            decay: 0.9,
            bound: 1.0,
            pull: 0.1,
        }
    }
}

/// Second-order offset state, one coordinate per observation dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterState {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl JitterState {
    pub fn at_rest(dim: usize) -> Self {
        Self {
            position: vec![0.0; dim],
            velocity: vec![0.0; dim],
        }
    }

    /// `v <- decay * v + N(0, sigma^2) - pull * p [|p| > bound]; p <- p + v`.
    pub fn advance<R: Rng + ?Sized>(&mut self, cfg: &JitterConfig, rng: &mut R) {
        for (p, v) in self.position.iter_mut().zip(&mut self.velocity) {
            let eps: f64 = rng.sample(StandardNormal);
            *v = cfg.decay * *v + cfg.sigma_accel * eps;
            if p.abs() > cfg.bound {
                *v -= cfg.pull * *p;
            }
            *p += *v;
        }
    }
}

/// Shifts an (unmixed) observation by the current jitter offset.
pub fn apply_jitter(observation: &[f64], state: &JitterState) -> Vec<f64> {
    observation
        .iter()
        .zip(&state.position)
        .map(|(o, p)| o + p)
        .collect()
}
