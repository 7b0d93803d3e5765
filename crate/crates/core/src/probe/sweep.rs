use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::world_model::{Factor, LatentSnapshot, WorldModel};

/// Decoded means along a trajectory with some factors held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSweep {
    pub varying: Vec<Factor>,
    /// `[T][obs_dim]`
    pub obs_means: Vec<Vec<f64>>,
    pub reward_x_means: Vec<f64>,
}

impl FactorSweep {
    /// Summed per-dimension variance over time of the decoded observation.
    pub fn obs_variance(&self) -> f64 {
        time_variance(&self.obs_means)
    }

    pub fn reward_x_variance(&self) -> f64 {
        let rows: Vec<Vec<f64>> = self.reward_x_means.iter().map(|&v| vec![v]).collect();
        time_variance(&rows)
    }
}

fn time_variance(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    if n == 0 {
        return 0.0;
    }
    let d = rows[0].len();
    (0..d)
        .map(|k| {
            // shifted by the first sample so constant sequences give exactly 0
            let r0 = rows[0][k];
            let m = rows.iter().map(|r| r[k] - r0).sum::<f64>() / n as f64;
            (rows.iter().map(|r| (r[k] - r0).powi(2)).sum::<f64>() / n as f64 - m * m).max(0.0)
        })
        .sum()
}

/// Decodes `latents` with every factor outside `varying` frozen at its value
/// at step `t0`.
pub fn decode_sweep(model: &WorldModel, latents: &[LatentSnapshot], varying: &[Factor], t0: usize) -> Result<FactorSweep> {
    let frozen = latents
        .get(t0)
        .ok_or_else(|| Error::shape("factor sweep", format!("t0 = {t0} outside {} steps", latents.len())))?;
    let factors = model.variant().factors();
    let mixed: Vec<LatentSnapshot> = latents
        .iter()
        .map(|s| {
            let pick = |i: usize| if varying.contains(&factors[i]) { s } else { frozen };
            LatentSnapshot {
                variant: s.variant,
                deter: (0..factors.len()).map(|i| pick(i).deter[i].clone()).collect(),
                stoch: (0..factors.len()).map(|i| pick(i).stoch[i].clone()).collect(),
            }
        })
        .collect();
    let all = LatentSnapshot::concat(&mixed)?;
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let dec = model.decode(&tape, &p, &all.to_state(&tape))?;
    let obs: Tensor = (*dec.obs.mean.value()).clone();
    Ok(FactorSweep {
        varying: varying.to_vec(),
        obs_means: (0..obs.rows()).map(|r| obs.row(r).to_vec()).collect(),
        reward_x_means: dec.reward_x.mean.value().data().to_vec(),
    })
}

/// Variance attribution of one factor (or of the full reconstruction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Factor name, or `"full"` for the unfrozen reconstruction.
    pub factor: String,
    pub obs_variance: f64,
    pub reward_x_variance: f64,
    /// `obs_variance` over the full reconstruction's.
    pub obs_fraction: Option<f64>,
}

/// One sweep per factor plus the full reconstruction.
pub fn factor_sweep(model: &WorldModel, latents: &[LatentSnapshot], t0: usize) -> Result<Vec<SweepSummary>> {
    let factors = model.variant().factors();
    let full = decode_sweep(model, latents, factors, t0)?;
    let full_var = full.obs_variance();
    let frac = |v: f64| (full_var > 0.0).then(|| v / full_var);
    let mut out = Vec::with_capacity(factors.len() + 1);
    for &f in factors {
        let s = decode_sweep(model, latents, &[f], t0)?;
        out.push(SweepSummary {
            factor: f.name().to_string(),
            obs_variance: s.obs_variance(),
            reward_x_variance: s.reward_x_variance(),
            obs_fraction: frac(s.obs_variance()),
        });
    }
    out.push(SweepSummary {
        factor: "full".into(),
        obs_variance: full_var,
        reward_x_variance: full.reward_x_variance(),
        obs_fraction: frac(full_var),
    });
    Ok(out)
}
