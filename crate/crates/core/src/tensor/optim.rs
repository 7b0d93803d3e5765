use std::rc::Rc;

use super::ParameterStore;
use crate::error::{Error, Result};

/// Bias-corrected adaptive-moment optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(3e-4)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update from the stored gradients, then clears them.
    pub fn step(&self, store: &mut ParameterStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        store.adam_step += 1;
        let t = store.adam_step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in &mut store.params {
            let g = p.grad.take().expect("checked above");
            let value = Rc::make_mut(&mut p.value);
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for (((w, gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
///
/// Returns the factor applied (1.0 when already within bounds).
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = store.grad_norm();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for p in &mut store.params {
        if let Some(g) = &mut p.grad {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(scale)
}
