//! Episode storage and uniform segment sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One completed episode, stored flat.
///
/// Step `t` holds the observation `obs[t]`, the action that led to it
/// (`actions[t]`, zeros at `t = 0`) and the reward received on arrival
/// (`rewards[t]`, zero at `t = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub label_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub labels: Vec<f64>,
}

impl Episode {
    pub fn new(obs_dim: usize, action_dim: usize, label_dim: usize) -> Self {
        Self {
            obs_dim,
            action_dim,
            label_dim,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, obs: &[f64], action: &[f64], reward: f64, labels: &[f64]) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(action.len(), self.action_dim);
        debug_assert_eq!(labels.len(), self.label_dim);
        self.obs.extend_from_slice(obs);
        self.actions.extend_from_slice(action);
        self.rewards.push(reward);
        self.labels.extend_from_slice(labels);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_at(&self, t: usize) -> &[f64] {
        &self.obs[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action_at(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn labels_at(&self, t: usize) -> &[f64] {
        &self.labels[t * self.label_dim..(t + 1) * self.label_dim]
    }

    /// Undiscounted return (the `t = 0` slot carries no reward).
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// A batch of aligned windows, time-major.
///
/// Each entry is `[batch, dim]`; rewards are `[batch, 1]`.
#[derive(Clone, Debug)]
pub struct SegmentBatch {
    pub obs: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    pub rewards: Vec<Tensor>,
    pub labels: Vec<Tensor>,
}

impl SegmentBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.obs.first().map(Tensor::rows).unwrap_or(0)
    }

    /// Builds a batch from `(episode, start)` windows of length `len`.
    pub fn from_windows(episodes: &[&Episode], windows: &[(usize, usize)], len: usize) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::NotReady("no episodes".into()))?;
        let (od, ad, ld) = (first.obs_dim, first.action_dim, first.label_dim);
        let b = windows.len();
        let mut out = SegmentBatch {
            obs: Vec::with_capacity(len),
            actions: Vec::with_capacity(len),
            rewards: Vec::with_capacity(len),
            labels: Vec::with_capacity(len),
        };
        for t in 0..len {
            let mut o = Vec::with_capacity(b * od);
            let mut a = Vec::with_capacity(b * ad);
            let mut r = Vec::with_capacity(b);
            let mut l = Vec::with_capacity(b * ld.max(1));
            for &(e, start) in windows {
                let ep = episodes[e];
                let i = start + t;
                if i >= ep.len() {
                    return Err(Error::NotReady(format!(
                        "window {start}+{len} exceeds episode of length {}",
                        ep.len()
                    )));
                }
                o.extend_from_slice(ep.obs_at(i));
                a.extend_from_slice(ep.action_at(i));
                r.push(ep.rewards[i]);
                l.extend_from_slice(ep.labels_at(i));
            }
            out.obs.push(Tensor::matrix(b, od, o)?);
            out.actions.push(Tensor::matrix(b, ad, a)?);
            out.rewards.push(Tensor::matrix(b, 1, r)?);
            if ld > 0 {
                out.labels.push(Tensor::matrix(b, ld, l)?);
            }
        }
        Ok(out)
    }
}

/// FIFO store of complete episodes bounded by a total step count.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity_steps: usize,
    steps: usize,
}

impl ReplayBuffer {
    pub fn new(capacity_steps: usize) -> Self {
        Self {
            episodes: VecDeque::new(),
            capacity_steps,
            steps: 0,
        }
    }

    /// Stores an episode, evicting the oldest ones beyond capacity.
    pub fn push(&mut self, episode: Episode) {
        self.steps += episode.len();
        self.episodes.push_back(episode);
        while self.steps > self.capacity_steps && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().unwrap();
            self.steps -= old.len();
        }
    }

    pub fn capacity_steps(&self) -> usize {
        self.capacity_steps
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn num_steps(&self) -> usize {
        self.steps
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Number of length-`len` windows fully inside one episode.
    pub fn num_windows(&self, len: usize) -> usize {
        self.episodes
            .iter()
            .map(|e| (e.len() + 1).saturating_sub(len))
            .sum()
    }

    /// Draws `batch` windows of length `len` uniformly over all valid windows.
    pub fn sample_segments<R: Rng + ?Sized>(
        &self,
        batch: usize,
        len: usize,
        rng: &mut R,
    ) -> Result<SegmentBatch> {
        let windows = self.sample_windows(batch, len, rng)?;
        let eps: Vec<&Episode> = self.episodes.iter().collect();
        SegmentBatch::from_windows(&eps, &windows, len)
    }

    /// `(episode index, start)` pairs, uniform over valid windows.
    pub fn sample_windows<R: Rng + ?Sized>(
        &self,
        batch: usize,
        len: usize,
        rng: &mut R,
    ) -> Result<Vec<(usize, usize)>> {
        if len == 0 {
            return Err(Error::config("segment length must be positive"));
        }
        let total = self.num_windows(len);
        if total == 0 {
            return Err(Error::NotReady(format!(
                "no stored episode has {len} steps ({} episodes buffered)",
                self.episodes.len()
            )));
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut k = rng.gen_range(0..total);
            for (e, ep) in self.episodes.iter().enumerate() {
                let n = (ep.len() + 1).saturating_sub(len);
                if k < n {
                    out.push((e, k));
                    break;
                }
                k -= n;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn episode(len: usize, tag: f64) -> Episode {
        let mut e = Episode::new(1, 1, 0);
        for t in 0..len {
            e.push(&[tag + t as f64], &[0.0], t as f64, &[]);
        }
        e
    }

    #[test]
    fn single_window_always_returned() {
        let mut b = ReplayBuffer::new(1000);
        b.push(episode(5, 0.0));
        let mut rng = seeded(0, 0);
        for _ in 0..20 {
            let s = b.sample_segments(3, 5, &mut rng).unwrap();
            assert_eq!(s.len(), 5);
            assert_eq!(s.obs[0].data(), &[0.0, 0.0, 0.0]);
            assert_eq!(s.obs[4].data(), &[4.0, 4.0, 4.0]);
        }
    }

    #[test]
    fn too_long_is_not_ready() {
        let mut b = ReplayBuffer::new(1000);
        b.push(episode(5, 0.0));
        let mut rng = seeded(0, 0);
        assert!(matches!(b.sample_segments(1, 6, &mut rng), Err(Error::NotReady(_))));
        assert!(matches!(ReplayBuffer::new(10).sample_segments(1, 1, &mut rng), Err(Error::NotReady(_))));
    }

    #[test]
    fn windows_never_cross_episodes() {
        let mut b = ReplayBuffer::new(1000);
        b.push(episode(7, 0.0));
        b.push(episode(4, 100.0));
        b.push(episode(9, 200.0));
        let mut rng = seeded(1, 0);
        let s = b.sample_segments(500, 4, &mut rng).unwrap();
        for i in 0..500 {
            let first = s.obs[0].data()[i];
            let last = s.obs[3].data()[i];
            assert_eq!(last - first, 3.0);
        }
    }

    #[test]
    fn windows_are_uniform() {
        let t = 8;
        let mut b = ReplayBuffer::new(1000);
        b.push(episode(t + 9, 0.0));
        let mut rng = seeded(2, 0);
        let n = 100_000;
        let w = b.sample_windows(n, t, &mut rng).unwrap();
        let mut counts = [0usize; 10];
        for (_, s) in w {
            counts[s] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.1).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn eviction_respects_capacity() {
        let mut b = ReplayBuffer::new(10);
        b.push(episode(6, 0.0));
        b.push(episode(6, 0.0));
        assert_eq!(b.num_episodes(), 1);
        assert_eq!(b.num_steps(), 6);
    }
}
