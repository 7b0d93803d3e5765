//! Measurements shared by the integration tests and the acceptance report.
//!
//! Every function returns the measured quantity so callers decide the
//! threshold; the oracles here use plain scalar arithmetic, not the tape.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use dmdp_core::config::RunConfig;
use dmdp_core::distributions::{compose_reward, kl, DiagGaussian};
use dmdp_core::env::{Env, EnvConfig, EnvVariant, JitterConfig, JitterState, Mixing};
use dmdp_core::policy::{ActMode, Agent, Algo, PolicyConfig};
use dmdp_core::replay::{Episode, SegmentBatch};
use dmdp_core::rng::seeded;
use dmdp_core::tensor::gradcheck::{check_case, registered_ops};
use dmdp_core::tensor::{clip_grad_norm, Adam, Tape, Tensor};
use dmdp_core::trainer::{load_checkpoint, read_metrics, TrainConfig, Trainer};
use dmdp_core::world_model::{
    Factor, FactorSize, LatentSnapshot, ModelConfig, ModelVariant, Sampling, WorldModel,
};

pub fn normal_logpdf(x: f64, mu: f64, sd: f64) -> f64 {
    -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * PI).ln()
}

pub fn normal_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
}

// ---------------------------------------------------------------- autodiff

/// Worst relative error over every registered op and three input draws.
pub fn gradcheck_worst() -> (f64, &'static str) {
    let mut worst = (0.0, "none");
    for case in registered_ops() {
        for seed in 0..3 {
            let e = check_case(&case, seed, 1e-5).expect("gradcheck runs");
            if e > worst.0 {
                worst = (e, case.name);
            }
        }
    }
    worst
}

// ----------------------------------------------------------- distributions

fn tape_gaussian<'t>(tape: &'t Tape, mean: &[f64], std: &[f64]) -> DiagGaussian<'t> {
    let n = mean.len();
    DiagGaussian::new(
        tape.constant(Tensor::matrix(1, n, mean.to_vec()).unwrap()),
        tape.constant(Tensor::matrix(1, n, std.to_vec()).unwrap()),
    )
    .unwrap()
}

/// Draws `pairs` random diagonal Gaussian pairs `(q, p)` over 1 to 4 dims.
pub fn random_gaussian_pairs(pairs: usize, seed: u64) -> Vec<[(Vec<f64>, Vec<f64>); 2]> {
    let mut rng = seeded(seed, 0);
    (0..pairs)
        .map(|_| {
            let d = rng.gen_range(1..=4);
            let mut draw = || -> (Vec<f64>, Vec<f64>) {
                (
                    (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    (0..d).map(|_| rng.gen_range(0.3..2.0)).collect(),
                )
            };
            [draw(), draw()]
        })
        .collect()
}

fn closed_form_kl(pair: &[(Vec<f64>, Vec<f64>); 2]) -> f64 {
    let [(mq, sq), (mp, sp)] = pair;
    let tape = Tape::new();
    kl(&tape_gaussian(&tape, mq, sq), &tape_gaussian(&tape, mp, sp))
        .unwrap()
        .item()
}

/// Worst relative gap between the closed-form KL and a `samples`-point
/// stratified Monte Carlo estimate of `E_q[log q(x) - log p(x)]`.
///
/// The log ratio is a sum over dimensions, so each dimension is estimated
/// from its own stratified normal draws: one uniform per stratum
/// `[i/n, (i+1)/n)`, mapped through the inverse normal CDF.
pub fn kl_monte_carlo_worst(pairs: usize, samples: usize, seed: u64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut rng = seeded(seed, 1);
    let mut worst: f64 = 0.0;
    for pair in random_gaussian_pairs(pairs, seed) {
        let [(mq, sq), (mp, sp)] = &pair;
        let mut mc = 0.0;
        for k in 0..mq.len() {
            let mut acc = 0.0;
            for i in 0..samples {
                let u = (i as f64 + rng.gen::<f64>()) / samples as f64;
                let x = mq[k] + sq[k] * unit.inverse_cdf(u);
                acc += normal_logpdf(x, mq[k], sq[k]) - normal_logpdf(x, mp[k], sp[k]);
            }
            mc += acc / samples as f64;
        }
        let closed = closed_form_kl(&pair);
        worst = worst.max((closed - mc).abs() / closed.abs());
    }
    worst
}

/// Worst `|closed - estimate| / standard error` for plain i.i.d. Monte Carlo.
pub fn kl_plain_monte_carlo_worst_z(pairs: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed, 2);
    let mut worst: f64 = 0.0;
    for pair in random_gaussian_pairs(pairs, seed) {
        let [(mq, sq), (mp, sp)] = &pair;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..samples {
            let mut l = 0.0;
            for k in 0..mq.len() {
                let eps: f64 = rng.sample(StandardNormal);
                let x = mq[k] + sq[k] * eps;
                l += normal_logpdf(x, mq[k], sq[k]) - normal_logpdf(x, mp[k], sp[k]);
            }
            s1 += l;
            s2 += l * l;
        }
        let n = samples as f64;
        let mean = s1 / n;
        let se = ((s2 / n - mean * mean) / n).sqrt();
        worst = worst.max((closed_form_kl(&pair) - mean).abs() / se);
    }
    worst
}

/// Worst absolute gap between the composed-reward log density and the log of
/// a numerically convolved density of the two summands.
pub fn compose_grid_worst(cases: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed, 1);
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let (m1, m2): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        // the first case uses the fixed head deviations
        let (s1, s2): (f64, f64) = if c == 0 {
            (1.0, 1.0)
        } else {
            (rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0))
        };
        let total_sd = (s1 * s1 + s2 * s2).sqrt();
        let r = m1 + m2 + rng.gen_range(-3.0..3.0) * total_sd;

        // trapezoid rule for  int p1(u) p2(r - u) du
        let (lo, hi) = (m1 - 12.0 * s1, m1 + 12.0 * s1);
        let n = 40_000;
        let h = (hi - lo) / n as f64;
        let f = |u: f64| (normal_logpdf(u, m1, s1) + normal_logpdf(r - u, m2, s2)).exp();
        let mut density = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            density += f(lo + i as f64 * h);
        }
        density *= h;

        let tape = Tape::new();
        let a = tape_gaussian(&tape, &[m1], &[s1]);
        let b = tape_gaussian(&tape, &[m2], &[s2]);
        let lp = compose_reward(&a, &b)
            .unwrap()
            .log_prob(tape.constant(Tensor::matrix(1, 1, vec![r]).unwrap()))
            .unwrap()
            .item();
        worst = worst.max((lp - density.ln()).abs());
    }
    worst
}

// ------------------------------------------------------------- environment

pub fn oracle_env(variant: EnvVariant, mixing: Mixing, cap: usize, repeat: usize) -> Env {
    Env::new(EnvConfig {
        variant,
        mixing,
        episode_cap: cap,
        action_repeat: repeat,
        ctrl_irrelevant_dim: 3,
        unctrl_irrelevant_dim: 6,
        ..EnvConfig::default()
    })
    .unwrap()
}

fn random_actions(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = seeded(seed, 5);
    (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
}

/// Per-step labels and rewards of one episode under a fixed action list.
pub fn rollout(env: &mut Env, seed: u64, actions: &[[f64; 2]]) -> Vec<dmdp_core::env::EnvStep> {
    let mut steps = vec![env.reset(seed)];
    for a in actions {
        let s = env.step(a).unwrap();
        let done = s.done;
        steps.push(s);
        if done {
            break;
        }
    }
    steps
}

/// Counts steps where an uncontrollable block differs between two action
/// sequences from the same seed, and steps where the controllable blocks
/// differ (which must be most of them).
pub fn uncontrollability_counts(seeds: u64) -> (usize, usize, usize) {
    let mut env = oracle_env(EnvVariant::Full, Mixing::Identity, 200, 2);
    let (mut violations, mut ctrl_changes, mut steps) = (0, 0, 0);
    for seed in 0..seeds {
        let a = rollout(&mut env, seed, &random_actions(100, 2 * seed));
        let b = rollout(&mut env, seed, &random_actions(100, 2 * seed + 1));
        for (sa, sb) in a.iter().zip(&b).skip(1) {
            let (la, lb) = (&sa.info.labels, &sb.info.labels);
            steps += 1;
            if la.unctrl_relevant != lb.unctrl_relevant || la.unctrl_irrelevant != lb.unctrl_irrelevant {
                violations += 1;
            }
            if la.signal != lb.signal && la.ctrl_irrelevant != lb.ctrl_irrelevant {
                ctrl_changes += 1;
            }
        }
    }
    (violations, ctrl_changes, steps)
}

/// Largest deviation of the reward from its decomposition and from an
/// independent recomputation out of the labels (action repeat 1).
pub fn reward_decomposition_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for variant in [EnvVariant::BackgroundSensor, EnvVariant::Full] {
        let mut env = oracle_env(variant, Mixing::RandomOrthogonal, 100, 1);
        for seed in 0..seeds {
            for s in rollout(&mut env, seed, &random_actions(100, seed)).iter().skip(1) {
                let i = &s.info;
                worst = worst.max((s.reward - (i.reward_signal + i.reward_noise)).abs());
                let off = &i.labels.signal;
                let dist = (off[0] * off[0] + off[1] * off[1]).sqrt();
                worst = worst.max((i.reward_signal + dist).abs());
                // labels show the process in units of its stationary std
                let noise = env.config().reward_noise_std * i.labels.unctrl_relevant.as_ref().unwrap()[0];
                worst = worst.max((i.reward_noise - noise).abs());
            }
        }
    }
    worst
}

/// Largest reward difference when only reward-irrelevant content changes:
/// extra blocks, a different background dimension, jitter and mixing.
pub fn reward_irrelevance_worst(seeds: u64) -> f64 {
    let mut base = oracle_env(EnvVariant::BackgroundSensor, Mixing::Identity, 120, 2);
    let mut full = oracle_env(EnvVariant::Full, Mixing::RandomOrthogonal, 120, 2);
    let mut wide = Env::new(EnvConfig {
        variant: EnvVariant::BackgroundSensor,
        unctrl_irrelevant_dim: 16,
        mixing: Mixing::RandomOrthogonal,
        structure_seed: 99,
        episode_cap: 120,
        ..EnvConfig::default()
    })
    .unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let acts = random_actions(60, seed + 100);
        let a = rollout(&mut base, seed, &acts);
        for other in [rollout(&mut full, seed, &acts), rollout(&mut wide, seed, &acts)] {
            for (x, y) in a.iter().zip(&other) {
                worst = worst.max((x.reward - y.reward).abs());
            }
        }
    }
    worst
}

/// `(99.9th percentile of |offset|, lag-1 autocorrelation over 1000 steps)`.
pub fn jitter_stats(steps: usize, seed: u64) -> (f64, f64) {
    let cfg = JitterConfig::default();
    let mut rng = seeded(seed, 3);
    let mut s = JitterState::at_rest(1);
    let mut xs = Vec::with_capacity(steps);
    for _ in 0..steps {
        s.advance(&cfg, &mut rng);
        xs.push(s.position[0]);
    }
    let mut mags: Vec<f64> = xs.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let p999 = mags[((steps as f64) * 0.999) as usize];

    let w = &xs[xs.len() - 1000..];
    let m = w.iter().sum::<f64>() / w.len() as f64;
    let var: f64 = w.iter().map(|v| (v - m).powi(2)).sum();
    let cov: f64 = w.windows(2).map(|p| (p[0] - m) * (p[1] - m)).sum();
    (p999, cov / var)
}

/// Largest `|Q^T obs - jitter - concat(labels)|` over an episode.
pub fn unmix_worst(seed: u64) -> f64 {
    let mut env = oracle_env(EnvVariant::Full, Mixing::RandomOrthogonal, 60, 2);
    let mut worst: f64 = 0.0;
    for s in rollout(&mut env, seed, &random_actions(30, seed)) {
        let raw = env.unmix(&s.observation);
        let jitter = s.info.jitter_offset.clone().unwrap();
        for ((r, j), l) in raw.iter().zip(&jitter).zip(s.info.labels.concat()) {
            worst = worst.max((r - j - l).abs());
        }
    }
    worst
}

// ------------------------------------------------------------- world model

pub const OBS: usize = 6;
pub const ACT: usize = 2;

pub fn small_model_config(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        variant,
        x: FactorSize::new(8, 3),
        y: FactorSize::new(6, 2),
        z: FactorSize::new(5, 2),
        monolithic: FactorSize::new(10, 4),
        hidden_width: 24,
        embed_dim: 12,
        ..ModelConfig::default()
    }
}

/// Random-content segment (observations, actions, rewards all Gaussian).
pub fn random_segment(len: usize, batch: usize, seed: u64) -> SegmentBatch {
    let mut rng = seeded(seed, 1);
    let eps: Vec<Episode> = (0..batch)
        .map(|_| {
            let mut e = Episode::new(OBS, ACT, 0);
            for _ in 0..len {
                let o = Tensor::randn([OBS], &mut rng);
                let a = Tensor::uniform([ACT], -1.0, 1.0, &mut rng);
                e.push(o.data(), a.data(), rng.sample(StandardNormal), &[]);
            }
            e
        })
        .collect();
    let refs: Vec<&Episode> = eps.iter().collect();
    let windows: Vec<(usize, usize)> = (0..batch).map(|b| (b, 0)).collect();
    SegmentBatch::from_windows(&refs, &windows, len).unwrap()
}

/// Smooth structured segment: each sequence is a phase-shifted set of
/// sinusoids with amplitude 3, reward is the first coordinate.
pub fn sinusoid_segment(len: usize, batch: usize, seed: u64) -> SegmentBatch {
    let mut rng = seeded(seed, 2);
    let eps: Vec<Episode> = (0..batch)
        .map(|_| {
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            let mut e = Episode::new(OBS, ACT, 0);
            for t in 0..len {
                let o: Vec<f64> = (0..OBS)
                    .map(|k| 3.0 * (0.3 * t as f64 * (1.0 + 0.2 * k as f64) + phase + k as f64).sin())
                    .collect();
                let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                e.push(&o, &a, o[0], &[]);
            }
            e
        })
        .collect();
    let refs: Vec<&Episode> = eps.iter().collect();
    let windows: Vec<(usize, usize)> = (0..batch).map(|b| (b, 0)).collect();
    SegmentBatch::from_windows(&refs, &windows, len).unwrap()
}

/// Largest relative gap between the loss at unit weights and an
/// independently computed negative ELBO, over every model variant, plus
/// the largest gap between `total` and its recomputation from components.
pub fn elbo_identity_worst() -> (f64, f64) {
    let (mut elbo_gap, mut combine_gap): (f64, f64) = (0.0, 0.0);
    for variant in ModelVariant::ALL {
        let mut cfg = small_model_config(variant);
        cfg.alpha = 1.0;
        cfg.beta = 1.0;
        cfg.free_nats = 0.0;
        let m = WorldModel::new(cfg, OBS, ACT, 3).unwrap();
        let seg = random_segment(5, 3, 4);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let mut rng = seeded(2, 0);
        let (obs, out) = m.loss(&tape, &p, &seg, &mut Sampling::Random(&mut rng)).unwrap();

        let batch = seg.batch_size() as f64;
        let (mut nll, mut kl_x, mut kl_rest) = (0.0, 0.0, 0.0);
        for t in 0..seg.len() {
            let d = m.decode(&tape, &p, &obs.posteriors[t]).unwrap();
            let (om, os) = (d.obs.mean.value(), d.obs.std.value());
            let (rxm, rxs) = (d.reward_x.mean.value(), d.reward_x.std.value());
            let ry = d.reward_y.map(|r| (r.mean.value(), r.std.value()));
            for b in 0..seg.batch_size() {
                for j in 0..OBS {
                    nll -= normal_logpdf(seg.obs[t].row(b)[j], om.row(b)[j], os.row(b)[j]);
                }
                // composed reward of independent Gaussians
                let (mut rm, mut rv) = (rxm.row(b)[0], rxs.row(b)[0].powi(2));
                if let Some((m2, s2)) = &ry {
                    rm += m2.row(b)[0];
                    rv += s2.row(b)[0].powi(2);
                }
                nll -= normal_logpdf(seg.rewards[t].row(b)[0], rm, rv.sqrt());
            }
            for (l, pr) in obs.posteriors[t].factors.iter().zip(&obs.priors[t]) {
                let (mq, sq) = (l.dist.mean.value(), l.dist.std.value());
                let (mp, sp) = (pr.mean.value(), pr.std.value());
                let s: f64 = (0..mq.numel())
                    .map(|i| normal_kl(mq.data()[i], sq.data()[i], mp.data()[i], sp.data()[i]))
                    .sum();
                if l.factor == m.control_factor() {
                    kl_x += s;
                } else {
                    kl_rest += s;
                }
            }
        }
        let b = &out.breakdown;
        let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(1.0);
        for (got, want) in [
            (b.recon, nll / batch),
            (b.kl_x, kl_x / batch),
            (b.kl_y + b.kl_z, kl_rest / batch),
            (b.total, (nll + kl_x + kl_rest) / batch),
        ] {
            elbo_gap = elbo_gap.max(rel(got, want));
        }
        combine_gap = combine_gap.max((b.recompute_total() - b.total).abs());
    }

    // weighted totals at other (alpha, beta)
    for (alpha, beta) in [(2.0, 0.25), (0.5, 0.125), (3.0, 1.0)] {
        let mut cfg = small_model_config(ModelVariant::Xyz);
        cfg.alpha = alpha;
        cfg.beta = beta;
        cfg.free_nats = 0.0;
        let m = WorldModel::new(cfg, OBS, ACT, 5).unwrap();
        let seg = random_segment(4, 2, 6);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let (_, out) = m.loss(&tape, &p, &seg, &mut Sampling::Mean).unwrap();
        let b = out.breakdown;
        let expect = b.recon + alpha * b.kl_x + alpha * beta * (b.kl_y + b.kl_z);
        combine_gap = combine_gap.max((b.total - expect).abs() / expect.abs().max(1.0));
    }
    (elbo_gap, combine_gap)
}

/// `(per-step KL_x, gradient norm of the clamped KL_x term)` with 3 free nats.
pub fn free_nats_gradient() -> (f64, f64) {
    let mut cfg = small_model_config(ModelVariant::Xy);
    cfg.free_nats = 3.0;
    let m = WorldModel::new(cfg, OBS, ACT, 8).unwrap();
    let seg = random_segment(6, 3, 9);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let (_, out) = m.loss(&tape, &p, &seg, &mut Sampling::Mean).unwrap();
    let per_step = out.breakdown.kl_x / seg.len() as f64;
    let g = tape.backward(out.terms.kl_x_effective).unwrap();
    let mut store = m.store.clone();
    store.zero_grad();
    store.accumulate(&p, &g);
    store.fill_missing_grads();
    (per_step, store.grad_norm())
}

/// `(initial total, total after `steps` Adam updates)` on a fixed dataset.
pub fn loss_after_training(steps: usize) -> (f64, f64) {
    let mut cfg = small_model_config(ModelVariant::Xy);
    cfg.learning_rate = 3e-3;
    let mut m = WorldModel::new(cfg, OBS, ACT, 12).unwrap();
    let seg = sinusoid_segment(12, 8, 13);
    let mut rng = seeded(14, 0);
    let adam = Adam::new(3e-3);
    let mut first = None;
    let mut last = f64::NAN;
    for _ in 0..steps {
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let (_, out) = m.loss(&tape, &p, &seg, &mut Sampling::Random(&mut rng)).unwrap();
        first.get_or_insert(out.breakdown.total);
        last = out.breakdown.total;
        let g = tape.backward(out.terms.total).unwrap();
        m.store.zero_grad();
        m.store.accumulate(&p, &g);
        m.store.fill_missing_grads();
        clip_grad_norm(&mut m.store, 100.0).unwrap();
        adam.step(&mut m.store).unwrap();
    }
    (first.unwrap(), last)
}

// ------------------------------------------------------- structural wiring

fn random_snapshot(m: &WorldModel, batch: usize, seed: u64) -> LatentSnapshot {
    let mut rng = seeded(seed, 0);
    let factors = m.variant().factors();
    LatentSnapshot {
        variant: m.variant(),
        deter: factors
            .iter()
            .map(|&f| Tensor::randn([batch, m.config().size(f).deter], &mut rng))
            .collect(),
        stoch: factors
            .iter()
            .map(|&f| Tensor::randn([batch, m.config().size(f).stoch], &mut rng))
            .collect(),
    }
}

fn perturb(s: &LatentSnapshot, which: &[Factor]) -> LatentSnapshot {
    let mut s = s.clone();
    for &f in which {
        if let Some(i) = s.factor_index(f) {
            s.deter[i] = s.deter[i].map(|v| 0.5 - 2.0 * v);
            s.stoch[i] = s.stoch[i].map(|v| v + 3.0);
        }
    }
    s
}

/// Results of the masking checks; every entry is an exact comparison.
#[derive(Debug)]
pub struct WiringReport {
    /// y prior identical under two different actions (XY and XYZ).
    pub y_prior_action_free: bool,
    /// Largest |d KL_y / d action| over a filtered segment.
    pub kl_y_action_grad: f64,
    /// r_x mean identical when y and z are perturbed.
    pub reward_x_yz_free: bool,
    /// Largest |d r_x / d (y, z stoch)|.
    pub reward_x_yz_grad: f64,
    /// Largest |d x prior / d (y, z)|.
    pub x_prior_yz_grad: f64,
    /// Policy actions identical when y and z are perturbed.
    pub policy_yz_free: bool,
}

pub fn wiring_report() -> WiringReport {
    let mut y_prior_action_free = true;
    let mut kl_y_action_grad: f64 = 0.0;
    let mut reward_x_yz_free = true;
    let mut reward_x_yz_grad: f64 = 0.0;
    let mut x_prior_yz_grad: f64 = 0.0;
    let mut policy_yz_free = true;
    let max_abs = |t: Option<&Tensor>| t.map_or(0.0, |t| t.data().iter().fold(0.0_f64, |a, v| a.max(v.abs())));

    for variant in [ModelVariant::Xy, ModelVariant::Xyz, ModelVariant::XyzModifiedZPrior] {
        let m = WorldModel::new(small_model_config(variant), OBS, ACT, 21).unwrap();
        let snap = random_snapshot(&m, 4, 22);
        let yi = snap.factor_index(Factor::Y).unwrap();

        // y prior vs action
        let tape = Tape::new();
        let p = m.store.bind_frozen(&tape);
        let prev = snap.to_state(&tape);
        let a1 = tape.constant(Tensor::full([4, ACT], 0.7));
        let a2 = tape.constant(Tensor::full([4, ACT], -0.4));
        let s1 = m.prior_step(&tape, &p, &prev, a1, &mut Sampling::Mean).unwrap();
        let s2 = m.prior_step(&tape, &p, &prev, a2, &mut Sampling::Mean).unwrap();
        let (d1, d2) = (&s1.factors[yi], &s2.factors[yi]);
        y_prior_action_free &= d1.deter.value().data() == d2.deter.value().data()
            && d1.dist.mean.value().data() == d2.dist.mean.value().data()
            && d1.dist.std.value().data() == d2.dist.std.value().data();
        // x must respond, or the comparison above is vacuous
        assert_ne!(s1.factors[0].deter.value().data(), s2.factors[0].deter.value().data());

        // d KL_y / d a_t for one filtering step from a fixed state
        let tape = Tape::new();
        let p = m.store.bind_frozen(&tape);
        let prev = snap.to_state(&tape);
        let a = tape.variable(Tensor::full([4, ACT], 0.3));
        let o = tape.constant(Tensor::full([4, OBS], -0.5));
        let (post, priors) = m.observe_step(&tape, &p, &prev, o, a, &mut Sampling::Mean).unwrap();
        // only the prior side: the y posterior legitimately reads h_x
        let k = kl(&post.factors[yi].dist.detach(), &priors[yi]).unwrap().sum();
        let g = tape.backward(k).unwrap();
        kl_y_action_grad = kl_y_action_grad.max(max_abs(g.get(a)));

        // r_x vs y, z
        let tape = Tape::new();
        let p = m.store.bind_frozen(&tape);
        let others: Vec<Factor> = variant.factors().iter().copied().filter(|&f| f != Factor::X).collect();
        let d0 = m.decode(&tape, &p, &snap.to_state(&tape)).unwrap();
        let d1 = m.decode(&tape, &p, &perturb(&snap, &others).to_state(&tape)).unwrap();
        reward_x_yz_free &= d0.reward_x.mean.value().data() == d1.reward_x.mean.value().data();

        let mut state = snap.to_state(&tape);
        let mut leaves = Vec::new();
        for l in state.factors.iter_mut().filter(|l| l.factor != Factor::X) {
            l.stoch = tape.variable((*l.stoch.value()).clone());
            l.deter = tape.variable((*l.deter.value()).clone());
            leaves.push(l.stoch);
            leaves.push(l.deter);
        }
        let d = m.decode(&tape, &p, &state).unwrap();
        let x_prior = m
            .prior_step(&tape, &p, &state, tape.constant(Tensor::full([4, ACT], 0.2)), &mut Sampling::Mean)
            .unwrap();
        let xd = &x_prior.factors[0].dist;
        let obj = d
            .reward_x
            .mean
            .sum()
            .add(xd.mean.sum().add(xd.std.sum()).unwrap().scale(1e-3))
            .unwrap();
        let g = tape.backward(obj).unwrap();
        for v in &leaves {
            let e = max_abs(g.get(*v));
            reward_x_yz_grad = reward_x_yz_grad.max(e);
            x_prior_yz_grad = x_prior_yz_grad.max(e);
        }

        // policy reads only x features
        let pcfg = PolicyConfig {
            hidden_width: 16,
            ..PolicyConfig::default()
        };
        for algo in [Algo::DynamicsBackprop, Algo::LatentSac] {
            let agent = Agent::new(
                &PolicyConfig { algo, ..pcfg.clone() },
                m.feature_dim(Factor::X),
                ACT,
                24,
            )
            .unwrap();
            let f0 = snap.features(Factor::X).unwrap();
            let f1 = perturb(&snap, &others).features(Factor::X).unwrap();
            for mode in [ActMode::Eval, ActMode::Explore] {
                let a0 = agent.act(&f0, mode, &mut seeded(25, 0)).unwrap();
                let a1 = agent.act(&f1, mode, &mut seeded(25, 0)).unwrap();
                policy_yz_free &= a0.data() == a1.data();
            }
        }
    }
    WiringReport {
        y_prior_action_free,
        kl_y_action_grad,
        reward_x_yz_free,
        reward_x_yz_grad,
        x_prior_yz_grad,
        policy_yz_free,
    }
}

// ----------------------------------------------------------------- trainer

/// A run small enough to train in about a second.
pub fn tiny_run(algo: Algo, seed: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.seed = seed;
    run.env = EnvConfig {
        variant: EnvVariant::BackgroundSensor,
        episode_cap: 20,
        ctrl_irrelevant_dim: 2,
        unctrl_irrelevant_dim: 3,
        ..EnvConfig::default()
    };
    run.model.hidden_width = 16;
    run.model.embed_dim = 16;
    run.model.x = FactorSize::new(8, 4);
    run.model.y = FactorSize::new(8, 4);
    run.policy.algo = algo;
    run.policy.hidden_width = 16;
    run.policy.horizon = 4;
    run.policy.sac.batch_size = 16;
    run.train = TrainConfig {
        total_env_steps: 400,
        prefill_episodes: 2,
        train_steps_per_episode: 6,
        batch_size: 3,
        segment_length: 5,
        buffer_capacity_steps: 10_000,
        checkpoint_every_episodes: 3,
        eval_every_episodes: 4,
        eval_episodes: 1,
    };
    run
}

fn metric_values(t: &Trainer) -> Vec<BTreeMap<String, f64>> {
    t.metrics().iter().map(|r| r.values.clone()).collect()
}

/// Outcomes of the determinism and persistence checks.
#[derive(Debug)]
pub struct PersistenceReport {
    /// Two runs with the same seed agree on the first 100 update steps.
    pub same_seed_first_100: bool,
    /// The checks above cover at least 100 update steps.
    pub update_steps: u64,
    /// A different seed changes the metrics.
    pub other_seed_differs: bool,
    /// Every parameter store survives a checkpoint round trip bitwise.
    pub checkpoint_bitwise: bool,
    /// The resumed run's metrics log has non-decreasing steps and wall time.
    pub resumed_monotonic: bool,
    /// Resuming half way gives the uninterrupted run's parameters and metrics.
    pub resumed_matches_whole: bool,
    /// Training again from the written config.toml reproduces the metrics.
    pub config_file_reproduces: bool,
}

pub fn persistence_report(dir: &Path) -> PersistenceReport {
    let first_100 = |t: &Trainer| -> Vec<BTreeMap<String, f64>> {
        t.metrics()
            .iter()
            .filter(|r| r.step <= 100)
            .map(|r| r.values.clone())
            .collect()
    };
    let mut a = Trainer::new(tiny_run(Algo::DynamicsBackprop, 3), Some(&dir.join("a"))).unwrap();
    let mut b = Trainer::new(tiny_run(Algo::DynamicsBackprop, 3), None).unwrap();
    let mut c = Trainer::new(tiny_run(Algo::DynamicsBackprop, 4), None).unwrap();
    let sa = a.run().unwrap();
    b.run().unwrap();
    c.run().unwrap();
    let same_seed_first_100 = first_100(&a) == first_100(&b);
    let other_seed_differs = first_100(&a) != first_100(&c);

    let final_dir = sa.final_checkpoint.unwrap();
    let loaded = load_checkpoint(&final_dir).unwrap();
    let mut checkpoint_bitwise = loaded.model.store.values_bitwise_eq(&a.model.store);
    for ((na, x), (nb, y)) in loaded.agent.stores().into_iter().zip(a.agent.stores()) {
        checkpoint_bitwise &= na == nb && x.values_bitwise_eq(y) && x.adam_step() == y.adam_step();
    }

    let mut half_cfg = tiny_run(Algo::DynamicsBackprop, 3);
    half_cfg.train.total_env_steps /= 2;
    let mut half = Trainer::new(half_cfg, Some(&dir.join("half"))).unwrap();
    let sh = half.run().unwrap();
    let mut rest = Trainer::resume(&sh.final_checkpoint.unwrap(), None).unwrap();
    rest.train_config_mut().total_env_steps = tiny_run(Algo::DynamicsBackprop, 3).train.total_env_steps;
    rest.run().unwrap();
    let records = read_metrics(dir.join("half").join("metrics.jsonl")).unwrap();
    let resumed_monotonic = records
        .windows(2)
        .all(|w| w[0].step <= w[1].step && w[0].wall_time <= w[1].wall_time);
    let logged: Vec<_> = records.iter().map(|r| r.values.clone()).collect();
    let resumed_matches_whole = rest.model.store.values_bitwise_eq(&a.model.store) && logged == metric_values(&a);

    let text = std::fs::read_to_string(dir.join("a").join("config.toml")).unwrap();
    let mut again = Trainer::new(RunConfig::from_toml_str(&text).unwrap(), None).unwrap();
    again.run().unwrap();
    let config_file_reproduces = metric_values(&again) == metric_values(&a);

    PersistenceReport {
        same_seed_first_100,
        update_steps: a.state().update_step,
        other_seed_differs,
        checkpoint_bitwise,
        resumed_monotonic,
        resumed_matches_whole,
        config_file_reproduces,
    }
}
