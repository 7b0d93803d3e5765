//! Linear probes from latent factors to ground-truth blocks, factor sweeps
//! and the probe report.

mod report;
mod ridge;
mod sweep;

pub use report::{emit_report, read_report, render_line_chart, render_bar_chart};
pub use ridge::{pearson, r_squared, ridge_fit, RidgeModel};
pub use sweep::{decode_sweep, factor_sweep, FactorSweep, SweepSummary};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::env::{Block, Env, EnvConfig, SIGNAL_DIM};
use crate::error::{Error, Result};
use crate::policy::{ActMode, Agent};
use crate::replay::Episode;
use crate::rng::seeded;
use crate::tensor::{Tape, Tensor};
use crate::trainer::{derive_seed, mean_std, run_episode, Controller, EpisodeRecord, MetricsRecord};
use crate::world_model::{Factor, LatentSnapshot, Sampling, WorldModel};

const SEED_TAG_POLICY: u64 = 200;
const SEED_TAG_RANDOM: u64 = 201;
const SEED_TAG_EVAL: u64 = 2;
const STREAM_PROBE: u64 = 20;
const STREAM_EVAL: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Episodes collected with the trained policy (exploration noise on).
    pub policy_episodes: usize,
    pub random_episodes: usize,
    pub ridge: f64,
    /// Share of each episode group held out for scoring.
    pub test_fraction: f64,
    pub eval_episodes: usize,
    /// Seed of the probe dataset; the report is a function of it and the
    /// checkpoint.
    pub seed: u64,
    /// Refuse to fit on fewer paired samples.
    pub min_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            policy_episodes: 100,
            random_episodes: 100,
            ridge: 1e-4,
            test_fraction: 0.2,
            eval_episodes: 10,
            seed: 0,
            min_samples: 1000,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!(
                "probe.test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::config("probe.ridge must be non-negative"));
        }
        if self.policy_episodes + self.random_episodes < 2 {
            return Err(Error::config("probe needs at least 2 episodes"));
        }
        Ok(())
    }
}

/// Column ranges of each present block inside the concatenated labels.
pub fn block_layout(env: &EnvConfig) -> Vec<(Block, Range<usize>)> {
    let v = env.variant;
    let dims = [
        (Block::Signal, SIGNAL_DIM, true),
        (Block::CtrlIrrelevant, env.ctrl_irrelevant_dim, v.has_ctrl_irrelevant()),
        (Block::UnctrlRelevant, 1, v.has_unctrl_relevant()),
        (Block::UnctrlIrrelevant, env.unctrl_irrelevant_dim, v.has_unctrl_irrelevant()),
    ];
    let mut out = Vec::new();
    let mut off = 0;
    for (b, d, present) in dims {
        if present {
            out.push((b, off..off + d));
            off += d;
        }
    }
    out
}

/// Posterior means along each episode; episodes are batched by length.
pub fn encode_episodes(model: &WorldModel, episodes: &[&Episode]) -> Result<Vec<Vec<LatentSnapshot>>> {
    let mut out: Vec<Option<Vec<LatentSnapshot>>> = vec![None; episodes.len()];
    let mut lengths: Vec<usize> = episodes.iter().map(|e| e.len()).collect();
    lengths.sort_unstable();
    lengths.dedup();
    for len in lengths {
        let group: Vec<usize> = (0..episodes.len()).filter(|&i| episodes[i].len() == len).collect();
        let b = group.len();
        let mut state = model.initial_snapshot(b);
        let mut per_step = Vec::with_capacity(len);
        for t in 0..len {
            let tape = Tape::new();
            let p = model.store.bind_frozen(&tape);
            let obs: Vec<&[f64]> = group.iter().map(|&i| episodes[i].obs_at(t)).collect();
            let act: Vec<&[f64]> = group.iter().map(|&i| episodes[i].action_at(t)).collect();
            let o = tape.constant(Tensor::from_rows(&obs)?);
            let a = tape.constant(Tensor::from_rows(&act)?);
            let prev = state.to_state(&tape);
            let post = model.posterior_step(&tape, &p, &prev, o, a, &mut Sampling::Mean)?;
            if !post.is_finite() {
                return Err(Error::Numerical {
                    step: t,
                    detail: "non-finite latent while encoding probe episodes".into(),
                    last_checkpoint: None,
                });
            }
            state = post.snapshot();
            per_step.push(state.clone());
        }
        for (row, &i) in group.iter().enumerate() {
            out[i] = Some(per_step.iter().map(|s| s.select_rows(&[row])).collect::<Result<_>>()?);
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every episode encoded")).collect())
}

/// Encoded episodes with ground truth, split by episode into train and test.
pub struct ProbeDataset {
    pub records: Vec<EpisodeRecord>,
    /// Per episode, per step, batch of one.
    pub latents: Vec<Vec<LatentSnapshot>>,
    pub is_test: Vec<bool>,
    pub layout: Vec<(Block, Range<usize>)>,
}

/// Held-out score of one factor/block pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub factor: Factor,
    pub block: Block,
    /// `None` when the held-out labels have no variance.
    pub r2: Option<f64>,
}

impl ProbeDataset {
    /// Policy episodes (when an agent is given) plus random episodes.
    pub fn collect(env_cfg: &EnvConfig, model: &WorldModel, agent: Option<&Agent>, cfg: &ProbeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut env = Env::new(env_cfg.clone())?;
        let mut rng = seeded(cfg.seed, STREAM_PROBE);
        let mut groups: Vec<Vec<EpisodeRecord>> = Vec::new();
        if let Some(agent) = agent {
            let controller = Controller::Agent {
                model: Some(model),
                agent,
                mode: ActMode::Explore,
            };
            let mut g = Vec::with_capacity(cfg.policy_episodes);
            for i in 0..cfg.policy_episodes {
                let seed = derive_seed(cfg.seed, SEED_TAG_POLICY, i as u64);
                let mut rec = run_episode(&mut env, controller, seed, &mut rng)?;
                rec.latents = None;
                g.push(rec);
            }
            groups.push(g);
        }
        let mut g = Vec::with_capacity(cfg.random_episodes);
        for i in 0..cfg.random_episodes {
            let seed = derive_seed(cfg.seed, SEED_TAG_RANDOM, i as u64);
            g.push(run_episode(&mut env, Controller::Random, seed, &mut rng)?);
        }
        groups.push(g);
        Self::from_groups(model, groups, cfg.test_fraction, block_layout(env_cfg))
    }

    /// The last `ceil(test_fraction * n)` episodes of each group are held out.
    pub fn from_groups(
        model: &WorldModel,
        groups: Vec<Vec<EpisodeRecord>>,
        test_fraction: f64,
        layout: Vec<(Block, Range<usize>)>,
    ) -> Result<Self> {
        let mut records = Vec::new();
        let mut is_test = Vec::new();
        for g in groups {
            let n = g.len();
            let n_test = if n < 2 { 0 } else { ((n as f64 * test_fraction).ceil() as usize).clamp(1, n - 1) };
            for (i, r) in g.into_iter().enumerate() {
                is_test.push(i >= n - n_test);
                records.push(r);
            }
        }
        let eps: Vec<&Episode> = records.iter().map(|r| &r.episode).collect();
        let latents = encode_episodes(model, &eps)?;
        Ok(Self {
            records,
            latents,
            is_test,
            layout,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.records.iter().map(|r| r.episode.len()).sum()
    }

    pub fn num_test_samples(&self) -> usize {
        self.records
            .iter()
            .zip(&self.is_test)
            .filter(|(_, t)| **t)
            .map(|(r, _)| r.episode.len())
            .sum()
    }

    pub fn block_range(&self, block: Block) -> Option<Range<usize>> {
        self.layout.iter().find(|(b, _)| *b == block).map(|(_, r)| r.clone())
    }

    fn rows<F: Fn(usize, usize) -> Vec<f64>>(&self, test: bool, f: F) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (e, rec) in self.records.iter().enumerate() {
            if self.is_test[e] == test {
                out.extend((0..rec.episode.len()).map(|t| f(e, t)));
            }
        }
        out
    }

    /// Feature rows of one factor.
    pub fn factor_rows(&self, factor: Factor, test: bool) -> Result<Vec<Vec<f64>>> {
        if self.latents.first().and_then(|l| l.first()).and_then(|s| s.factor_index(factor)).is_none() {
            return Err(Error::config(format!("model has no factor {}", factor.name())));
        }
        Ok(self.rows(test, |e, t| self.latents[e][t].features(factor).expect("factor").into_data()))
    }

    pub fn block_rows(&self, block: Block, test: bool) -> Result<Vec<Vec<f64>>> {
        let range = self
            .block_range(block)
            .ok_or_else(|| Error::config(format!("environment has no {} block", block.name())))?;
        Ok(self.rows(test, |e, t| self.records[e].episode.labels_at(t)[range.clone()].to_vec()))
    }

    /// Ridge probe from `factor` to `block`, scored on held-out episodes.
    pub fn probe(&self, factor: Factor, block: Block, ridge: f64, min_samples: usize) -> Result<ProbeEntry> {
        let n = self.num_samples();
        if n < min_samples {
            return Err(Error::NotReady(format!("{n} probe samples, need at least {min_samples}")));
        }
        let r2 = fit_probe(
            &self.factor_rows(factor, false)?,
            &self.block_rows(block, false)?,
            &self.factor_rows(factor, true)?,
            &self.block_rows(block, true)?,
            ridge,
        )?;
        Ok(ProbeEntry { factor, block, r2 })
    }
}

/// Fits on the train split and returns held-out `R^2`.
pub fn fit_probe(
    train_x: &[Vec<f64>],
    train_y: &[Vec<f64>],
    test_x: &[Vec<f64>],
    test_y: &[Vec<f64>],
    ridge: f64,
) -> Result<Option<f64>> {
    if test_x.is_empty() || test_x.len() != test_y.len() {
        return Err(Error::NotReady("probe needs a non-empty held-out split".into()));
    }
    let tx: Vec<&[f64]> = train_x.iter().map(Vec::as_slice).collect();
    let ty: Vec<&[f64]> = train_y.iter().map(Vec::as_slice).collect();
    let model = ridge_fit(&tx, &ty, ridge)?;
    let pred: Vec<Vec<f64>> = test_x.iter().map(|x| model.predict(x)).collect();
    let truth: Vec<&[f64]> = test_y.iter().map(Vec::as_slice).collect();
    Ok(r_squared(&pred, &truth))
}

/// `R^2(signal) - R^2(distractor)`; `None` if either is undefined.
pub fn denoising_score(r2_signal: Option<f64>, r2_distractor: Option<f64>) -> Option<f64> {
    Some(r2_signal? - r2_distractor?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ReturnStats {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&returns);
        Self { returns, mean, std }
    }
}

/// Undiscounted returns over `episodes` fixed evaluation seeds.
pub fn evaluate_controller(env_cfg: &EnvConfig, controller: Controller<'_>, episodes: usize, seed: u64) -> Result<ReturnStats> {
    let mut env = Env::new(env_cfg.clone())?;
    let mut rng = seeded(seed, STREAM_EVAL);
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let s = derive_seed(seed, SEED_TAG_EVAL, i as u64);
        out.push(run_episode(&mut env, controller, s, &mut rng)?.total_return);
    }
    Ok(ReturnStats::from_returns(out))
}

/// Eval-mode returns of a trained agent.
pub fn evaluate_policy(
    env_cfg: &EnvConfig,
    model: Option<&WorldModel>,
    agent: &Agent,
    episodes: usize,
    seed: u64,
) -> Result<ReturnStats> {
    let controller = Controller::Agent {
        model,
        agent,
        mode: ActMode::Eval,
    };
    evaluate_controller(env_cfg, controller, episodes, seed)
}

/// Correlation between the decoded `r_y` mean and the true additive reward
/// noise over held-out steps. `None` for models without a `y` reward head.
pub fn reward_noise_correlation(model: &WorldModel, data: &ProbeDataset) -> Result<Option<f64>> {
    let Some(head) = model.reward_y_head() else {
        return Ok(None);
    };
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (e, rec) in data.records.iter().enumerate() {
        if !data.is_test[e] {
            continue;
        }
        let all = LatentSnapshot::concat(&data.latents[e][1..])?;
        let feats = all.features(Factor::Y).expect("y factor");
        let tape = Tape::new();
        let p = model.store.bind_frozen(&tape);
        let r = head.forward(&p, tape.constant(feats))?;
        pred.extend_from_slice(r.value().data());
        truth.extend_from_slice(&rec.reward_noise[1..]);
    }
    Ok(pearson(&pred, &truth))
}

/// One `(env_steps, value)` point of a training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: f64,
    pub value: f64,
}

/// A named series for the return chart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub metric: String,
    pub points: Vec<CurvePoint>,
}

/// Episode and eval return curves from a metrics log.
pub fn return_curves(records: &[MetricsRecord]) -> Vec<Series> {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for r in records {
        if let (Some(x), Some(y)) = (r.get("episode/env_steps"), r.get("episode/return")) {
            train.push(CurvePoint { env_steps: x, value: y });
        }
        if let (Some(x), Some(y)) = (r.get("eval/env_steps"), r.get("eval/return_mean")) {
            eval.push(CurvePoint { env_steps: x, value: y });
        }
    }
    vec![
        Series {
            metric: "episode/return".into(),
            points: train,
        },
        Series {
            metric: "eval/return_mean".into(),
            points: eval,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub env_variant: String,
    pub model_variant: String,
    pub algo: String,
    pub dataset_seed: u64,
    pub samples: usize,
    pub test_samples: usize,
    pub probes: Vec<ProbeEntry>,
    /// For the control factor against the reward-irrelevant background.
    pub denoising_score: Option<f64>,
    pub eval: ReturnStats,
    pub sweeps: Vec<SweepSummary>,
    pub reward_noise_correlation: Option<f64>,
    pub curves: Vec<Series>,
}

impl ProbeReport {
    pub fn r2(&self, factor: Factor, block: Block) -> Option<f64> {
        self.probes
            .iter()
            .find(|p| p.factor == factor && p.block == block)
            .and_then(|p| p.r2)
    }
}

/// Collects the probe dataset and scores every factor against every block.
pub fn build_report(
    env_cfg: &EnvConfig,
    model: &WorldModel,
    agent: &Agent,
    cfg: &ProbeConfig,
    metrics: &[MetricsRecord],
) -> Result<ProbeReport> {
    let uses_model = agent.config().features == crate::policy::FeatureSource::Latent;
    let data = ProbeDataset::collect(env_cfg, model, Some(agent), cfg)?;
    let mut probes = Vec::new();
    for &factor in model.variant().factors() {
        for (block, _) in &data.layout {
            probes.push(data.probe(factor, *block, cfg.ridge, cfg.min_samples)?);
        }
    }
    let control = model.control_factor();
    let find = |b: Block| probes.iter().find(|p| p.factor == control && p.block == b).and_then(|p| p.r2);
    let denoising = match data.block_range(Block::UnctrlIrrelevant) {
        Some(_) => denoising_score(find(Block::Signal), find(Block::UnctrlIrrelevant)),
        None => None,
    };
    let eval = evaluate_policy(env_cfg, uses_model.then_some(model), agent, cfg.eval_episodes, cfg.seed)?;
    let sweep_ep = data.is_test.iter().position(|t| *t).unwrap_or(0);
    let lat = &data.latents[sweep_ep];
    let sweeps = factor_sweep(model, lat, lat.len() / 2)?;
    Ok(ProbeReport {
        env_variant: env_cfg.variant.name().to_string(),
        model_variant: model.variant().name().to_string(),
        algo: agent.config().algo.name().to_string(),
        dataset_seed: cfg.seed,
        samples: data.num_samples(),
        test_samples: data.num_test_samples(),
        probes,
        denoising_score: denoising,
        eval,
        sweeps,
        reward_noise_correlation: reward_noise_correlation(model, &data)?,
        curves: return_curves(metrics),
    })
}
