//! `dmdp` command line: `train`, `eval`, `probe`, `sweep`, `gen-data` and
//! `presets`.
//!
//! A run config comes from `--config FILE` or `--preset NAME` (or the
//! defaults), then individual flags override single fields. Relative
//! output directories are resolved against `$DMDP_OUTPUT_ROOT` when it is set.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dmdp_core::config::{preset, preset_names, RunConfig};
use dmdp_core::env::{EnvVariant, Mixing};
use dmdp_core::policy::{Algo, FeatureSource};
use dmdp_core::probe::{build_report, emit_report, evaluate_policy};
use dmdp_core::rng::seeded;
use dmdp_core::trainer::{derive_seed, load_checkpoint, read_metrics, run_episode, save_buffer, Controller, Trainer};
use dmdp_core::world_model::ModelVariant;
use dmdp_core::{Error, Result};

pub const OUTPUT_ROOT_VAR: &str = "DMDP_OUTPUT_ROOT";

const SEED_TAG_GEN_DATA: u64 = 300;

#[derive(Debug, Parser)]
#[command(name = "dmdp", version, about = "Train and probe denoised world models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run (or resume one from a checkpoint).
    Train(TrainArgs),
    /// Evaluate a checkpoint's policy.
    Eval(EvalArgs),
    /// Fit linear probes and write the probe report.
    Probe(ProbeArgs),
    /// Train one child run per (beta, seed) pair.
    Sweep(SweepArgs),
    /// Write environment episodes to a buffer archive.
    GenData(GenDataArgs),
    /// List the shipped presets.
    Presets,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BaseArgs {
    /// Run config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Preset name, `<env>/<model>/<algo>`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory of the run.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_env)]
    pub env: Option<EnvVariant>,
    #[arg(long, value_enum)]
    pub mixing: Option<MixingArg>,
    #[arg(long, value_parser = parse_model)]
    pub model: Option<ModelVariant>,
    #[arg(long, value_parser = parse_algo)]
    pub algo: Option<Algo>,
    #[arg(long, value_enum)]
    pub features: Option<FeaturesArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub free_nats: Option<f64>,
    #[arg(long)]
    pub total_env_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub segment_length: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MixingArg {
    Identity,
    RandomOrthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeaturesArg {
    Latent,
    OracleState,
}

fn parse_env(s: &str) -> std::result::Result<EnvVariant, String> {
    EnvVariant::parse(s).ok_or_else(|| {
        let names: Vec<_> = EnvVariant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown environment `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_model(s: &str) -> std::result::Result<ModelVariant, String> {
    ModelVariant::parse(s).ok_or_else(|| {
        let names: Vec<_> = ModelVariant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown model `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_algo(s: &str) -> std::result::Result<Algo, String> {
    Algo::parse(s).ok_or_else(|| format!("unknown algo `{s}` (expected dynamics-backprop or latent-sac)"))
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Continue from this checkpoint directory instead of starting fresh.
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    pub resume: Option<PathBuf>,
    /// Write the probe report after training.
    #[arg(long)]
    pub probe: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Report directory; defaults to `<checkpoint>/probe`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Probe dataset seed.
    #[arg(long)]
    pub probe_seed: Option<u64>,
    #[arg(long)]
    pub policy_episodes: Option<usize>,
    #[arg(long)]
    pub random_episodes: Option<usize>,
    #[arg(long)]
    pub min_samples: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    /// Comma-separated beta values, one child run each.
    #[arg(long, value_delimiter = ',', required = true)]
    pub beta: Vec<f64>,
    /// Comma-separated seeds; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Child processes to run at once; 1 trains in-process.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Write a probe report for every child.
    #[arg(long)]
    pub probe: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerArg {
    Random,
    Zero,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, value_enum, default_value_t = ControllerArg::Random)]
    pub controller: ControllerArg,
    /// Archive to write; defaults to `<output_dir>/episodes.bin`.
    #[arg(long)]
    pub file: Option<PathBuf>,
}

pub fn parse_cli<I, T>(argv: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Format { .. } => 2,
        Error::Numerical { .. } => 3,
        _ => 1,
    }
}

impl BaseArgs {
    /// File or preset (or defaults), then flag overrides, then validation.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut run = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                RunConfig::from_toml_str(&text)?
            }
            (None, Some(name)) => preset(name)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            run.seed = v;
        }
        if let Some(v) = &self.out {
            run.output_dir = v.clone();
        }
        if let Some(v) = self.env {
            run.env.variant = v;
        }
        if let Some(v) = self.mixing {
            run.env.mixing = match v {
                MixingArg::Identity => Mixing::Identity,
                MixingArg::RandomOrthogonal => Mixing::RandomOrthogonal,
            };
        }
        if let Some(v) = self.model {
            run.model.variant = v;
        }
        if let Some(v) = self.algo {
            run.policy.algo = v;
        }
        if let Some(v) = self.features {
            run.policy.features = match v {
                FeaturesArg::Latent => FeatureSource::Latent,
                FeaturesArg::OracleState => FeatureSource::OracleState,
            };
        }
        if let Some(v) = self.alpha {
            run.model.alpha = v;
        }
        if let Some(v) = self.free_nats {
            run.model.free_nats = v;
        }
        if let Some(v) = self.total_env_steps {
            run.train.total_env_steps = v;
        }
        if let Some(v) = self.batch_size {
            run.train.batch_size = v;
        }
        if let Some(v) = self.segment_length {
            run.train.segment_length = v;
        }
        run.validate()?;
        Ok(run)
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut run = self.base.resolve()?;
        if let Some(b) = self.beta {
            run.model.beta = b;
        }
        run.validate()?;
        Ok(run)
    }
}

/// Joins relative paths onto `$DMDP_OUTPUT_ROOT`.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// One config per (beta, seed), each with its own output directory.
pub fn plan_sweep(base: &RunConfig, betas: &[f64], seeds: &[u64]) -> Result<Vec<RunConfig>> {
    if betas.is_empty() {
        return Err(Error::Config("sweep needs at least one beta".into()));
    }
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let mut out = Vec::with_capacity(betas.len() * seeds.len());
    for &beta in betas {
        for &seed in &seeds {
            let mut run = base.clone();
            run.model.beta = beta;
            run.seed = seed;
            run.output_dir = base.output_dir.join(format!("beta-{beta}-seed-{seed}"));
            run.validate()?;
            out.push(run);
        }
    }
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Probe(a) => probe(&a),
        Command::Sweep(a) => sweep(&a),
        Command::GenData(a) => gen_data(&a),
        Command::Presets => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            for name in preset_names() {
                // a closed pipe (`dmdp presets | head`) is not an error
                if writeln!(out, "{name}").is_err() {
                    break;
                }
            }
            Ok(())
        }
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let out = a.base.out.as_deref().map(resolve_output);
            let mut t = Trainer::resume(ckpt, out.as_deref())?;
            if let Some(v) = a.base.total_env_steps {
                t.train_config_mut().total_env_steps = v;
            }
            eprintln!("resuming {} (seed = {})", ckpt.display(), t.config().seed);
            t
        }
        None => {
            let run = a.resolve()?;
            let out = resolve_output(&run.output_dir);
            eprintln!("seed = {}; writing to {}", run.seed, out.display());
            Trainer::new(run, Some(&out))?
        }
    };
    let summary = trainer.run()?;
    println!(
        "{}",
        serde_json::json!({
            "episodes": summary.episodes,
            "env_steps": summary.env_steps,
            "update_steps": summary.update_steps,
            "final_checkpoint": summary.final_checkpoint,
        })
    );
    if a.probe {
        if let Some(ckpt) = summary.final_checkpoint {
            write_probe(&ckpt, &ckpt.join("probe"), |_| {})?;
        }
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let episodes = a.episodes.unwrap_or(ck.run.probe.eval_episodes);
    let seed = a.seed.unwrap_or(ck.run.seed);
    eprintln!("seed = {seed}");
    let model = (ck.agent.config().features == FeatureSource::Latent).then_some(&ck.model);
    let stats = evaluate_policy(&ck.run.env, model, &ck.agent, episodes, seed)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn write_probe(ckpt: &Path, out: &Path, edit: impl FnOnce(&mut dmdp_core::probe::ProbeConfig)) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let mut cfg = ck.run.probe.clone();
    edit(&mut cfg);
    cfg.validate()?;
    eprintln!("probe dataset seed = {}", cfg.seed);
    let metrics_path = ckpt.parent().map(|p| p.join("metrics.jsonl"));
    let metrics = match metrics_path {
        Some(p) if p.exists() => read_metrics(p)?,
        _ => Vec::new(),
    };
    let report = build_report(&ck.run.env, &ck.model, &ck.agent, &cfg, &metrics)?;
    emit_report(out, &report)?;
    println!("{}", out.display());
    Ok(())
}

fn probe(a: &ProbeArgs) -> Result<()> {
    let out = a.out.as_deref().map(resolve_output).unwrap_or_else(|| a.checkpoint.join("probe"));
    write_probe(&a.checkpoint, &out, |cfg| {
        if let Some(v) = a.probe_seed {
            cfg.seed = v;
        }
        if let Some(v) = a.policy_episodes {
            cfg.policy_episodes = v;
        }
        if let Some(v) = a.random_episodes {
            cfg.random_episodes = v;
        }
        if let Some(v) = a.min_samples {
            cfg.min_samples = v;
        }
    })
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let base = a.base.resolve()?;
    let children = plan_sweep(&base, &a.beta, &a.seeds)?;
    if a.jobs <= 1 {
        for run in children {
            let out = resolve_output(&run.output_dir);
            eprintln!("beta = {}, seed = {}: {}", run.model.beta, run.seed, out.display());
            let summary = Trainer::new(run, Some(&out))?.run()?;
            if let (true, Some(ckpt)) = (a.probe, summary.final_checkpoint) {
                write_probe(&ckpt, &ckpt.join("probe"), |_| {})?;
            }
        }
        return Ok(());
    }
    let exe = std::env::current_exe()?;
    let mut pending: Vec<(PathBuf, PathBuf)> = Vec::new();
    for run in &children {
        let out = resolve_output(&run.output_dir);
        std::fs::create_dir_all(&out)?;
        let file = out.join("run.toml");
        let mut resolved = run.clone();
        resolved.output_dir = out.clone();
        std::fs::write(&file, resolved.to_toml_string()?)?;
        pending.push((file, out));
    }
    let mut failures = Vec::new();
    for chunk in pending.chunks(a.jobs) {
        let mut procs = Vec::new();
        for (file, out) in chunk {
            let mut cmd = Process::new(&exe);
            cmd.arg("train").arg("--config").arg(file);
            if a.probe {
                cmd.arg("--probe");
            }
            procs.push((out.clone(), cmd.spawn()?));
        }
        for (out, mut child) in procs {
            let status = child.wait()?;
            if !status.success() {
                failures.push(format!("{} ({status})", out.display()));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::NotReady(format!("child runs failed: {}", failures.join(", "))))
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let run = a.base.resolve()?;
    let file = match &a.file {
        Some(f) => resolve_output(f),
        None => resolve_output(&run.output_dir).join("episodes.bin"),
    };
    if let Some(parent) = file.parent() {
        std::fs::create_dir_all(parent)?;
    }
    eprintln!("seed = {}", run.seed);
    let mut env = dmdp_core::env::Env::new(run.env.clone())?;
    let mut rng = seeded(run.seed, SEED_TAG_GEN_DATA);
    let controller = match a.controller {
        ControllerArg::Random => Controller::Random,
        ControllerArg::Zero => Controller::Zero,
    };
    let mut buffer = dmdp_core::replay::ReplayBuffer::new(1 << 40);
    for i in 0..a.episodes {
        let seed = derive_seed(run.seed, SEED_TAG_GEN_DATA, i as u64);
        buffer.push(run_episode(&mut env, controller, seed, &mut rng)?.episode);
    }
    save_buffer(&file, &buffer)?;
    println!("{}", file.display());
    Ok(())
}
