//! Experiment runner for the active-classification stack: training campaigns,
//! paired evaluations across methods, micro-benchmarks and checkpoint
//! inspection.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vantage_core::config::{DynamicsMode, SimConfig};
use vantage_core::env::{Env, TransitionMode, ViewpointAction};
use vantage_core::harness::{
    run_eval, write_eval_rows, write_eval_summary, write_speed_curves, write_traces, EvalConfig,
    MethodSpec, NamedMethod,
};
use vantage_core::policy::{PolicyParams, Pooling};
use vantage_core::ppo::{train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "vantage",
    about = "Active classification of moving targets: simulator, PPO training and evaluation"
)]
struct Cli {
    /// JSON config file; missing fields fall back to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value_t = 4)]
    workers: usize,
    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Attention,
    Deepsets,
    SingleTarget,
    Handcrafted,
}

impl PolicyKind {
    fn name(self) -> &'static str {
        match self {
            PolicyKind::Attention => "attention",
            PolicyKind::Deepsets => "deepsets",
            PolicyKind::SingleTarget => "single-target",
            PolicyKind::Handcrafted => "handcrafted",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with PPO and write metrics plus checkpoints.
    Train {
        #[arg(long, value_enum, default_value = "attention")]
        policy: PolicyKind,
        /// Total environment steps; overrides the config schedule.
        #[arg(long)]
        budget: Option<u64>,
        /// Step at which the fine-tuning phase starts.
        #[arg(long)]
        phase_boundary: Option<u64>,
        /// Target count override, "N" or "LO-HI", applied to both phases.
        #[arg(long)]
        num_targets: Option<String>,
        #[arg(long)]
        dynamics: Option<DynamicsMode>,
        /// Episode timeout override in seconds.
        #[arg(long)]
        timeout: Option<f64>,
        /// Square arena side override in meters.
        #[arg(long)]
        arena: Option<f64>,
    },
    /// Evaluate methods over paired episodes and write rows/summary/traces.
    Eval {
        /// Comma-separated method list.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "handcrafted")]
        policies: Vec<PolicyKind>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long)]
        checkpoint_attention: Option<PathBuf>,
        #[arg(long)]
        checkpoint_deepsets: Option<PathBuf>,
        #[arg(long)]
        checkpoint_single_target: Option<PathBuf>,
        #[arg(long)]
        num_targets: Option<String>,
        #[arg(long)]
        dynamics: Option<DynamicsMode>,
        #[arg(long)]
        timeout: Option<f64>,
        #[arg(long)]
        arena: Option<f64>,
        /// Track viewpoints with the MPC controller instead of teleporting.
        #[arg(long)]
        mpc: bool,
        /// Write per-step episode traces.
        #[arg(long)]
        trace: bool,
        /// Dump per-target (area, skew, p_true) sensor rows.
        #[arg(long)]
        sensor_debug: bool,
        /// Sample actions instead of using the distribution mean.
        #[arg(long)]
        stochastic: bool,
    },
    /// Time the policy forward pass and environment stepping.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 10, 30, 40])]
        targets: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        iters: usize,
    },
    /// Print checkpoint header fields and per-tensor statistics.
    InspectCheckpoint { path: PathBuf },
}

fn parse_target_range(text: &str) -> Result<(usize, usize)> {
    if let Some((lo, hi)) = text.split_once('-') {
        let lo: usize = lo.trim().parse().context("bad lower target count")?;
        let hi: usize = hi.trim().parse().context("bad upper target count")?;
        if lo == 0 || hi < lo {
            bail!("invalid target range {text}");
        }
        Ok((lo, hi))
    } else {
        let n: usize = text.trim().parse().context("bad target count")?;
        if n == 0 {
            bail!("target count must be positive");
        }
        Ok((n, n))
    }
}

fn load_sim(cli: &Cli) -> Result<SimConfig> {
    match &cli.config {
        Some(path) => SimConfig::load(path)
            .with_context(|| format!("loading config {}", path.display())),
        None => Ok(SimConfig::default()),
    }
}

fn apply_overrides(
    sim: &mut SimConfig,
    num_targets: &Option<String>,
    dynamics: Option<DynamicsMode>,
    timeout: Option<f64>,
    arena: Option<f64>,
) -> Result<()> {
    if let Some(text) = num_targets {
        let range = parse_target_range(text)?;
        sim.episode.num_targets = range;
        sim.training.phase1_targets = range;
        sim.training.phase2_targets = range;
    }
    if let Some(d) = dynamics {
        sim.episode.dynamics = d;
    }
    if let Some(t) = timeout {
        sim.episode.timeout = t;
    }
    if let Some(side) = arena {
        sim.world.arena_width = side;
        sim.world.arena_height = side;
    }
    sim.world.validate()?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train {
            policy,
            budget,
            phase_boundary,
            num_targets,
            dynamics,
            timeout,
            arena,
        } => cmd_train(
            &cli,
            *policy,
            *budget,
            *phase_boundary,
            num_targets,
            *dynamics,
            *timeout,
            *arena,
        ),
        Command::Eval {
            policies,
            episodes,
            checkpoint_attention,
            checkpoint_deepsets,
            checkpoint_single_target,
            num_targets,
            dynamics,
            timeout,
            arena,
            mpc,
            trace,
            sensor_debug,
            stochastic,
        } => cmd_eval(
            &cli,
            policies,
            *episodes,
            checkpoint_attention,
            checkpoint_deepsets,
            checkpoint_single_target,
            num_targets,
            *dynamics,
            *timeout,
            *arena,
            *mpc,
            *trace,
            *sensor_debug,
            *stochastic,
        ),
        Command::Bench { targets, iters } => cmd_bench(&cli, targets, *iters),
        Command::InspectCheckpoint { path } => cmd_inspect(path),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cli: &Cli,
    policy: PolicyKind,
    budget: Option<u64>,
    phase_boundary: Option<u64>,
    num_targets: &Option<String>,
    dynamics: Option<DynamicsMode>,
    timeout: Option<f64>,
    arena: Option<f64>,
) -> Result<()> {
    let mut sim = load_sim(cli)?;
    apply_overrides(&mut sim, num_targets, dynamics, timeout, arena)?;
    if let Some(b) = budget {
        sim.training.budget = b;
    }
    if let Some(pb) = phase_boundary {
        sim.training.phase_boundary = Some(pb);
    }
    let pooling = match policy {
        PolicyKind::Attention => Pooling::Attention,
        PolicyKind::Deepsets => Pooling::Mean,
        PolicyKind::SingleTarget => {
            sim.training.phase1_targets = (1, 1);
            sim.training.phase2_targets = (1, 1);
            Pooling::Attention
        }
        PolicyKind::Handcrafted => bail!("the hand-crafted policy has nothing to train"),
    };

    let out_dir = cli.out.join(format!("train_{}", policy.name()));
    let mut cfg = TrainConfig::new(sim, pooling, cli.workers, cli.seed);
    cfg.out_dir = Some(out_dir.clone());
    println!(
        "training {} policy: budget {} steps, {} workers, seed {}",
        policy.name(),
        cfg.sim.training.budget,
        cfg.workers,
        cfg.seed
    );
    let start = Instant::now();
    let result = train(&cfg)?;
    let elapsed = start.elapsed();
    let last = result.stats.last();
    println!(
        "done in {:.1?}: {} updates, final mean return {:.2}, artifacts in {}",
        elapsed,
        result.stats.len(),
        last.map(|s| s.mean_return).unwrap_or(f64::NAN),
        out_dir.display()
    );
    if result.aborted_updates > 0 {
        println!("warning: {} update rounds aborted on non-finite loss", result.aborted_updates);
    }
    Ok(())
}

fn load_checkpoint(
    kind: PolicyKind,
    path: &Option<PathBuf>,
    expected: Pooling,
) -> Result<PolicyParams> {
    let path = path.as_ref().with_context(|| {
        format!(
            "method '{}' requires --checkpoint-{} <path>",
            kind.name(),
            kind.name().replace('_', "-")
        )
    })?;
    let params = PolicyParams::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    if params.pooling != expected {
        bail!(
            "checkpoint {} has the wrong pooling kind for method '{}'",
            path.display(),
            kind.name()
        );
    }
    Ok(params)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cli: &Cli,
    policies: &[PolicyKind],
    episodes: usize,
    checkpoint_attention: &Option<PathBuf>,
    checkpoint_deepsets: &Option<PathBuf>,
    checkpoint_single_target: &Option<PathBuf>,
    num_targets: &Option<String>,
    dynamics: Option<DynamicsMode>,
    timeout: Option<f64>,
    arena: Option<f64>,
    mpc: bool,
    trace: bool,
    sensor_debug: bool,
    stochastic: bool,
) -> Result<()> {
    let mut sim = load_sim(cli)?;
    apply_overrides(&mut sim, num_targets, dynamics, timeout, arena)?;

    // Every checkpoint loads before any episode runs.
    let mut methods = Vec::new();
    for kind in policies {
        let spec = match kind {
            PolicyKind::Attention => MethodSpec::Attention(load_checkpoint(
                *kind,
                checkpoint_attention,
                Pooling::Attention,
            )?),
            PolicyKind::Deepsets => MethodSpec::DeepSets(load_checkpoint(
                *kind,
                checkpoint_deepsets,
                Pooling::Mean,
            )?),
            PolicyKind::SingleTarget => MethodSpec::SingleTarget(load_checkpoint(
                *kind,
                checkpoint_single_target,
                Pooling::Attention,
            )?),
            PolicyKind::Handcrafted => MethodSpec::Handcrafted,
        };
        methods.push(NamedMethod::new(kind.name(), spec));
    }

    let mut cfg = EvalConfig::new(sim, episodes, cli.seed);
    cfg.workers = cli.workers;
    cfg.use_mpc = mpc;
    cfg.deterministic_actions = !stochastic;
    cfg.collect_traces = trace;
    cfg.sensor_debug = sensor_debug;

    println!(
        "evaluating {} method(s) over {} paired episodes (seed {}, {})",
        methods.len(),
        episodes,
        cli.seed,
        if mpc { "MPC tracking" } else { "teleport transition" }
    );
    let start = Instant::now();
    let report = run_eval(&methods, &cfg)?;
    std::fs::create_dir_all(&cli.out)?;
    write_eval_rows(&report, &cli.out.join("eval_rows.csv"))?;
    write_eval_summary(&report, &cli.out.join("eval_summary.json"))?;
    write_speed_curves(&report, &cli.out.join("classification_speed.csv"))?;
    if trace || sensor_debug {
        write_traces(&report, &cli.out.join("traces"))?;
    }
    println!("finished in {:.1?}", start.elapsed());
    for s in vantage_core::harness::summarize(&report) {
        println!(
            "{:>14}: {:5.1}% at 75 s, {:5.1}% at timeout, mean return {:8.2}, \
             completion rate {:4.2}, sim-obs(first half) {:.2}",
            s.method,
            s.pct_classified_at_75s_mean,
            s.pct_classified_timeout_mean,
            s.mean_return,
            s.completion_rate,
            s.mean_sim_obs_first_half
        );
    }
    println!("artifacts in {}", cli.out.display());
    Ok(())
}

fn cmd_bench(cli: &Cli, targets: &[usize], iters: usize) -> Result<()> {
    let sim = load_sim(cli)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let params = PolicyParams::init(&sim.policy, Pooling::Attention, &mut rng);
    println!("policy forward pass ({iters} iterations each):");
    for &m in targets {
        let mut env = Env::new(
            sim.world.clone(),
            sim.social_forces.clone(),
            sim.camera.clone(),
            sim.observation.clone(),
            sim.reward.clone(),
            {
                let mut e = sim.episode.clone();
                e.num_targets = (m, m);
                e
            },
            TransitionMode::Teleport,
            cli.seed,
        );
        let obs = env.reset();
        let mut acts = vantage_core::policy::Activations::default();
        let start = Instant::now();
        let mut sink = 0.0;
        for _ in 0..iters {
            sink += params.forward_into(&obs, &mut acts).value;
        }
        let forward_us = start.elapsed().as_secs_f64() * 1e6 / iters as f64;

        let start = Instant::now();
        for _ in 0..iters {
            env.step(&ViewpointAction::default());
        }
        let step_us = start.elapsed().as_secs_f64() * 1e6 / iters as f64;
        println!(
            "  M={m:>3}: forward {forward_us:9.1} us, env step {step_us:9.1} us (checksum {sink:.3e})"
        );
    }
    Ok(())
}

fn cmd_inspect(path: &PathBuf) -> Result<()> {
    let params =
        PolicyParams::load(path).with_context(|| format!("loading {}", path.display()))?;
    println!("checkpoint {}", path.display());
    println!(
        "  pooling: {}",
        match params.pooling {
            Pooling::Attention => "attention",
            Pooling::Mean => "mean",
        }
    );
    println!(
        "  dims: d_in={} d_h={} d_enc={} heads={}",
        params.dims.d_in, params.dims.d_h, params.dims.d_enc, params.dims.heads
    );
    println!(
        "  input_scale={} log_std_clamp=[{}, {}]",
        params.input_scale, params.log_std_min, params.log_std_max
    );
    println!("  parameters: {}", params.num_params());
    println!(
        "  {:<16} {:>8} {:>12} {:>12} {:>12} {:>12}",
        "tensor", "len", "min", "max", "mean", "l2"
    );
    for (name, data) in params.tensors() {
        let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let l2 = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "  {:<16} {:>8} {:>12.5} {:>12.5} {:>12.5} {:>12.5}",
            name,
            data.len(),
            min,
            max,
            mean,
            l2
        );
    }
    Ok(())
}
