//! Paired evaluation harness: every method replays the same per-episode
//! seeds, so initial conditions match row for row across methods. Raw rows
//! are kept and aggregates are always recomputed from them.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::baselines::{handcrafted_action, single_target_forward, SequentialPlan};
use crate::config::{DynamicsMode, MpcConfig, SimConfig};
use crate::env::{ActionBounds, Env, TargetObservation, TransitionMode, ViewpointAction};
use crate::policy::{deterministic_action, sample_action, PolicyParams, Pooling};
use crate::seeding::derive_seed;
use crate::sensor::SensorDebugRow;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("method '{0}' needs {1} pooling parameters")]
    PoolingMismatch(String, &'static str),
}

/// A policy under evaluation.
#[derive(Clone)]
pub enum MethodSpec {
    Attention(PolicyParams),
    DeepSets(PolicyParams),
    SingleTarget(PolicyParams),
    Handcrafted,
}

#[derive(Clone)]
pub struct NamedMethod {
    pub name: String,
    pub spec: MethodSpec,
}

impl NamedMethod {
    pub fn new(name: impl Into<String>, spec: MethodSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        match &self.spec {
            MethodSpec::Attention(p) | MethodSpec::SingleTarget(p) => {
                if p.pooling != Pooling::Attention {
                    return Err(EvalError::PoolingMismatch(self.name.clone(), "attention"));
                }
            }
            MethodSpec::DeepSets(p) => {
                if p.pooling != Pooling::Mean {
                    return Err(EvalError::PoolingMismatch(self.name.clone(), "mean"));
                }
            }
            MethodSpec::Handcrafted => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub sim: SimConfig,
    pub episodes: usize,
    pub base_seed: u64,
    pub workers: usize,
    pub use_mpc: bool,
    /// Learned policies act with the squashed mean instead of sampling.
    pub deterministic_actions: bool,
    pub collect_traces: bool,
    pub sensor_debug: bool,
}

impl EvalConfig {
    pub fn new(sim: SimConfig, episodes: usize, base_seed: u64) -> Self {
        Self {
            sim,
            episodes,
            base_seed,
            workers: 1,
            use_mpc: false,
            deterministic_actions: true,
            collect_traces: false,
            sensor_debug: false,
        }
    }
}

/// Per-step trace entry.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub time_s: f64,
    pub drone_x: f64,
    pub drone_y: f64,
    pub drone_z: f64,
    pub drone_yaw: f64,
    pub belief_max: Vec<f64>,
    pub classified: Vec<bool>,
    pub visible: Vec<bool>,
    pub tracking_error: f64,
}

/// One evaluated episode of one method.
#[derive(Debug, Clone)]
pub struct EpisodeRow {
    pub method: String,
    pub episode: usize,
    pub seed: u64,
    pub num_targets: usize,
    pub dynamics: DynamicsMode,
    pub classified_at_75s: usize,
    pub classified_total: usize,
    pub completion_time_s: Option<f64>,
    pub steps: usize,
    pub episode_return: f64,
    pub misclassified: usize,
    /// Per-step count of visible-and-unclassified targets.
    pub sim_obs: Vec<u32>,
    /// Per-step cumulative classified count.
    pub cum_classified: Vec<u32>,
    pub trace: Option<Vec<TraceRow>>,
    pub sensor_rows: Option<Vec<(usize, SensorDebugRow)>>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EpisodeRow>,
    /// Episode horizon in high-level steps shared by every row.
    pub timeout_steps: usize,
    pub tau_h: f64,
}

/// Unclassified targets simultaneously observed this step: visible now and
/// not yet classified entering the step.
pub fn count_simultaneous(visible: &[bool], classified_before: &[bool]) -> u32 {
    visible
        .iter()
        .zip(classified_before)
        .filter(|(v, c)| **v && !**c)
        .count() as u32
}

enum Runner<'a> {
    Attention(&'a PolicyParams),
    DeepSets(&'a PolicyParams),
    SingleTarget(&'a PolicyParams, SequentialPlan),
    Handcrafted(SequentialPlan),
}

impl<'a> Runner<'a> {
    fn new(spec: &'a MethodSpec) -> Self {
        match spec {
            MethodSpec::Attention(p) => Runner::Attention(p),
            MethodSpec::DeepSets(p) => Runner::DeepSets(p),
            MethodSpec::SingleTarget(p) => Runner::SingleTarget(p, SequentialPlan::new()),
            MethodSpec::Handcrafted => Runner::Handcrafted(SequentialPlan::new()),
        }
    }

    fn act(
        &mut self,
        obs: &[TargetObservation],
        bounds: &ActionBounds,
        rng: &mut ChaCha8Rng,
        deterministic: bool,
    ) -> ViewpointAction {
        let net_action = |params: &PolicyParams, obs: &[TargetObservation], rng: &mut ChaCha8Rng| {
            let (out, _) = params.forward(obs);
            if deterministic {
                deterministic_action(&out.mu, bounds)
            } else {
                sample_action(&out.mu, &out.log_std, bounds, rng).action
            }
        };
        match self {
            Runner::Attention(p) | Runner::DeepSets(p) => net_action(p, obs, rng),
            Runner::SingleTarget(p, plan) => match single_target_forward(obs, plan, p) {
                Some((out, _)) => {
                    if deterministic {
                        deterministic_action(&out.mu, bounds)
                    } else {
                        sample_action(&out.mu, &out.log_std, bounds, rng).action
                    }
                }
                None => ViewpointAction::default(),
            },
            Runner::Handcrafted(plan) => handcrafted_action(obs, plan, bounds),
        }
    }
}

fn run_episode(
    method: &NamedMethod,
    episode_index: usize,
    cfg: &EvalConfig,
) -> EpisodeRow {
    let sim = &cfg.sim;
    let transition = if cfg.use_mpc {
        TransitionMode::Mpc(MpcConfig { ..sim.mpc.clone() })
    } else {
        TransitionMode::Teleport
    };
    let seed = derive_seed(cfg.base_seed, episode_index as u64);
    let mut env = Env::new(
        sim.world.clone(),
        sim.social_forces.clone(),
        sim.camera.clone(),
        sim.observation.clone(),
        sim.reward.clone(),
        sim.episode.clone(),
        transition,
        seed,
    );
    env.reseed(seed);
    let mut obs = env.reset();
    let bounds = ActionBounds::from_world(&env.world);
    let mut action_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.base_seed, 0x5A5A_0000 + episode_index as u64));
    let mut runner = Runner::new(&method.spec);

    let num_targets = env.state().num_targets();
    let timeout_steps = env.timeout_steps();
    let at75_step = (75.0 / env.world.tau_h).floor() as usize;

    let mut sim_obs = Vec::with_capacity(timeout_steps);
    let mut cum_classified = Vec::with_capacity(timeout_steps);
    let mut trace = cfg.collect_traces.then(Vec::new);
    let mut sensor_rows = cfg.sensor_debug.then(Vec::new);
    let mut episode_return = 0.0;
    let mut completion_time = None;

    loop {
        let classified_before: Vec<bool> = obs.iter().map(|o| o.classified).collect();
        let action = runner.act(&obs, &bounds, &mut action_rng, cfg.deterministic_actions);
        let out = env.step(&action);
        episode_return += out.reward;
        sim_obs.push(count_simultaneous(&out.info.visible, &classified_before));
        cum_classified.push(env.state().num_classified() as u32);
        if let Some(t) = trace.as_mut() {
            let s = env.state();
            t.push(TraceRow {
                step: s.step_index,
                time_s: s.step_index as f64 * env.world.tau_h,
                drone_x: s.drone.position.x,
                drone_y: s.drone.position.y,
                drone_z: s.drone.position.z,
                drone_yaw: s.drone.yaw,
                belief_max: s.beliefs.iter().map(|b| b.max_prob()).collect(),
                classified: s.statuses.iter().map(|st| st.classified).collect(),
                visible: out.info.visible.clone(),
                tracking_error: out.info.tracking_error,
            });
        }
        if let Some(rows) = sensor_rows.as_mut() {
            let s = env.state();
            for row in crate::sensor::debug_rows(
                &s.drone,
                &s.targets,
                &env.camera,
                &env.world,
                &env.law,
            ) {
                rows.push((s.step_index, row));
            }
        }
        if out.info.all_classified && completion_time.is_none() {
            completion_time = Some(env.state().step_index as f64 * env.world.tau_h);
        }
        obs = out.observation;
        if out.done {
            break;
        }
    }

    let steps = env.state().step_index;
    let at75 = if sim_obs.is_empty() {
        0
    } else {
        let idx = at75_step.min(cum_classified.len()).saturating_sub(1);
        cum_classified[idx] as usize
    };

    EpisodeRow {
        method: method.name.clone(),
        episode: episode_index,
        seed,
        num_targets,
        dynamics: sim.episode.dynamics,
        classified_at_75s: at75,
        classified_total: env.state().num_classified(),
        completion_time_s: completion_time,
        steps,
        episode_return,
        misclassified: env.state().misclassified,
        sim_obs,
        cum_classified,
        trace,
        sensor_rows,
    }
}

/// Evaluate every method over the same seeded episodes.
pub fn run_eval(methods: &[NamedMethod], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    for m in methods {
        m.validate()?;
    }
    let timeout_steps = cfg.sim.episode.timeout_steps(&cfg.sim.world);
    let workers = cfg.workers.max(1);
    let mut rows: Vec<EpisodeRow> = Vec::with_capacity(methods.len() * cfg.episodes);
    for method in methods {
        let mut method_rows: Vec<EpisodeRow> = if workers == 1 || cfg.episodes <= 1 {
            (0..cfg.episodes)
                .map(|e| run_episode(method, e, cfg))
                .collect()
        } else {
            thread::scope(|s| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        s.spawn(move || {
                            (w..cfg.episodes)
                                .step_by(workers)
                                .map(|e| run_episode(method, e, cfg))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                let mut collected: Vec<EpisodeRow> = handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("eval worker panicked"))
                    .collect();
                collected.sort_by_key(|r| r.episode);
                collected
            })
        };
        rows.append(&mut method_rows);
    }
    rows.sort_by(|a, b| (a.method.as_str(), a.episode).cmp(&(b.method.as_str(), b.episode)));
    Ok(EvalReport {
        rows,
        timeout_steps,
        tau_h: cfg.sim.world.tau_h,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Percentage of targets classified by `at_seconds`, per method (mean, std).
pub fn metric_percent_classified(
    report: &EvalReport,
    at_seconds: f64,
) -> BTreeMap<String, (f64, f64)> {
    let at_step = (at_seconds / report.tau_h).floor() as usize;
    let mut per_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &report.rows {
        let idx = at_step.min(row.cum_classified.len()).saturating_sub(1);
        let classified = if row.cum_classified.is_empty() {
            0.0
        } else {
            row.cum_classified[idx] as f64
        };
        per_method
            .entry(row.method.clone())
            .or_default()
            .push(100.0 * classified / row.num_targets.max(1) as f64);
    }
    per_method
        .into_iter()
        .map(|(k, v)| (k, mean_std(&v)))
        .collect()
}

/// Per-step simultaneous-observation counts of one episode.
pub fn metric_simultaneous_observations(row: &EpisodeRow) -> &[u32] {
    &row.sim_obs
}

/// Mean simultaneous-observation count over the first half of the episode
/// horizon; completed episodes contribute zeros for their missing tail.
pub fn mean_sim_obs_first_half(row: &EpisodeRow, timeout_steps: usize) -> f64 {
    let half = (timeout_steps / 2).max(1);
    let sum: u32 = row.sim_obs.iter().take(half).sum();
    sum as f64 / half as f64
}

/// Aggregates derived from the raw rows.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub episodes: usize,
    pub pct_classified_at_75s_mean: f64,
    pub pct_classified_at_75s_std: f64,
    pub pct_classified_timeout_mean: f64,
    pub pct_classified_timeout_std: f64,
    pub completion_rate: f64,
    pub mean_completion_time_s: Option<f64>,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_sim_obs_first_half: f64,
    pub misclassification_rate: f64,
}

pub fn summarize(report: &EvalReport) -> Vec<MethodSummary> {
    let at75 = metric_percent_classified(report, 75.0);
    let mut methods: Vec<String> = report.rows.iter().map(|r| r.method.clone()).collect();
    methods.dedup();
    methods
        .into_iter()
        .map(|name| {
            let rows: Vec<&EpisodeRow> =
                report.rows.iter().filter(|r| r.method == name).collect();
            let n = rows.len();
            let pct_timeout: Vec<f64> = rows
                .iter()
                .map(|r| 100.0 * r.classified_total as f64 / r.num_targets.max(1) as f64)
                .collect();
            let (pt_mean, pt_std) = mean_std(&pct_timeout);
            let returns: Vec<f64> = rows.iter().map(|r| r.episode_return).collect();
            let (ret_mean, ret_std) = mean_std(&returns);
            let completed: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.completion_time_s)
                .collect();
            let sim_obs: Vec<f64> = rows
                .iter()
                .map(|r| mean_sim_obs_first_half(r, report.timeout_steps))
                .collect();
            let (sim_mean, _) = mean_std(&sim_obs);
            let total_targets: usize = rows.iter().map(|r| r.num_targets).sum();
            let total_missed: usize = rows.iter().map(|r| r.misclassified).sum();
            let (p75_mean, p75_std) = at75.get(&name).cloned().unwrap_or((0.0, 0.0));
            MethodSummary {
                method: name,
                episodes: n,
                pct_classified_at_75s_mean: p75_mean,
                pct_classified_at_75s_std: p75_std,
                pct_classified_timeout_mean: pt_mean,
                pct_classified_timeout_std: pt_std,
                completion_rate: completed.len() as f64 / n.max(1) as f64,
                mean_completion_time_s: if completed.is_empty() {
                    None
                } else {
                    Some(completed.iter().sum::<f64>() / completed.len() as f64)
                },
                mean_return: ret_mean,
                std_return: ret_std,
                mean_sim_obs_first_half: sim_mean,
                misclassification_rate: total_missed as f64 / total_targets.max(1) as f64,
            }
        })
        .collect()
}

/// Write one CSV row per (method, episode).
pub fn write_eval_rows(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "method,episode,seed,num_targets,dynamics,classified_at_75s,classified_total,\
         completion_time_s,steps,return,misclassified,mean_sim_obs_first_half"
    )?;
    for r in &report.rows {
        let completion = r
            .completion_time_s
            .map(|t| t.to_string())
            .unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.episode,
            r.seed,
            r.num_targets,
            r.dynamics,
            r.classified_at_75s,
            r.classified_total,
            completion,
            r.steps,
            r.episode_return,
            r.misclassified,
            mean_sim_obs_first_half(r, report.timeout_steps)
        )?;
    }
    Ok(())
}

/// Summary JSON, one entry per method.
pub fn write_eval_summary(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let summary = summarize(report);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Cumulative-classified-fraction-vs-time curve per method, averaged over
/// episodes (completed episodes hold their final value).
pub fn write_speed_curves(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "method,step,time_s,mean_cum_classified_frac")?;
    let mut methods: Vec<String> = report.rows.iter().map(|r| r.method.clone()).collect();
    methods.dedup();
    for name in methods {
        let rows: Vec<&EpisodeRow> = report.rows.iter().filter(|r| r.method == name).collect();
        for step in 0..report.timeout_steps {
            let mut acc = 0.0;
            for r in &rows {
                let idx = step.min(r.cum_classified.len().saturating_sub(1));
                let v = r.cum_classified.get(idx).copied().unwrap_or(0);
                acc += v as f64 / r.num_targets.max(1) as f64;
            }
            writeln!(
                f,
                "{},{},{},{}",
                name,
                step + 1,
                (step + 1) as f64 * report.tau_h,
                acc / rows.len().max(1) as f64
            )?;
        }
    }
    Ok(())
}

/// Per-episode trace CSVs under `dir/<method>/episode_<n>.csv`, plus sensor
/// debug dumps when collected.
pub fn write_traces(report: &EvalReport, dir: &Path) -> Result<(), EvalError> {
    for r in &report.rows {
        let method_dir = dir.join(&r.method);
        fs::create_dir_all(&method_dir)?;
        if let Some(trace) = &r.trace {
            let mut f = BufWriter::new(File::create(
                method_dir.join(format!("episode_{}.csv", r.episode)),
            )?);
            let mut header = String::from("step,time_s,drone_x,drone_y,drone_z,drone_yaw");
            for j in 0..r.num_targets {
                header.push_str(&format!(",belief_max_{j},classified_{j},visible_{j}"));
            }
            header.push_str(",tracking_error");
            writeln!(f, "{header}")?;
            for t in trace {
                let mut line = format!(
                    "{},{},{},{},{},{}",
                    t.step, t.time_s, t.drone_x, t.drone_y, t.drone_z, t.drone_yaw
                );
                for j in 0..r.num_targets {
                    line.push_str(&format!(
                        ",{},{},{}",
                        t.belief_max[j], t.classified[j] as u8, t.visible[j] as u8
                    ));
                }
                line.push_str(&format!(",{}", t.tracking_error));
                writeln!(f, "{line}")?;
            }
        }
        if let Some(rows) = &r.sensor_rows {
            let mut f = BufWriter::new(File::create(
                method_dir.join(format!("sensor_debug_{}.csv", r.episode)),
            )?);
            writeln!(f, "step,target,visible,area,skew,p_true")?;
            for (step, row) in rows {
                writeln!(
                    f,
                    "{},{},{},{},{},{}",
                    step, row.target, row.visible as u8, row.area, row.skew, row.p_true
                )?;
            }
        }
    }
    Ok(())
}
