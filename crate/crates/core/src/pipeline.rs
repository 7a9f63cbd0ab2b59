//! Batch operations shared by the CLI and the service: demo synthesis,
//! seeded rollout trials, metrics tables and their aggregation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, PlanarTask, Scenario};
use crate::demos::{DemoSet, Label};
use crate::dynamics::{ControlAffine, SystemKind};
use crate::error::{Error, Result};
use crate::metrics;
use crate::mpc::{run_closed_loop, MpcConfig, RolloutResult};
use crate::task::{true_task_cartpole, TaskDefinition};
use crate::trajectory::Trajectory;

/// Offset between the seeds of positive and negative demos of one request.
pub const NEGATIVE_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    pub system: SystemKind,
    /// Planar scenario; ignored for the cart-pole.
    pub task: Option<PlanarTask>,
    pub positives: usize,
    pub negatives: usize,
    pub seed: u64,
    /// Cart-pole demo length in seconds.
    pub duration: f64,
    /// Cart-pole expert control noise.
    pub noise: f64,
}

impl SynthRequest {
    pub fn cartpole(positives: usize, negatives: usize, seed: u64) -> Self {
        Self {
            system: SystemKind::Cartpole,
            task: None,
            positives,
            negatives,
            seed,
            duration: 30.0,
            noise: 0.5,
        }
    }

    pub fn planar(task: PlanarTask, positives: usize, negatives: usize, seed: u64) -> Self {
        Self {
            system: SystemKind::Planar,
            task: Some(task),
            positives,
            negatives,
            seed,
            duration: 30.0,
            noise: 0.0,
        }
    }
}

/// Positive demo `i` uses seed `seed + i`, negative demo `i` uses
/// `seed + NEGATIVE_SEED_OFFSET + i`.
pub fn synth(req: &SynthRequest) -> Result<DemoSet> {
    let mut set = DemoSet::new(req.system);
    for (label, count, base) in [
        (Label::Positive, req.positives, req.seed),
        (Label::Negative, req.negatives, req.seed.wrapping_add(NEGATIVE_SEED_OFFSET)),
    ] {
        for i in 0..count as u64 {
            let seed = base.wrapping_add(i);
            let demo = match req.system {
                SystemKind::Cartpole => match label {
                    Label::Positive => baselines::expert_cartpole(req.duration, req.noise, seed),
                    Label::Negative => baselines::negative_cartpole(req.duration, seed),
                },
                SystemKind::Planar => {
                    let task = req
                        .task
                        .ok_or_else(|| Error::InvalidConfig("planar synthesis needs a task (reach or clean)".into()))?;
                    baselines::scripted_planar(task, label, seed)
                }
            }
            .map_err(|e| Error::Generation(format!("{label} demo with seed {seed}: {e}")))?;
            set.push(demo)?;
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRequest {
    pub system: SystemKind,
    pub scenario: Option<PlanarTask>,
    pub trials: usize,
    pub seed: u64,
    pub duration: f64,
    pub mpc: MpcConfig,
    /// Fixed start overriding the seeded one.
    pub start: Option<Vec<f64>>,
}

impl RolloutRequest {
    pub fn new(system: SystemKind, trials: usize, seed: u64, duration: f64) -> Self {
        Self {
            system,
            scenario: None,
            trials,
            seed,
            duration,
            mpc: MpcConfig::benchmark(),
            start: None,
        }
    }
}

/// Seeded initial state: the hanging cart-pole with a small random offset in
/// `theta` and `theta_dot`, or a random planar start at rest.
pub fn initial_state(system: SystemKind, scenario: Option<PlanarTask>, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match system {
        SystemKind::Cartpole => {
            let mut x = system.build().rest_state();
            x[0] += rng.random_range(-0.05..0.05);
            x[1] += rng.random_range(-0.05..0.05);
            x
        }
        SystemKind::Planar => match scenario {
            Some(task) => Scenario::for_task(task).random_start(&mut rng).to_vec(),
            None => vec![rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), 0.0, 0.0],
        },
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub result: RolloutResult,
}

impl Trial {
    pub fn id(&self) -> String {
        format!("trial-{:02}", self.index)
    }
}

/// Runs `req.trials` closed-loop rollouts in parallel; trial `i` uses seed
/// `req.seed + i`, so results do not depend on scheduling.
pub fn run_trials(task: &TaskDefinition, req: &RolloutRequest) -> Result<Vec<Trial>> {
    let sys = req.system.build();
    (0..req.trials)
        .into_par_iter()
        .map(|index| {
            let seed = req.seed.wrapping_add(index as u64);
            let x0 = match &req.start {
                Some(x) => x.clone(),
                None => initial_state(req.system, req.scenario, seed),
            };
            let result = run_closed_loop(sys.clone(), task, &req.mpc, &x0, req.duration)?;
            if let Some(e) = &result.error {
                log::warn!("trial {index} (seed {seed}) stopped early: {e}");
            }
            Ok(Trial { index, seed, x0, result })
        })
        .collect()
}

/// One row of a metrics table. Empty cells are metrics that do not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub rollout: String,
    pub mode: String,
    pub success_time: Option<f64>,
    pub first_success: Option<f64>,
    pub eps_true: Option<f64>,
    pub cleaning_m: Option<f64>,
    pub reach: Option<bool>,
    pub collided: Option<bool>,
}

pub const METRICS_HEADER: &str = "rollout,mode,success_time,first_success,eps_true,cleaning_m,reach,collided";

/// What to score a trajectory against.
#[derive(Debug, Clone, Default)]
pub struct EvalContext {
    pub mode: String,
    pub scenario: Option<Scenario>,
    /// Defaults to the upright delta task for the cart-pole.
    pub true_task: Option<TaskDefinition>,
}

pub fn evaluate(id: &str, traj: &Trajectory, ctx: &EvalContext) -> Result<MetricsRow> {
    let mut row = MetricsRow {
        rollout: id.to_string(),
        mode: ctx.mode.clone(),
        success_time: None,
        first_success: None,
        eps_true: None,
        cleaning_m: None,
        reach: None,
        collided: None,
    };
    match traj.system {
        SystemKind::Cartpole => {
            let s = metrics::cartpole_success(traj)?;
            row.success_time = Some(s.total_success_time);
            row.first_success = s.first_success_time;
            let truth = match &ctx.true_task {
                Some(t) => t.clone(),
                None => true_task_cartpole(10, &SystemKind::Cartpole.build().ergodic_domain())?,
            };
            row.eps_true = Some(metrics::ergodicity_vs_true(traj, &truth)?);
        }
        SystemKind::Planar => {
            if let Some(t) = &ctx.true_task {
                row.eps_true = Some(metrics::ergodicity_vs_true(traj, t)?);
            }
            if let Some(sc) = &ctx.scenario {
                match sc.task {
                    PlanarTask::Clean => {
                        let s = metrics::cleaning_score(traj, &sc.obstacle, &sc.workspace)?;
                        row.cleaning_m = Some(s.m);
                        row.collided = Some(s.collided);
                    }
                    PlanarTask::Reach => {
                        let target = sc.target.ok_or_else(|| Error::InvalidConfig("reach scenario without a target".into()))?;
                        row.reach = Some(metrics::reach_success(traj, &target, &sc.obstacle)?);
                        row.collided = Some(metrics::collides(traj, &sc.obstacle, 0.0));
                    }
                }
            }
        }
    }
    Ok(row)
}

fn cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.rollout,
            r.mode,
            cell(&r.success_time),
            cell(&r.first_success),
            cell(&r.eps_true),
            cell(&r.cleaning_m),
            cell(&r.reach),
            cell(&r.collided)
        );
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {METRICS_HEADER:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", f.len())));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| err(format!("{s:?}: {e}")))
            }
        };
        let flag = |s: &str| -> Result<Option<bool>> {
            match s {
                "" => Ok(None),
                "true" => Ok(Some(true)),
                "false" => Ok(Some(false)),
                other => Err(err(format!("bad flag {other:?}"))),
            }
        };
        rows.push(MetricsRow {
            rollout: f[0].to_string(),
            mode: f[1].to_string(),
            success_time: num(f[2])?,
            first_success: num(f[3])?,
            eps_true: num(f[4])?,
            cleaning_m: num(f[5])?,
            reach: flag(f[6])?,
            collided: flag(f[7])?,
        });
    }
    Ok(rows)
}

/// Writes `trial-NN.rollout.csv` per trial plus `metrics.csv` into `dir`.
pub fn write_trials(dir: &Path, trials: &[Trial], ctx: &EvalContext) -> Result<Vec<MetricsRow>> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(trials.len());
    for t in trials {
        let id = t.id();
        fs::write(dir.join(format!("{id}.rollout.csv")), t.result.to_csv())?;
        rows.push(evaluate(&id, &t.result.trajectory, ctx)?);
    }
    fs::write(dir.join("metrics.csv"), metrics_to_csv(&rows))?;
    Ok(rows)
}

fn system_from_header(header: &str) -> Result<SystemKind> {
    let cols = header.split(',').count();
    [SystemKind::Cartpole, SystemKind::Planar]
        .into_iter()
        .find(|s| cols == 2 + s.state_dim() + s.control_dim())
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("{cols} columns match no known system"),
        })
}

/// Sorted `*.rollout.csv` files in `dir`.
pub fn rollout_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".rollout.csv")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_rollout(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().unwrap_or_default();
    RolloutResult::trajectory_from_csv(system_from_header(header)?, &text)
}

/// Scores every rollout file in `dir`.
pub fn eval_dir(dir: &Path, ctx: &EvalContext) -> Result<Vec<MetricsRow>> {
    let files = rollout_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no .rollout.csv files in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let id = p
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.trim_end_matches(".rollout.csv").to_string())
                .unwrap_or_default();
            evaluate(&id, &load_rollout(p)?, ctx)
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Aggregate of one mode's metrics rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub rollouts: usize,
    pub successes: usize,
    pub median_success_time: Option<f64>,
    pub mean_success_time: Option<f64>,
    pub median_eps_true: Option<f64>,
    pub median_m: Option<f64>,
    pub mean_m: Option<f64>,
    pub reached: usize,
    pub collisions: usize,
}

pub fn summarize(mode: &str, rows: &[MetricsRow]) -> ModeSummary {
    let pick = |f: fn(&MetricsRow) -> Option<f64>| rows.iter().filter_map(f).collect::<Vec<_>>();
    let success = pick(|r| r.success_time);
    let m = pick(|r| r.cleaning_m);
    ModeSummary {
        mode: mode.to_string(),
        rollouts: rows.len(),
        successes: rows.iter().filter(|r| r.first_success.is_some()).count(),
        median_success_time: median(&success),
        mean_success_time: mean(&success),
        median_eps_true: median(&pick(|r| r.eps_true)),
        median_m: median(&m),
        mean_m: mean(&m),
        reached: rows.iter().filter(|r| r.reach == Some(true)).count(),
        collisions: rows.iter().filter(|r| r.collided == Some(true)).count(),
    }
}

/// Reads `metrics.csv` from each directory and summarizes per directory.
/// The mode is the one recorded in the rows, or the directory name.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<ModeSummary>> {
    if dirs.is_empty() {
        return Err(Error::EmptyInput("no directories to compare".into()));
    }
    dirs.iter()
        .map(|d| {
            let path = d.join("metrics.csv");
            if !path.exists() {
                return Err(Error::EmptyInput(format!("{} has no metrics.csv", d.display())));
            }
            let rows = metrics_from_csv(&fs::read_to_string(&path)?)?;
            if rows.is_empty() {
                return Err(Error::EmptyInput(format!("{} has no rows", path.display())));
            }
            let mode = rows
                .first()
                .map(|r| r.mode.clone())
                .filter(|m| !m.is_empty())
                .unwrap_or_else(|| d.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string());
            Ok(summarize(&mode, &rows))
        })
        .collect()
}

pub const SUMMARY_HEADER: &str =
    "mode,rollouts,successes,median_success_time,mean_success_time,median_eps_true,median_m,mean_m,reached,collisions";

pub fn summary_to_csv(rows: &[ModeSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.mode,
            s.rollouts,
            s.successes,
            cell(&s.median_success_time),
            cell(&s.mean_success_time),
            cell(&s.median_eps_true),
            cell(&s.median_m),
            cell(&s.mean_m),
            s.reached,
            s.collisions
        );
    }
    out
}
