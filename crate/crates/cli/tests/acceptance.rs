//! Acceptance run: one PASS/FAIL line per criterion, tolerances pinned here.
//! Exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ergodic_imitation::baselines::{PlanarTask, Scenario};
use ergodic_imitation::demos::{Demonstration, Label, Source};
use ergodic_imitation::metrics;
use ergodic_imitation::mpc::ErgodicController;
use ergodic_imitation::pipeline::{self, median, RolloutRequest, SynthRequest, Trial};
use ergodic_imitation::spectral::{
    basis_eval, ergodic_metric, frequency_weights, lattice, traj_coefficients, uniform_coefficients, CoefficientSet, Domain,
};
use ergodic_imitation::task::{learn_task, Provenance};
use ergodic_imitation::{ControlAffine, DemoSet, FusionConfig, FusionMode, MpcConfig, SystemKind, TaskDefinition, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let in_time = took <= limit;
        let (ok, detail) = match out {
            Ok((ok, d)) => (ok && in_time, d),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            self.failed += 1;
        }
        println!(
            "{} {name}: {detail} [{:.1} s, limit {} s{}]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// Independent basis: normalizer and cosine product written out directly.
fn oracle_basis(k: &[usize], x: &[f64], lower: &[f64], len: &[f64]) -> f64 {
    let mut h2 = 1.0;
    let mut prod = 1.0;
    for i in 0..k.len() {
        h2 *= if k[i] == 0 { len[i] } else { len[i] / 2.0 };
        prod *= (k[i] as f64 * PI * (x[i] - lower[i]) / len[i]).cos();
    }
    prod / h2.sqrt()
}

fn oracle_lambda(k: &[usize]) -> f64 {
    let n = k.len() as f64;
    let norm2: f64 = k.iter().map(|&v| (v * v) as f64).sum();
    (1.0 + norm2).powf(-(n + 1.0) / 2.0)
}

fn spectral() -> Outcome {
    // Orthonormality by midpoint quadrature; exact for these frequencies.
    let lower = [-0.5, 1.0];
    let len = [2.0, 1.5];
    let domain = Domain::new(lower.to_vec(), len.to_vec()).map_err(e)?;
    let ks: Vec<_> = lattice(4, 2).collect();
    let n = 200;
    let cell = [len[0] / n as f64, len[1] / n as f64];
    let mut values = vec![vec![0.0; n * n]; ks.len()];
    for (a, k) in ks.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                let p = [lower[0] + (i as f64 + 0.5) * cell[0], lower[1] + (j as f64 + 0.5) * cell[1]];
                values[a][i * n + j] = basis_eval(k, &p, &domain).map_err(e)?;
            }
        }
    }
    let mut ortho: f64 = 0.0;
    for a in 0..ks.len() {
        for b in 0..ks.len() {
            let ip: f64 = values[a].iter().zip(&values[b]).map(|(x, y)| x * y).sum::<f64>() * cell[0] * cell[1];
            ortho = ortho.max((ip - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }

    // Trajectory coefficients vs composite Simpson on the analytic curve.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let unit = Domain::new(vec![0.0, 0.0], vec![1.0, 1.0]).map_err(e)?;
    let order = 6;
    let mut traj_err: f64 = 0.0;
    for _ in 0..20 {
        let terms: Vec<[f64; 3]> = (0..6)
            .map(|_| [rng.random_range(0.02..0.06), rng.random_range(0.5..4.0), rng.random_range(0.0..2.0 * PI)])
            .collect();
        let center = [rng.random_range(0.4..0.6), rng.random_range(0.4..0.6)];
        let curve = |t: f64| -> [f64; 2] {
            let mut p = center;
            for (i, w) in terms.iter().enumerate() {
                p[i % 2] += w[0] * (w[1] * t + w[2]).sin();
            }
            p
        };
        let duration = 2.0;
        let samples = 20_000;
        let times: Vec<f64> = (0..=samples).map(|i| duration * i as f64 / samples as f64).collect();
        let states: Vec<Vec<f64>> = times.iter().map(|&t| curve(t).to_vec()).collect();
        let c = traj_coefficients(&times, &states, &[0, 1], order, &unit).map_err(e)?;
        let fine = 200_000;
        let hstep = duration / fine as f64;
        let simpson = |i: usize| if i == 0 || i == fine { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        // cos(k pi x_d) per axis and order at every quadrature node
        let mut table = vec![[[0.0; 7]; 2]; fine + 1];
        for (i, row) in table.iter_mut().enumerate() {
            let p = curve(i as f64 * hstep);
            for d in 0..2 {
                for k in 0..=order {
                    row[d][k] = oracle_basis(&[k], &[p[d]], &[0.0], &[1.0]);
                }
            }
        }
        for k in lattice(order, 2) {
            let s: f64 = table.iter().enumerate().map(|(i, row)| simpson(i) * row[0][k.0[0]] * row[1][k.0[1]]).sum();
            let oracle = s * hstep / 3.0 / duration;
            traj_err = traj_err.max((c.get(&k.0) - oracle).abs());
        }
    }

    // Metric vs a plain summation with an independently computed weight.
    let mut metric_err: f64 = 0.0;
    for trial in 0..50 {
        let dim = 1 + trial % 3;
        let order: usize = 1 + trial % 6;
        let size = (order + 1).pow(dim as u32);
        let a: Vec<f64> = (0..size).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..size).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ca = CoefficientSet::from_values(order, dim, a.clone()).map_err(e)?;
        let cb = CoefficientSet::from_values(order, dim, b.clone()).map_err(e)?;
        let got = ergodic_metric(&ca, &cb, &frequency_weights(order, dim)).map_err(e)?;
        let mut want = 0.0;
        for (flat, k) in lattice(order, dim).enumerate() {
            want += oracle_lambda(&k.0) * (a[flat] - b[flat]).powi(2);
        }
        metric_err = metric_err.max((got - want).abs());
    }
    Ok((
        ortho < 1e-6 && traj_err < 1e-6 && metric_err < 1e-12,
        format!("orthonormality {ortho:.1e} (<1e-6), trajectory coefficients {traj_err:.1e} (<1e-6), metric {metric_err:.1e} (<1e-12)"),
    ))
}

fn delta_task(system: SystemKind, point: &[f64], order: usize) -> Result<TaskDefinition, String> {
    let domain = system.build().ergodic_domain();
    Ok(TaskDefinition {
        phi: ergodic_imitation::spectral::delta_coefficients(point, order, &domain).map_err(e)?,
        domain,
        projection: vec![0, 1],
        mode: FusionMode::Posonly,
        provenance: vec![Provenance { id: "target".into(), w: 1.0 }],
    })
}

fn gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let system = if trial % 2 == 0 { SystemKind::Cartpole } else { SystemKind::Planar };
        let sys = system.build();
        let (point, x0, history) = match system {
            SystemKind::Cartpole => {
                let p = vec![rng.random_range(-2.5..2.5), rng.random_range(-4.0..4.0)];
                let x0 = vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), 0.0];
                let h = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0, 0.0];
                (p, x0, h)
            }
            SystemKind::Planar => {
                let p = vec![rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
                let x0 = vec![rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
                let h = vec![rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), 0.0, 0.0];
                (p, x0, h)
            }
        };
        let task = delta_task(system, &point, 6)?;
        let cfg = MpcConfig {
            order: 6,
            horizon: 0.5,
            ..MpcConfig::default()
        };
        let steps = cfg.horizon_steps() * sys.control_dim();
        let umax: Vec<f64> = sys.control_upper().to_vec();
        let mut ctrl = ErgodicController::new(sys, &task, cfg).map_err(e)?;
        ctrl.observe(0.0, &history);
        ctrl.observe(0.2, &x0);
        let m = umax.len();
        let controls: Vec<f64> = (0..steps).map(|i| rng.random_range(-0.5..0.5) * umax[i % m]).collect();
        let (_, grad) = ctrl.gradient(&x0, &controls).map_err(e)?;
        let h = 1e-5;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..steps {
            let mut up = controls.clone();
            let mut dn = controls.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (ctrl.evaluate(&x0, &up).map_err(e)?.j - ctrl.evaluate(&x0, &dn).map_err(e)?.j) / (2.0 * h);
            num += (grad[i] - fd).powi(2);
            den += fd * fd;
        }
        worst = worst.max(num.sqrt() / den.sqrt().max(1e-12));
    }
    Ok((worst < 1e-4, format!("worst relative error {worst:.2e} over 20 instances (<1e-4)")))
}

fn random_demo(system: SystemKind, label: Label, id: String, rng: &mut ChaCha8Rng) -> Result<Demonstration, String> {
    let n = rng.random_range(5..60);
    let mut t = 0.0;
    let mut times = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        times.push(t);
        t += rng.random_range(0.01..0.1);
        states.push(match system {
            SystemKind::Cartpole => vec![rng.random_range(-3.0..3.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0), 0.0],
            SystemKind::Planar => vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0, 0.0],
        });
    }
    let traj = Trajectory::new(system, times, states).map_err(e)?;
    Demonstration::new(id, label, Source::Synthetic, traj).map_err(e)
}

fn fusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut mass, mut weights): (f64, f64) = (0.0, 0.0);
    for i in 0..200 {
        let system = if rng.random_bool(0.5) { SystemKind::Cartpole } else { SystemKind::Planar };
        let mode = [FusionMode::Posonly, FusionMode::Negonly, FusionMode::Posneg][i % 3];
        let pos = if mode == FusionMode::Negonly { rng.random_range(0..3) } else { rng.random_range(1..5) };
        let neg = if mode == FusionMode::Posonly { rng.random_range(0..3) } else { rng.random_range(1..5) };
        let mut demos = Vec::new();
        for j in 0..pos {
            demos.push(random_demo(system, Label::Positive, format!("p{j}"), &mut rng)?);
        }
        for j in 0..neg {
            demos.push(random_demo(system, Label::Negative, format!("n{j}"), &mut rng)?);
        }
        let set = DemoSet::from_demos(system, demos).map_err(e)?;
        let cfg = FusionConfig {
            order: rng.random_range(1..8),
            beta: rng.random_range(0.0..2.0),
            gamma: rng.random_range(0.0..2.0),
        };
        let task = learn_task(&set, mode, &cfg).map_err(e)?;
        let h0 = task.domain.volume().sqrt();
        mass = mass.max((task.phi.values()[0] - 1.0 / h0).abs());
        weights = weights.max((task.weight_sum() - 1.0).abs());
    }
    Ok((
        mass < 1e-12 && weights < 1e-12,
        format!("max |phi_0 - 1/h_0| {mass:.1e}, max |sum w - 1| {weights:.1e} over 200 fusions (<1e-12)"),
    ))
}

fn learn(set: &DemoSet, mode: FusionMode) -> Result<TaskDefinition, String> {
    learn_task(set, mode, &FusionConfig::default()).map_err(e)
}

fn trials(task: &TaskDefinition, system: SystemKind, scenario: Option<PlanarTask>, duration: f64) -> Result<Vec<Trial>, String> {
    let mut req = RolloutRequest::new(system, 10, 0, duration);
    req.scenario = scenario;
    pipeline::run_trials(task, &req).map_err(e)
}

fn cartpole_success(trials: &[Trial]) -> Result<(usize, usize, f64), String> {
    let mut entered = 0;
    let mut positive = 0;
    let mut times = Vec::new();
    for t in trials {
        let s = metrics::cartpole_success(&t.result.trajectory).map_err(e)?;
        entered += s.first_success_time.is_some() as usize;
        positive += (s.total_success_time > 0.0) as usize;
        times.push(s.total_success_time);
    }
    Ok((entered, positive, median(&times).unwrap_or(0.0)))
}

fn expert_posonly() -> Outcome {
    let set = pipeline::synth(&SynthRequest::cartpole(3, 0, 0)).map_err(e)?;
    let task = learn(&set, FusionMode::Posonly)?;
    let (entered, _, med) = cartpole_success(&trials(&task, SystemKind::Cartpole, None, 30.0)?)?;
    Ok((
        entered >= 8 && med >= 5.0,
        format!("{entered}/10 entered the success region (>=8), median success time {med:.2} s (>=5)"),
    ))
}

fn negonly_cartpole() -> Outcome {
    let set = pipeline::synth(&SynthRequest::cartpole(0, 3, 0)).map_err(e)?;
    let task = learn(&set, FusionMode::Negonly)?;
    let (_, positive, med) = cartpole_success(&trials(&task, SystemKind::Cartpole, None, 30.0)?)?;
    Ok((positive >= 3, format!("{positive}/10 with success time > 0 (>=3), median {med:.2} s")))
}

struct PlanarStats {
    m: f64,
    covered: f64,
    collisions: usize,
    reached: usize,
}

fn planar_stats(trials: &[Trial], sc: &Scenario) -> Result<PlanarStats, String> {
    let mut ms = Vec::new();
    let mut covered = Vec::new();
    let mut collisions = 0;
    let mut reached = 0;
    for t in trials {
        let traj = &t.result.trajectory;
        let s = metrics::cleaning_score(traj, &sc.obstacle, &sc.workspace).map_err(e)?;
        ms.push(s.m);
        covered.push(s.covered_cells as f64);
        collisions += metrics::collides(traj, &sc.obstacle, 0.0) as usize;
        if let Some(target) = &sc.target {
            reached += metrics::reach_success(traj, target, &sc.obstacle).map_err(e)? as usize;
        }
    }
    Ok(PlanarStats {
        m: median(&ms).unwrap_or(0.0),
        covered: median(&covered).unwrap_or(0.0),
        collisions,
        reached,
    })
}

fn cleaning() -> Outcome {
    let sc = Scenario::clean();
    let all = pipeline::synth(&SynthRequest::planar(PlanarTask::Clean, 5, 2, 0)).map_err(e)?;
    let (pos, neg) = all.partition();
    let subset = |demos: Vec<Demonstration>| DemoSet::from_demos(SystemKind::Planar, demos).map_err(e);
    let posonly = learn(&subset(pos.clone())?, FusionMode::Posonly)?;
    let negonly = learn(&subset(neg.clone())?, FusionMode::Negonly)?;
    let posneg = learn(&subset(pos[..3].iter().chain(&neg).cloned().collect())?, FusionMode::Posneg)?;
    let run = |task: &TaskDefinition| -> Result<PlanarStats, String> { planar_stats(&trials(task, SystemKind::Planar, Some(PlanarTask::Clean), 20.0)?, &sc) };
    let (p, n, pn) = (run(&posonly)?, run(&negonly)?, run(&posneg)?);
    let checks = [
        pn.collisions == 0,
        pn.m >= p.m,
        pn.m >= n.m,
        n.covered < pn.covered,
    ];
    Ok((
        checks.iter().all(|c| *c),
        format!(
            "posneg collisions {} (=0) [{}]; median m posneg {:.3} >= posonly {:.3} [{}], >= negonly {:.3} [{}]; median covered cells negonly {} < posneg {} [{}]; posonly collisions {}",
            pn.collisions,
            tick(checks[0]),
            pn.m,
            p.m,
            tick(checks[1]),
            n.m,
            tick(checks[2]),
            n.covered,
            pn.covered,
            tick(checks[3]),
            p.collisions
        ),
    ))
}

fn tick(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "violated"
    }
}

fn reaching() -> Outcome {
    let sc = Scenario::reach();
    let all = pipeline::synth(&SynthRequest::planar(PlanarTask::Reach, 13, 3, 0)).map_err(e)?;
    let (pos, _) = all.partition();
    let posneg = learn(&all, FusionMode::Posneg)?;
    let posonly = learn(&DemoSet::from_demos(SystemKind::Planar, pos).map_err(e)?, FusionMode::Posonly)?;
    let run = |task: &TaskDefinition| -> Result<PlanarStats, String> { planar_stats(&trials(task, SystemKind::Planar, Some(PlanarTask::Reach), 20.0)?, &sc) };
    let (pn, p) = (run(&posneg)?, run(&posonly)?);
    Ok((
        pn.reached >= 8 && pn.collisions == 0 && pn.collisions <= p.collisions,
        format!(
            "posneg reached {}/10 (>=8) with {} collisions (=0); posonly reached {}/10 with {} collisions (>= posneg)",
            pn.reached, pn.collisions, p.reached, p.collisions
        ),
    ))
}

fn asymptotic_coverage() -> Outcome {
    let sys = SystemKind::Planar.build();
    let domain = sys.ergodic_domain();
    let task = TaskDefinition {
        phi: uniform_coefficients(10, &domain),
        domain,
        projection: vec![0, 1],
        mode: FusionMode::Posonly,
        provenance: vec![Provenance { id: "uniform".into(), w: 1.0 }],
    };
    let runs = trials(&task, SystemKind::Planar, None, 60.0)?;
    let checkpoints = [10.0, 30.0, 60.0];
    let mut medians = Vec::new();
    for &c in &checkpoints {
        let eps: Vec<f64> = runs
            .iter()
            .map(|t| {
                let times = &t.result.trajectory.times;
                let i = times.iter().position(|&s| s >= c - 1e-9).unwrap_or(times.len() - 1);
                t.result.eps_running[i]
            })
            .collect();
        medians.push(median(&eps).unwrap_or(f64::NAN));
    }
    Ok((
        medians[0] > medians[1] && medians[1] > medians[2],
        format!(
            "median eps at 10/30/60 s: {:.3e} > {:.3e} > {:.3e} (strictly decreasing)",
            medians[0], medians[1], medians[2]
        ),
    ))
}

fn cli_pipeline(dir: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_ergodic");
    let steps: [&[&str]; 4] = [
        &["synth", "planar", "clean", "--pos", "2", "--neg", "1", "--seed", "5", "--out", "demos.demos.jsonl"],
        &["learn", "demos.demos.jsonl", "--mode", "posneg", "--out", "task.json", "--density", "grid.json"],
        &[
            "rollout", "task.json", "--system", "planar", "--scenario", "clean", "--trials", "2", "--seed", "9", "--duration", "2", "--set",
            "horizon=1", "--out", "runs",
        ],
        &["eval", "runs", "--scenario", "clean", "--mode", "posneg", "--out", "eval.csv"],
    ];
    for args in steps {
        let out = Command::new(bin).args(args).current_dir(dir).output().map_err(e)?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("runs")] {
        for entry in fs::read_dir(&sub).map_err(e)? {
            let p = entry.map_err(e)?.path();
            if p.is_file() {
                let rel = p.strip_prefix(dir).map_err(e)?.display().to_string();
                files.push((rel, fs::read(&p).map_err(e)?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(e)?;
    let b = tempfile::tempdir().map_err(e)?;
    cli_pipeline(a.path())?;
    cli_pipeline(b.path())?;
    let (sa, sb) = (snapshot(a.path())?, snapshot(b.path())?);
    Ok((
        !sa.is_empty() && sa == sb,
        format!("{} files from synth -> learn -> rollout -> eval byte-identical across two runs", sa.len()),
    ))
}

fn main() {
    // Tolerate libtest-style flags passed by `cargo test`.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut report = Report { failed: 0 };
    let criteria: [(&str, u64, fn() -> Outcome); 9] = [
        ("spectral_correctness", 10, spectral),
        ("gradient_correctness", 60, gradient),
        ("fusion_invariants", 10, fusion),
        ("expert_posonly_cartpole", 300, expert_posonly),
        ("negonly_cartpole_feasibility", 300, negonly_cartpole),
        ("cleaning_comparison", 300, cleaning),
        ("reaching_posneg", 300, reaching),
        ("asymptotic_coverage", 300, asymptotic_coverage),
        ("pipeline_determinism", 300, determinism),
    ];
    for (name, limit, f) in criteria {
        if wanted(name) {
            report.check(name, secs(limit), f);
        }
    }
    if report.failed > 0 {
        println!("{} criterion(s) failed", report.failed);
        std::process::exit(1);
    }
}
