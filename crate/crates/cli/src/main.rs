use std::fs;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ergodic_imitation::baselines::{PlanarTask, Scenario};
use ergodic_imitation::pipeline::{self, EvalContext, RolloutRequest, SynthRequest};
use ergodic_imitation::task::learn_task;
use ergodic_imitation::{DemoSet, FusionConfig, FusionMode, MpcConfig, SystemKind, TaskDefinition};
use ergodic_service::ServiceConfig;

/// Ergodic imitation from positive and negative demonstrations.
#[derive(Debug, Parser)]
#[command(name = "ergodic", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate scripted demonstrations into a .demos.jsonl file.
    Synth(SynthArgs),
    /// Fuse demonstrations into a task definition.
    Learn(LearnArgs),
    /// Run seeded closed-loop rollouts of a task.
    Rollout(RolloutArgs),
    /// Score every .rollout.csv in a directory.
    Eval(EvalArgs),
    /// Summarize metrics.csv files of several runs side by side.
    Compare(CompareArgs),
    /// Run the session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    system: SystemKind,
    /// Planar scenario: reach or clean.
    task: Option<PlanarTask>,
    #[arg(long, default_value_t = 0)]
    pos: usize,
    #[arg(long, default_value_t = 0)]
    neg: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cart-pole demo length in seconds.
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// Cart-pole expert control noise.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LearnArgs {
    demos: PathBuf,
    #[arg(long)]
    mode: FusionMode,
    #[arg(long, short = 'k', default_value_t = 10)]
    order: usize,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the reconstructed density grid as JSON.
    #[arg(long)]
    density: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Keep negative density values instead of clipping and renormalizing.
    #[arg(long)]
    no_clip: bool,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    task: PathBuf,
    #[arg(long)]
    system: SystemKind,
    /// Planar scenario used for random starts and scoring.
    #[arg(long)]
    scenario: Option<PlanarTask>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// Controller settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Controller override `key=value`, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Fixed initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    start: Option<Vec<f64>>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    dir: PathBuf,
    /// Task file scored against; the cart-pole defaults to the upright task.
    #[arg(long)]
    true_task: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<PlanarTask>,
    #[arg(long, default_value = "")]
    mode: String,
    /// Output CSV; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "ERGODIC_HOST", default_value = "127.0.0.1")]
    host: IpAddr,
    /// 0 picks a free port.
    #[arg(long, env = "ERGODIC_PORT", default_value_t = ergodic_service::DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = "ERGODIC_TICK_RATE", default_value_t = ergodic_service::DEFAULT_TICK_RATE)]
    tick_rate: f64,
    /// Allowed browser origin; repeat or comma separate. `*` allows any.
    #[arg(long, env = "ERGODIC_CORS", value_delimiter = ',')]
    cors: Vec<String>,
}

/// Failures split by exit code.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ergodic_imitation::Error> for Failure {
    fn from(e: ergodic_imitation::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let out = match cli.cmd {
        Command::Synth(a) => synth(a),
        Command::Learn(a) => learn(a),
        Command::Rollout(a) => rollout(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Serve(a) => serve(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    if a.system == SystemKind::Planar && a.task.is_none() {
        return Err(Failure::Usage("planar synthesis needs a task: reach or clean".into()));
    }
    if a.pos + a.neg == 0 {
        return Err(Failure::Usage("nothing to generate: pass --pos and/or --neg".into()));
    }
    let req = SynthRequest {
        system: a.system,
        task: a.task,
        positives: a.pos,
        negatives: a.neg,
        seed: a.seed,
        duration: a.duration,
        noise: a.noise,
    };
    let set = pipeline::synth(&req)?;
    set.save(&a.out)?;
    println!("wrote {} demos to {}", set.len(), a.out.display());
    Ok(())
}

fn learn(a: LearnArgs) -> Result<(), Failure> {
    let set = DemoSet::load(&a.demos)?;
    let cfg = FusionConfig {
        order: a.order,
        beta: a.beta,
        gamma: a.gamma,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let task = learn_task(&set, a.mode, &cfg)?;
    task.save(&a.out)?;
    if let Some(path) = &a.density {
        let grid = task.density(a.res, !a.no_clip)?;
        let json = serde_json_string(&grid)?;
        fs::write(path, json)?;
    }
    println!("learned {} task from {} demos -> {}", task.mode, task.provenance.len(), a.out.display());
    Ok(())
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string(v).map_err(|e| Failure::Runtime(e.to_string()))
}

/// Reads `key = value` controller settings. Values may be bare or quoted;
/// arrays become comma lists.
fn read_config(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = fs::read_to_string(path)?;
    let table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(_) => {
            // Bare words such as `memory = horizon_only` are not TOML.
            let mut pairs = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Failure::Usage(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
                pairs.push((k.trim().to_string(), v.trim().trim_matches('"').to_string()));
            }
            return Ok(pairs);
        }
    };
    Ok(table
        .into_iter()
        .map(|(k, v)| {
            let v = match v {
                toml::Value::String(s) => s,
                toml::Value::Array(a) => a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            (k, v)
        })
        .collect())
}

fn rollout(a: RolloutArgs) -> Result<(), Failure> {
    if a.scenario.is_some() && a.system != SystemKind::Planar {
        return Err(Failure::Usage("--scenario applies to the planar system only".into()));
    }
    if a.trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let mut mpc = MpcConfig::benchmark();
    let mut settings = match &a.config {
        Some(p) => read_config(p)?,
        None => Vec::new(),
    };
    for s in &a.overrides {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got {s:?}")))?;
        settings.push((k.to_string(), v.to_string()));
    }
    for (k, v) in &settings {
        mpc.set(k, v).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    mpc.validate(a.system.control_dim()).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(x) = &a.start {
        if x.len() != a.system.state_dim() {
            return Err(Failure::Usage(format!("--start needs {} values", a.system.state_dim())));
        }
    }
    let task = TaskDefinition::load(&a.task)?;
    let req = RolloutRequest {
        system: a.system,
        scenario: a.scenario,
        trials: a.trials,
        seed: a.seed,
        duration: a.duration,
        mpc,
        start: a.start,
    };
    let trials = pipeline::run_trials(&task, &req)?;
    let ctx = EvalContext {
        mode: task.mode.to_string(),
        scenario: a.scenario.map(Scenario::for_task),
        true_task: None,
    };
    let rows = pipeline::write_trials(&a.out, &trials, &ctx)?;
    print!("{}", pipeline::metrics_to_csv(&rows));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let true_task = a.true_task.as_deref().map(TaskDefinition::load).transpose()?;
    let ctx = EvalContext {
        mode: a.mode,
        scenario: a.scenario.map(Scenario::for_task),
        true_task,
    };
    let rows = pipeline::eval_dir(&a.dir, &ctx)?;
    emit(a.out.as_deref(), &pipeline::metrics_to_csv(&rows))
}

fn compare(a: CompareArgs) -> Result<(), Failure> {
    let summary = pipeline::compare(&a.dirs)?;
    emit(a.out.as_deref(), &pipeline::summary_to_csv(&summary))
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), Failure> {
    if !(a.tick_rate > 0.0 && a.tick_rate.is_finite()) {
        return Err(Failure::Usage(format!("--tick-rate must be positive, got {}", a.tick_rate)));
    }
    let cfg = ServiceConfig {
        host: a.host,
        port: a.port,
        tick_rate: a.tick_rate,
        cors_origins: a.cors,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(ergodic_service::run(cfg, |addr| {
        use std::io::Write;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
    }))?;
    Ok(())
}
