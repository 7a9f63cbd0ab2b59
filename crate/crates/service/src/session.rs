//! One live simulation per session, ticked at a fixed rate with the latest
//! control held. All mutation goes through `&mut Session` behind the
//! registry lock; nothing here is async.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use ergodic_imitation::baselines::{held_step, PlanarTask};
use ergodic_imitation::demos::{Demonstration, Recorder, Source};
use ergodic_imitation::metrics::in_success_region;
use ergodic_imitation::mpc::RolloutResult;
use ergodic_imitation::pipeline::MetricsRow;
use ergodic_imitation::{ControlAffine, DemoSet, Label, System, SystemKind};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMsg {
    Control { u: Vec<f64> },
    StartRecording,
    StopRecording { label: Label },
    /// Advances a manually clocked session by `n` ticks (default 1).
    Tick { n: Option<usize> },
    CancelRollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    State {
        t: f64,
        x: Vec<f64>,
        u: Vec<f64>,
        /// Only defined for the cart-pole.
        in_success_region: Option<bool>,
        recording: bool,
        dropped_frames: u64,
    },
    RecordingStarted { t: f64 },
    Recorded { demo_id: String, samples: usize, duration: f64 },
    RolloutState { t: f64, x: Vec<f64>, u: Vec<f64> },
    RolloutDone { summary: RolloutSummary },
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub task_id: String,
    pub samples: usize,
    pub duration: f64,
    pub final_eps: f64,
    pub final_state: Vec<f64>,
    pub replans: usize,
    pub cancelled: bool,
    pub error: Option<String>,
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoInfo {
    pub id: String,
    pub label: Label,
    pub source: Source,
    pub samples: usize,
    pub duration: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionInfo {
    pub id: String,
    pub system: SystemKind,
    pub scenario: Option<PlanarTask>,
    pub tick_rate: f64,
    pub manual_clock: bool,
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub recording: bool,
    pub rollout_active: bool,
    pub dropped_frames: u64,
    pub demos: Vec<DemoInfo>,
    pub tasks: Vec<String>,
    pub last_rollout: Option<RolloutSummary>,
}

pub struct Session {
    pub id: String,
    pub system: SystemKind,
    pub scenario: Option<PlanarTask>,
    pub tick_rate: f64,
    pub manual_clock: bool,
    sys: System,
    ticks: u64,
    x: Vec<f64>,
    u: Vec<f64>,
    recorder: Option<Recorder>,
    pub demos: DemoSet,
    next_demo: usize,
    pub tasks: Vec<String>,
    rollout: Option<Arc<AtomicBool>>,
    pub last_rollout: Option<RolloutSummary>,
    pub last_result: Option<Arc<RolloutResult>>,
    dropped_frames: u64,
    tx: broadcast::Sender<ServerMsg>,
}

impl Session {
    pub fn new(id: String, system: SystemKind, scenario: Option<PlanarTask>, tick_rate: f64, manual_clock: bool) -> Self {
        let sys = system.build();
        let (tx, _) = broadcast::channel(1024);
        Self {
            id,
            system,
            scenario,
            tick_rate,
            manual_clock,
            x: sys.rest_state(),
            u: vec![0.0; sys.control_dim()],
            sys,
            ticks: 0,
            recorder: None,
            demos: DemoSet::new(system),
            next_demo: 0,
            tasks: Vec::new(),
            rollout: None,
            last_rollout: None,
            last_result: None,
            dropped_frames: 0,
            tx,
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ServerMsg> {
        self.tx.subscribe()
    }

    pub fn broadcast(&self, msg: ServerMsg) {
        // No subscribers is fine.
        let _ = self.tx.send(msg);
    }

    pub fn sender(&self) -> broadcast::Sender<ServerMsg> {
        self.tx.clone()
    }

    pub fn t(&self) -> f64 {
        self.ticks as f64 / self.tick_rate
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn is_recording(&self) -> bool {
        self.recorder.is_some()
    }

    pub fn rollout_active(&self) -> bool {
        self.rollout.is_some()
    }

    pub fn add_dropped(&mut self, n: u64) {
        self.dropped_frames += n;
    }

    pub fn state_msg(&self) -> ServerMsg {
        ServerMsg::State {
            t: self.t(),
            x: self.x.clone(),
            u: self.u.clone(),
            in_success_region: (self.system == SystemKind::Cartpole).then(|| in_success_region(&self.x)),
            recording: self.is_recording(),
            dropped_frames: self.dropped_frames,
        }
    }

    /// Advances one period. The sim is frozen while a rollout plays back.
    pub fn tick(&mut self) {
        if self.rollout.is_none() {
            match held_step(&self.sys, &self.x, &self.u, 1.0 / self.tick_rate) {
                Ok(x) => {
                    self.ticks += 1;
                    self.x = x;
                    let t = self.t();
                    if let Some(rec) = &mut self.recorder {
                        if let Err(e) = rec.push(t, &self.x) {
                            self.broadcast(ServerMsg::Error { message: e.to_string() });
                        }
                    }
                }
                Err(e) => {
                    self.x = self.sys.rest_state();
                    self.u.iter_mut().for_each(|v| *v = 0.0);
                    self.broadcast(ServerMsg::Error {
                        message: format!("{e}; simulation reset to rest"),
                    });
                }
            }
        }
        self.broadcast(self.state_msg());
    }

    pub fn set_control(&mut self, u: &[f64]) -> Result<(), String> {
        if u.len() != self.u.len() {
            return Err(format!("control has {} entries, {} expects {}", u.len(), self.system, self.u.len()));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err("control must be finite".into());
        }
        self.u.copy_from_slice(u);
        self.sys.clamp_control(&mut self.u);
        Ok(())
    }

    pub fn start_recording(&mut self) -> Result<f64, String> {
        if self.rollout.is_some() {
            return Err("cannot record during a rollout".into());
        }
        if self.recorder.is_some() {
            return Err("already recording".into());
        }
        let mut rec = Recorder::new(self.system);
        rec.push(self.t(), &self.x).map_err(|e| e.to_string())?;
        self.recorder = Some(rec);
        Ok(self.t())
    }

    pub fn stop_recording(&mut self, label: Label) -> Result<DemoInfo, String> {
        let rec = self.recorder.take().ok_or("not recording")?;
        let id = format!("{}-demo-{}", self.id, self.next_demo);
        let demo = rec.finish(id, label, Source::Human).map_err(|e| e.to_string())?;
        self.next_demo += 1;
        let info = demo_info(&demo);
        self.demos.push(demo).map_err(|e| e.to_string())?;
        Ok(info)
    }

    /// Applies one client message. Returns the reply for the sender only;
    /// state updates go out on the broadcast channel.
    pub fn handle(&mut self, msg: ClientMsg) -> Option<ServerMsg> {
        let err = |message: String| Some(ServerMsg::Error { message });
        match msg {
            ClientMsg::Control { u } => self.set_control(&u).err().and_then(err),
            ClientMsg::StartRecording => match self.start_recording() {
                Ok(t) => Some(ServerMsg::RecordingStarted { t }),
                Err(e) => err(e),
            },
            ClientMsg::StopRecording { label } => match self.stop_recording(label) {
                Ok(d) => Some(ServerMsg::Recorded {
                    demo_id: d.id,
                    samples: d.samples,
                    duration: d.duration,
                }),
                Err(e) => err(e),
            },
            ClientMsg::Tick { n } => {
                if !self.manual_clock {
                    return err("tick messages are only accepted by manually clocked sessions".into());
                }
                for _ in 0..n.unwrap_or(1) {
                    self.tick();
                }
                None
            }
            ClientMsg::CancelRollout => match &self.rollout {
                Some(flag) => {
                    flag.store(true, Ordering::Relaxed);
                    None
                }
                None => err("no rollout is running".into()),
            },
        }
    }

    /// Claims the rollout slot and returns its cancel flag.
    pub fn begin_rollout(&mut self) -> Result<Arc<AtomicBool>, String> {
        if self.rollout.is_some() {
            return Err("a rollout is already running".into());
        }
        if self.recorder.is_some() {
            return Err("cannot start a rollout while recording".into());
        }
        let flag = Arc::new(AtomicBool::new(false));
        self.rollout = Some(flag.clone());
        Ok(flag)
    }

    pub fn cancel_rollout(&self) -> bool {
        match &self.rollout {
            Some(flag) => {
                flag.store(true, Ordering::Relaxed);
                true
            }
            None => false,
        }
    }

    pub fn end_rollout(&mut self, summary: RolloutSummary, result: Option<Arc<RolloutResult>>) {
        self.rollout = None;
        self.last_rollout = Some(summary.clone());
        if result.is_some() {
            self.last_result = result;
        }
        self.broadcast(ServerMsg::RolloutDone { summary });
    }

    /// Adds imported demos, rejecting id clashes.
    pub fn import(&mut self, set: DemoSet) -> Result<Vec<String>, String> {
        if set.system != self.system {
            return Err(format!("demos are for {}, session runs {}", set.system, self.system));
        }
        for d in &set.demos {
            if self.demos.demos.iter().any(|e| e.id == d.id) {
                return Err(format!("demo id {:?} already exists", d.id));
            }
        }
        let ids = set.demos.iter().map(|d| d.id.clone()).collect();
        for d in set.demos {
            self.demos.push(d).map_err(|e| e.to_string())?;
        }
        Ok(ids)
    }

    pub fn remove_demo(&mut self, id: &str) -> bool {
        let before = self.demos.demos.len();
        self.demos.demos.retain(|d| d.id != id);
        self.demos.demos.len() != before
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            id: self.id.clone(),
            system: self.system,
            scenario: self.scenario,
            tick_rate: self.tick_rate,
            manual_clock: self.manual_clock,
            t: self.t(),
            x: self.x.clone(),
            u: self.u.clone(),
            recording: self.is_recording(),
            rollout_active: self.rollout_active(),
            dropped_frames: self.dropped_frames,
            demos: self.demos.demos.iter().map(demo_info).collect(),
            tasks: self.tasks.clone(),
            last_rollout: self.last_rollout.clone(),
        }
    }
}

fn demo_info(d: &Demonstration) -> DemoInfo {
    DemoInfo {
        id: d.id.clone(),
        label: d.label,
        source: d.source,
        samples: d.trajectory.len(),
        duration: d.duration(),
    }
}
