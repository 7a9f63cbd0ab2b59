//! Ergodic imitation.
//!
//! Tasks are represented as spatial distributions over a projection of the
//! state space, stored as cosine Fourier coefficients on a box domain.
//! Labeled demonstrations are fused into a task definition by a signed,
//! length-normalized weighted average of their trajectory coefficients, and a
//! receding-horizon ergodic controller reproduces the skill by driving the
//! time-averaged statistics of the realized trajectory toward the learned
//! distribution.
//!
//! Two benchmark systems are provided: a direct-acceleration cart-pole and a
//! planar double integrator standing in for an arm end-effector.

pub mod baselines;
pub mod demos;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod mpc;
pub mod pipeline;
pub mod spectral;
pub mod task;
pub mod trajectory;

pub use demos::{DemoSet, Demonstration, Label, Recorder, Source};
pub use dynamics::{CartPole, ControlAffine, Planar, SoftBox, System, SystemKind};
pub use error::{Error, Result};
pub use mpc::{ErgodicController, Memory, MpcConfig, RolloutResult};
pub use spectral::{CoefficientSet, Domain, FrequencyWeights, MultiIndex};
pub use task::{FusionConfig, FusionMode, TaskDefinition};
pub use trajectory::Trajectory;
