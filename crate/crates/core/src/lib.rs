//! Extremum-seeking indirect adaptive control for input-output linearizable
//! systems, with a two-link manipulator benchmark.
//!
//! The pieces, bottom up:
//!
//! * [`manipulator`]: rigid-body dynamics and uncertainty injections.
//! * [`linearizer`]: error coordinates and the Lyapunov certificate of the
//!   linearized error dynamics.
//! * [`control`]: nominal linearizing control plus the three ISS robust terms.
//! * [`estimator`]: multiparametric extremum-seeking laws and the tracking cost.
//! * [`sim`]: RK4 closed loop and the outer learning iteration.
//! * [`scenario`]: named presets and config resolution.
//! * [`validation`]: the invariant suite behind `es-adapt validate`.

// negated float comparisons below are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod estimator;
pub mod integrate;
pub mod linearizer;
pub mod manipulator;
pub mod scenario;
pub mod sim;
pub mod validation;

pub use control::{RobustCase, SignMode};
pub use estimator::{CostWeights, MesConfig, MesState, MesVariant};
pub use linearizer::{build_error_dynamics, CertifiedErrorDynamics, ControllerGains};
pub use manipulator::{ManipulatorParams, PlantState, UncertaintySpec, Waveform};
pub use scenario::{parse_config, resolve_config, ConfigError, ScenarioPreset};
pub use sim::{run_episode, run_mes_loop, EpisodeTrace, IterationRecord, MesRun, SimConfig, SimError};
