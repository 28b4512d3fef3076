//! Closed-loop simulation of the manipulator under the ISS controllers and
//! the outer extremum-seeking iteration over repeated tracking cycles.
//!
//! Each cycle restarts the arm from the configured initial state, tracks the
//! sigmoid reference for `t_f` seconds with classical RK4 at step `dt`, and
//! scores the run with the tracking cost. Discrete estimators update between
//! cycles; continuous ones are integrated alongside the plant.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    nominal_control, robust_control_case1, robust_control_case2, robust_control_case3, spectral_norm, total_control,
    ControlError, LinearizedPlantView, ReferenceSignal, RobustCase, SignMode,
};
use crate::estimator::{
    self, continuous_mes_output, continuous_rhs, end_of_cycle, evaluate_cost, CostWeights, EstimatorError, MesConfig,
    MesState, MesVariant,
};
use crate::integrate::Rk4;
use crate::linearizer::{build_error_dynamics, pack_error_state, CertifiedErrorDynamics, ControllerGains, LinearizerError};
use crate::manipulator::{
    coriolis_matrix, gravity_vector, inertia_matrix, invert_inertia, ManipulatorError, ManipulatorParams, PlantState,
    StateTerm, UncertaintySpec, DEFAULT_SINGULAR_TOLERANCE,
};

/// Any state entry above this magnitude aborts the episode.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },
    #[error(transparent)]
    Linearizer(#[from] LinearizerError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Manipulator(#[from] ManipulatorError),
    #[error("numerical blowup at t = {t} s: state entry {value:e} (threshold {BLOWUP_THRESHOLD:e}); reduce dt or enable sign smoothing")]
    NumericalBlowup { t: f64, value: f64 },
    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<SimError>,
    },
}

impl SimError {
    fn invalid(key: &str, reason: impl Into<String>) -> Self {
        SimError::InvalidConfig {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    /// Innermost error, skipping iteration context.
    pub fn root(&self) -> &SimError {
        match self {
            SimError::Iteration { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for configuration problems, false for failures during integration.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self.root(),
            SimError::InvalidConfig { .. } | SimError::Linearizer(_) | SimError::Estimator(_)
        ) || matches!(self.root(), SimError::Manipulator(ManipulatorError::InvalidParameter { .. }))
            || matches!(
                self.root(),
                SimError::Manipulator(
                    ManipulatorError::EtaBoundViolated { .. }
                        | ManipulatorError::InvalidBound(_)
                        | ManipulatorError::NonFiniteWaveform
                )
            )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// `q_id(t) = 1 / (1 + e^{−t})` on both joints.
    #[default]
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlantModel {
    #[default]
    Manipulator,
    /// No plant: each cycle's cost is `‖Δ̂ − target‖²`.
    SyntheticQuadratic,
}

/// Timing, initial condition and plant selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub dt: f64,
    pub t_f: f64,
    pub iterations: usize,
    pub q0: [f64; 2],
    pub qdot0: [f64; 2],
    pub reference: ReferenceKind,
    pub plant: PlantModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSection {
    /// `k[i] = [K^i_1, K^i_2]` for joint `i`.
    pub k: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustChoice {
    None,
    Case1,
    Case2,
    Case3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub robust_case: RobustChoice,
    /// Bound on `‖η(t)‖` used by the Case 3 controller.
    pub c1: f64,
    /// `0` for the exact signum, otherwise the boundary-layer width ε of `sat(x/ε)`.
    pub sign_smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MesSection {
    pub variant: MesVariant,
    pub amplitudes: Vec<f64>,
    pub frequencies: Vec<f64>,
    /// Adaptation gains `k_i` of the dynamic laws.
    pub gains: Vec<f64>,
    pub phase_aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub target: Vec<f64>,
}

/// Fully resolved scenario: everything one MES run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub sim: RunSection,
    pub plant: ManipulatorParams,
    pub gains: GainSection,
    pub controller: ControllerSection,
    pub uncertainty: UncertaintySpec,
    pub mes: MesSection,
    pub cost: CostWeights,
    pub synthetic: SyntheticSection,
}

impl SimConfig {
    pub fn steps(&self) -> usize {
        (self.sim.t_f / self.sim.dt).round() as usize
    }

    pub fn initial_state(&self) -> PlantState {
        PlantState::new(self.sim.q0, self.sim.qdot0, 0.0)
    }

    pub fn controller_gains(&self) -> Result<ControllerGains, SimError> {
        ControllerGains::new(self.gains.k.clone()).map_err(|e| SimError::invalid("gains.k", e.to_string()))
    }

    pub fn robust_case(&self) -> Option<RobustCase> {
        match self.controller.robust_case {
            RobustChoice::None => None,
            RobustChoice::Case1 => Some(RobustCase::Case1),
            RobustChoice::Case2 => Some(RobustCase::Case2),
            RobustChoice::Case3 => Some(RobustCase::Case3 { c1: self.controller.c1 }),
        }
    }

    pub fn sign_mode(&self) -> SignMode {
        SignMode::from_width(self.controller.sign_smoothing)
    }

    pub fn mes_config(&self) -> Result<MesConfig, SimError> {
        let m = &self.mes;
        Ok(MesConfig::new(
            m.amplitudes.clone(),
            m.frequencies.clone(),
            m.gains.clone(),
            self.sim.t_f,
            m.variant,
        )?
        .with_phase_alignment(m.phase_aligned))
    }

    pub fn channels(&self) -> usize {
        self.mes.amplitudes.len()
    }

    /// Checks every invariant; errors name the offending key.
    pub fn validate(&self) -> Result<(), SimError> {
        let s = &self.sim;
        if !(s.dt.is_finite() && s.dt > 0.0) {
            return Err(SimError::invalid("sim.dt", format!("must be finite and positive (got {})", s.dt)));
        }
        if !(s.t_f.is_finite() && s.t_f > 0.0) {
            return Err(SimError::invalid("sim.t_f", format!("must be finite and positive (got {})", s.t_f)));
        }
        let n = (s.t_f / s.dt).round();
        if n < 1.0 || (n * s.dt - s.t_f).abs() > 4.0 * n * f64::EPSILON * s.t_f {
            return Err(SimError::invalid(
                "sim.dt",
                format!("dt = {} does not divide t_f = {}", s.dt, s.t_f),
            ));
        }
        if s.iterations < 1 {
            return Err(SimError::invalid("sim.iterations", "must be at least 1"));
        }
        if !s.q0.iter().chain(&s.qdot0).all(|v| v.is_finite()) {
            return Err(SimError::invalid("sim.q0", "initial state must be finite"));
        }
        self.plant.validate().map_err(|e| SimError::invalid("plant", e.to_string()))?;

        let gains = self.controller_gains()?;
        if gains.relative_degrees() != [2, 2] {
            return Err(SimError::invalid(
                "gains.k",
                "the manipulator has two outputs of relative degree 2: expected two rows of two gains",
            ));
        }
        gains
            .check_hurwitz()
            .map_err(|e| SimError::invalid("gains.k", e.to_string()))?;

        let c = &self.controller;
        if !(c.sign_smoothing.is_finite() && c.sign_smoothing >= 0.0) {
            return Err(SimError::invalid("controller.sign_smoothing", "must be finite and non-negative"));
        }
        if c.robust_case == RobustChoice::Case3 && !(c.c1.is_finite() && c.c1 > 0.0) {
            return Err(SimError::invalid("controller.c1", format!("must be positive for case3 (got {})", c.c1)));
        }

        self.uncertainty
            .validate()
            .map_err(|e| SimError::invalid("uncertainty", e.to_string()))?;

        let mes = self
            .mes_config()
            .map_err(|e| SimError::invalid(&mes_key(&e), e.root().to_string()))?;
        let p = mes.channels();
        if self.sim.plant == PlantModel::SyntheticQuadratic {
            if self.synthetic.target.len() != p {
                return Err(SimError::invalid(
                    "synthetic.target",
                    format!("has {} entries for {p} estimator channels", self.synthetic.target.len()),
                ));
            }
        } else {
            match c.robust_case {
                RobustChoice::Case1 if p != 2 => {
                    return Err(SimError::invalid("mes.amplitudes", "case1 estimates a 2-vector: expected 2 channels"))
                }
                RobustChoice::Case2 | RobustChoice::Case3 if p != 2 && p != 4 => {
                    return Err(SimError::invalid(
                        "mes.amplitudes",
                        "case2/case3 estimate a 2x2 matrix: expected 2 (diagonal) or 4 (row-major) channels",
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn mes_key(e: &SimError) -> String {
    match e.root() {
        SimError::Estimator(EstimatorError::LengthMismatch { field, .. } | EstimatorError::NonPositive { field, .. }) => {
            format!("mes.{field}")
        }
        SimError::Estimator(EstimatorError::DuplicateFrequency { .. } | EstimatorError::ResonantFrequencies { .. }) => {
            "mes.frequencies".into()
        }
        SimError::Estimator(EstimatorError::InvalidCycle(_)) => "sim.t_f".into(),
        _ => "mes".into(),
    }
}

/// Desired joint trajectory and its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub q: Vector2<f64>,
    pub qdot: Vector2<f64>,
    pub qddot: Vector2<f64>,
}

/// Sigmoid reference `q_id = 1 / (1 + e^{−t})`, identical on both joints.
pub fn reference_signal(t: f64) -> ReferenceSample {
    let s = 1.0 / (1.0 + (-t).exp());
    let sd = s * (1.0 - s);
    let sdd = sd * (1.0 - 2.0 * s);
    ReferenceSample {
        q: Vector2::new(s, s),
        qdot: Vector2::new(sd, sd),
        qddot: Vector2::new(sdd, sdd),
    }
}

/// Outputs of one closed-loop evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopEval {
    pub qddot: Vector2<f64>,
    pub tau: Vector2<f64>,
    pub z: DVector<f64>,
}

/// Controller plus plant for one scenario, with the error certificate precomputed.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    params: ManipulatorParams,
    uncertainty: UncertaintySpec,
    gains: ControllerGains,
    dynamics: CertifiedErrorDynamics,
    robust: Option<RobustCase>,
    sign: SignMode,
}

impl ClosedLoop {
    pub fn new(cfg: &SimConfig) -> Result<Self, SimError> {
        let gains = cfg.controller_gains()?;
        let dynamics = build_error_dynamics(&gains, &[2, 2])?;
        Ok(Self {
            params: cfg.plant,
            uncertainty: cfg.uncertainty.clone(),
            gains,
            dynamics,
            robust: cfg.robust_case(),
            sign: cfg.sign_mode(),
        })
    }

    pub fn dynamics(&self) -> &CertifiedErrorDynamics {
        &self.dynamics
    }

    /// Evaluates controller and plant.
    ///
    /// `t_local` drives the reference, `t_global` the uncertainty; `delta_hat`
    /// is the current estimate in the layout of the configured robust case.
    pub fn evaluate(
        &self,
        t_local: f64,
        t_global: f64,
        q: &Vector2<f64>,
        qdot: &Vector2<f64>,
        delta_hat: &[f64],
    ) -> Result<LoopEval, SimError> {
        let p = &self.params;
        let r = reference_signal(t_local);
        let h = inertia_matrix(p, q);
        let h_inv = invert_inertia(&h, q, DEFAULT_SINGULAR_TOLERANCE)?;
        let g = gravity_vector(p, q);
        let bias = coriolis_matrix(p, q, qdot) * qdot + g;
        let b = -(h_inv * bias);

        let mut view = LinearizedPlantView::from_inverse(
            DVector::from_column_slice(b.as_slice()),
            DMatrix::from_column_slice(2, 2, h.as_slice()),
        )?;
        let reference = ReferenceSignal::new(vec![
            vec![r.q[0], r.qdot[0], r.qddot[0]],
            vec![r.q[1], r.qdot[1], r.qddot[1]],
        ]);
        let outputs = vec![vec![q[0], qdot[0]], vec![q[1], qdot[1]]];
        let u_n = nominal_control(&view, &self.gains, &reference, &outputs)?;
        let z = pack_error_state(&outputs, &reference.derivatives)?.z;

        let u = match self.robust {
            None => u_n,
            Some(RobustCase::Case1) => {
                let u_r = robust_control_case1(&view, &self.dynamics, &z, &DVector::from_column_slice(delta_hat))?;
                total_control(&u_n, &u_r)?
            }
            Some(RobustCase::Case2) => {
                view = view.with_bound_carrier(DVector::from_column_slice(g.as_slice()));
                let norm = spectral_norm(&estimate_matrix(delta_hat));
                let u_r = robust_control_case2(&view, &self.dynamics, &z, norm, self.sign)?;
                total_control(&u_n, &u_r)?
            }
            Some(RobustCase::Case3 { c1 }) => {
                let state_term = match &self.uncertainty {
                    UncertaintySpec::Mixed { state_term, .. } => state_term.eval(p, q),
                    _ => StateTerm::Gravity.eval(p, q),
                };
                view = view.with_state_term(DVector::from_column_slice(state_term.as_slice()));
                let u_r = robust_control_case3(&view, &self.dynamics, &z, &estimate_matrix(delta_hat), c1, self.sign)?;
                total_control(&u_n, &u_r)?
            }
        };
        let tau = Vector2::new(u[0], u[1]);
        let qddot = h_inv * (tau - bias) + self.uncertainty.acceleration(p, q, t_global);
        Ok(LoopEval { qddot, tau, z })
    }
}

/// Estimate vector as a 2x2 matrix: two entries fill the diagonal, four are row-major.
pub fn estimate_matrix(delta_hat: &[f64]) -> DMatrix<f64> {
    match delta_hat.len() {
        4 => DMatrix::from_row_slice(2, 2, delta_hat),
        n => DMatrix::from_diagonal(&DVector::from_iterator(n, delta_hat.iter().copied())),
    }
}

/// Uniformly sampled record of one tracking cycle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeTrace {
    pub t: Vec<f64>,
    pub q: Vec<Vector2<f64>>,
    pub qdot: Vec<Vector2<f64>>,
    pub qd: Vec<Vector2<f64>>,
    pub qdot_d: Vec<Vector2<f64>>,
    pub qddot_d: Vec<Vector2<f64>>,
    pub tau: Vec<Vector2<f64>>,
    pub z_norm: Vec<f64>,
}

impl EpisodeTrace {
    fn with_capacity(n: usize) -> Self {
        Self {
            t: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            qdot: Vec::with_capacity(n),
            qd: Vec::with_capacity(n),
            qdot_d: Vec::with_capacity(n),
            qddot_d: Vec::with_capacity(n),
            tau: Vec::with_capacity(n),
            z_norm: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn max_z(&self) -> f64 {
        self.z_norm.iter().copied().fold(0.0, f64::max)
    }

    pub fn final_state(&self) -> Option<PlantState> {
        let n = self.len().checked_sub(1)?;
        Some(PlantState {
            q: self.q[n],
            qdot: self.qdot[n],
            t: self.t[n],
        })
    }

    fn push(&mut self, t: f64, q: Vector2<f64>, qdot: Vector2<f64>, eval: &LoopEval) {
        let r = reference_signal(t);
        self.t.push(t);
        self.q.push(q);
        self.qdot.push(qdot);
        self.qd.push(r.q);
        self.qdot_d.push(r.qdot);
        self.qddot_d.push(r.qddot);
        self.tau.push(eval.tau);
        self.z_norm.push(eval.z.norm());
    }
}

/// One outer-loop iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub j: f64,
    /// Estimate in effect at the start of the cycle.
    pub delta_hat: Vec<f64>,
    /// True parameters, averaged over the cycle.
    pub delta_true: Vec<f64>,
    pub max_z: f64,
}

/// Result of [`run_mes_loop`].
#[derive(Debug, Clone, PartialEq)]
pub struct MesRun {
    pub records: Vec<IterationRecord>,
    pub first_trace: EpisodeTrace,
    pub last_trace: EpisodeTrace,
    pub final_state: MesState,
}

enum EstimateSource<'a> {
    Fixed(&'a [f64]),
    Continuous {
        cfg: &'a MesConfig,
        state: &'a mut MesState,
        j: f64,
    },
}

fn check_finite(t: f64, y: &[f64]) -> Result<(), SimError> {
    match y.iter().find(|v| !(v.is_finite() && v.abs() <= BLOWUP_THRESHOLD)) {
        Some(&value) => Err(SimError::NumericalBlowup { t, value }),
        None => Ok(()),
    }
}

fn simulate_cycle(
    closed: &ClosedLoop,
    cfg: &SimConfig,
    cycle: usize,
    initial: &PlantState,
    mut source: EstimateSource<'_>,
) -> Result<EpisodeTrace, SimError> {
    let dt = cfg.sim.dt;
    let steps = cfg.steps();
    let t0 = cycle as f64 * cfg.sim.t_f;

    let est_len = match &source {
        EstimateSource::Fixed(_) => 0,
        EstimateSource::Continuous { cfg, .. } => cfg.channels(),
    };
    let mut y = vec![initial.q[0], initial.q[1], initial.qdot[0], initial.qdot[1]];
    if let EstimateSource::Continuous { cfg: mes, state, .. } = &source {
        y.extend_from_slice(state.continuous_state(mes));
    }

    let mut estimate = vec![0.0; est_len];
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), SimError> {
        let q = Vector2::new(y[0], y[1]);
        let qdot = Vector2::new(y[2], y[3]);
        let eval = match &source {
            EstimateSource::Fixed(dh) => closed.evaluate(t, t0 + t, &q, &qdot, dh)?,
            EstimateSource::Continuous { cfg: mes, j, .. } => {
                current_estimate(mes, &y[4..], t0 + t, &mut estimate);
                continuous_rhs(mes, t0 + t, *j, &mut dy[4..])?;
                closed.evaluate(t, t0 + t, &q, &qdot, &estimate)?
            }
        };
        dy[0] = qdot[0];
        dy[1] = qdot[1];
        dy[2] = eval.qddot[0];
        dy[3] = eval.qddot[1];
        Ok(())
    };

    let mut trace = EpisodeTrace::with_capacity(steps + 1);
    let mut rk = Rk4::new(y.len());
    let mut record_estimate = vec![0.0; est_len];
    for n in 0..=steps {
        let t = n as f64 * dt;
        if n > 0 {
            rk.step(&mut rhs, (n - 1) as f64 * dt, &mut y, dt)?;
            check_finite(t, &y)?;
        }
        // the recorded torque is the one applied at the grid point
        let q = Vector2::new(y[0], y[1]);
        let qdot = Vector2::new(y[2], y[3]);
        let eval = match &source {
            EstimateSource::Fixed(dh) => closed.evaluate(t, t0 + t, &q, &qdot, dh)?,
            EstimateSource::Continuous { cfg: mes, .. } => {
                current_estimate(mes, &y[4..], t0 + t, &mut record_estimate);
                closed.evaluate(t, t0 + t, &q, &qdot, &record_estimate)?
            }
        };
        trace.push(t, q, qdot, &eval);
    }

    if let EstimateSource::Continuous { cfg: mes, state, .. } = &mut source {
        state.set_continuous_state(mes, &y[4..], t0 + cfg.sim.t_f);
    }
    Ok(trace)
}

fn current_estimate(cfg: &MesConfig, integrated: &[f64], t: f64, out: &mut [f64]) {
    match cfg.variant() {
        MesVariant::ContinuousMes => out.copy_from_slice(&continuous_mes_output(cfg, integrated, t)),
        _ => out.copy_from_slice(integrated),
    }
}

/// Simulates one cycle with the estimate held fixed.
///
/// `cycle` only offsets the global time seen by time-varying uncertainties.
pub fn run_episode(cfg: &SimConfig, delta_hat: &[f64], cycle: usize) -> Result<EpisodeTrace, SimError> {
    cfg.validate()?;
    if cfg.sim.plant != PlantModel::Manipulator {
        return Err(SimError::invalid("sim.plant", "episodes need the manipulator plant"));
    }
    if delta_hat.len() != cfg.channels() {
        return Err(SimError::invalid(
            "delta_hat",
            format!("has {} entries for {} estimator channels", delta_hat.len(), cfg.channels()),
        ));
    }
    let closed = ClosedLoop::new(cfg)?;
    simulate_cycle(&closed, cfg, cycle, &cfg.initial_state(), EstimateSource::Fixed(delta_hat))
}

fn cycle_average_truth(cfg: &SimConfig, cycle: usize, trace: &EpisodeTrace) -> Vec<f64> {
    let p = cfg.channels();
    if cfg.sim.plant == PlantModel::SyntheticQuadratic {
        return cfg.synthetic.target.clone();
    }
    let t0 = cycle as f64 * cfg.sim.t_f;
    let samples: Vec<Vec<f64>> = trace
        .t
        .iter()
        .map(|t| cfg.uncertainty.true_parameters(t0 + t, p))
        .collect();
    (0..p)
        .map(|i| {
            // averaging the deviation from the first sample keeps constants exact
            let base = samples[0][i];
            let f: Vec<f64> = samples.iter().map(|s| s[i] - base).collect();
            base + estimator::trapezoid(&trace.t, &f) / cfg.sim.t_f
        })
        .collect()
}

fn synthetic_cost(target: &[f64], delta_hat: &[f64]) -> f64 {
    target.iter().zip(delta_hat).map(|(t, d)| (d - t) * (d - t)).sum()
}

/// Runs `cfg.sim.iterations` tracking cycles, updating the estimate after each.
pub fn run_mes_loop(cfg: &SimConfig) -> Result<MesRun, SimError> {
    cfg.validate()?;
    let mes = cfg.mes_config()?;
    let p = mes.channels();
    let mut state = MesState::zeros(p);
    if mes.variant() == MesVariant::ContinuousMes {
        state.delta_hat = continuous_mes_output(&mes, &state.x, 0.0);
    }
    let closed = match cfg.sim.plant {
        PlantModel::Manipulator => Some(ClosedLoop::new(cfg)?),
        PlantModel::SyntheticQuadratic => None,
    };
    let initial = cfg.initial_state();

    let mut records = Vec::with_capacity(cfg.sim.iterations);
    let mut first_trace = None;
    let mut last_trace = EpisodeTrace::default();
    let mut held_cost = 0.0;
    for k in 0..cfg.sim.iterations {
        let wrap = |e: SimError| SimError::Iteration {
            iteration: k,
            source: Box::new(e),
        };
        let used = state.delta_hat.clone();
        let (j, trace) = match &closed {
            Some(closed) => {
                let trace = if mes.variant().is_discrete() {
                    simulate_cycle(closed, cfg, k, &initial, EstimateSource::Fixed(&used))
                } else {
                    simulate_cycle(
                        closed,
                        cfg,
                        k,
                        &initial,
                        EstimateSource::Continuous {
                            cfg: &mes,
                            state: &mut state,
                            j: held_cost,
                        },
                    )
                }
                .map_err(wrap)?;
                (evaluate_cost(&trace, cfg.cost).map_err(|e| wrap(e.into()))?, trace)
            }
            None => {
                let target = &cfg.synthetic.target;
                let j = synthetic_cost(target, &used);
                if !mes.variant().is_discrete() {
                    integrate_static_map(cfg, &mes, &mut state, k, target).map_err(wrap)?;
                }
                (j, EpisodeTrace::default())
            }
        };
        if !j.is_finite() {
            return Err(wrap(SimError::NumericalBlowup {
                t: cfg.sim.t_f,
                value: j,
            }));
        }
        records.push(IterationRecord {
            k,
            j,
            delta_hat: used,
            delta_true: cycle_average_truth(cfg, k, &trace),
            max_z: trace.max_z(),
        });
        state = end_of_cycle(&state, &mes, j).map_err(|e| wrap(e.into()))?;
        held_cost = j;
        if first_trace.is_none() {
            first_trace = Some(trace.clone());
        }
        last_trace = trace;
    }
    Ok(MesRun {
        records,
        first_trace: first_trace.unwrap_or_default(),
        last_trace,
        final_state: state,
    })
}

/// Continuous laws on the synthetic cost, which is evaluated at every stage.
fn integrate_static_map(
    cfg: &SimConfig,
    mes: &MesConfig,
    state: &mut MesState,
    cycle: usize,
    target: &[f64],
) -> Result<(), SimError> {
    let dt = cfg.sim.dt;
    let t0 = cycle as f64 * cfg.sim.t_f;
    let p = mes.channels();
    let mut y = state.continuous_state(mes).to_vec();
    let mut estimate = vec![0.0; p];
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), SimError> {
        current_estimate(mes, y, t, &mut estimate);
        let j = synthetic_cost(target, &estimate);
        continuous_rhs(mes, t, j, dy)?;
        Ok(())
    };
    let mut rk = Rk4::new(p);
    for n in 0..cfg.steps() {
        let t = t0 + n as f64 * dt;
        rk.step(&mut rhs, t, &mut y, dt)?;
        check_finite(t + dt, &y)?;
    }
    state.set_continuous_state(mes, &y, t0 + cfg.sim.t_f);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioPreset;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reference_at_origin() {
        let r = reference_signal(0.0);
        assert_eq!(r.q, Vector2::new(0.5, 0.5));
        assert_eq!(r.qdot, Vector2::new(0.25, 0.25));
        assert_eq!(r.qddot, Vector2::zeros());
    }

    #[test]
    fn reference_limits() {
        let r = reference_signal(60.0);
        assert_abs_diff_eq!(r.q[0], 1.0, epsilon = 1e-15);
        assert!(r.qdot[0] < 1e-20);
        assert_eq!(r.q[0], r.q[1]);
    }

    #[test]
    fn reference_derivatives_match_finite_differences() {
        let h = 1e-5;
        for t in [0.3, 1.0, 2.5] {
            let r = reference_signal(t);
            let fd = (reference_signal(t + h).q - reference_signal(t - h).q) / (2.0 * h);
            let fdd = (reference_signal(t + h).qdot - reference_signal(t - h).qdot) / (2.0 * h);
            assert_abs_diff_eq!(r.qdot, fd, epsilon = 1e-9);
            assert_abs_diff_eq!(r.qddot, fdd, epsilon = 1e-9);
        }
    }

    #[test]
    fn grid_has_expected_length() {
        let mut cfg = ScenarioPreset::Nominal.config();
        cfg.sim.dt = 0.01;
        let trace = run_episode(&cfg, &[0.0, 0.0], 0).unwrap();
        assert_eq!(trace.len(), 401);
        assert_eq!(*trace.t.last().unwrap(), 4.0);
    }

    #[test]
    fn validation_rejects_bad_timing() {
        let mut cfg = ScenarioPreset::Nominal.config();
        cfg.sim.dt = 0.003;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, SimError::InvalidConfig { ref key, .. } if key == "sim.dt"));
        cfg.sim.dt = 1e-3;
        cfg.sim.iterations = 0;
        assert!(matches!(cfg.validate(), Err(SimError::InvalidConfig { ref key, .. }) if key == "sim.iterations"));
    }

    #[test]
    fn validation_names_duplicate_frequency() {
        let mut cfg = ScenarioPreset::StateDepCase2.config();
        cfg.mes.frequencies = vec![7.4, 7.4];
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, SimError::InvalidConfig { ref key, .. } if key == "mes.frequencies"), "{err}");
        assert!(err.to_string().contains("distinct"));
    }

    #[test]
    fn unstable_gains_are_config_errors() {
        let mut cfg = ScenarioPreset::Nominal.config();
        cfg.gains.k = vec![vec![-1.0, 1.0], vec![1.0, 1.0]];
        let err = cfg.validate().unwrap_err();
        assert!(err.is_config_error());
        assert!(err.to_string().contains("gains.k"));
    }

    #[test]
    fn coarse_step_on_stiff_case2_reports_blowup() {
        let mut cfg = ScenarioPreset::StateDepCase2.config();
        cfg.sim.dt = 1e-3;
        let err = run_episode(&cfg, &[0.0, 0.0], 0).unwrap_err();
        assert!(matches!(err, SimError::NumericalBlowup { .. }), "{err}");
        assert!(!err.is_config_error());
    }

    #[test]
    fn single_iteration_leaves_initial_dither() {
        let mut cfg = ScenarioPreset::Nominal.config();
        cfg.sim.iterations = 1;
        let run = run_mes_loop(&cfg).unwrap();
        assert_eq!(run.records.len(), 1);
        assert_eq!(run.records[0].delta_hat, vec![0.0, 0.0]);
        // zero-error episode: J ≈ 0 so x stays ≈ 0 and Δ̂ ≈ −a
        assert_abs_diff_eq!(run.final_state.delta_hat[0], -0.05, epsilon = 1e-9);
        assert_abs_diff_eq!(run.final_state.delta_hat[1], -0.04, epsilon = 1e-9);
    }

    #[test]
    fn estimate_matrix_layouts() {
        assert_eq!(estimate_matrix(&[1.0, 2.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        assert_eq!(estimate_matrix(&[1.0, 2.0, 3.0, 4.0]), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }
}
