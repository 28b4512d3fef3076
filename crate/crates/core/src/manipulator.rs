//! Two-link planar manipulator.
//!
//! Rigid-body model `H(q) q̈ + C(q, q̇) q̇ + G(q) = τ` with an additive
//! acceleration-level uncertainty `Δb`, so the simulated plant is
//!
//! ```text
//! q̈ = H⁻¹(q) τ − H⁻¹(q) [C(q, q̇) q̇ + G(q)] + Δb
//! ```
//!
//! All functions here are pure; parameters and uncertainty descriptors are
//! plain values that can be shared between concurrently running episodes.

use nalgebra::{Matrix2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default tolerance on `|det H|` below which the inertia matrix is treated as singular.
pub const DEFAULT_SINGULAR_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManipulatorError {
    #[error("manipulator parameter `{name}` must be finite and strictly positive (got {value})")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("inertia matrix is singular: |det H| = {det:e} at q = [{q1}, {q2}]")]
    SingularInertia { det: f64, q1: f64, q2: f64 },
    #[error("uncertainty bound violated: |eta(t)| = {norm} exceeds C1 = {bound} at t = {t}")]
    EtaBoundViolated { t: f64, norm: f64, bound: f64 },
    #[error("uncertainty bound C1 must be finite and non-negative (got {0})")]
    InvalidBound(f64),
    #[error("waveform parameters must be finite")]
    NonFiniteWaveform,
}

/// Physical constants of the arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulatorParams {
    /// Link masses [kg].
    pub m1: f64,
    pub m2: f64,
    /// Link lengths [m].
    pub l1: f64,
    pub l2: f64,
    /// Distance from joint to link center of mass [m].
    pub lc1: f64,
    pub lc2: f64,
    /// Link inertias about the center of mass [kg m²].
    pub i1: f64,
    pub i2: f64,
    /// Gravitational acceleration [m/s²].
    pub g: f64,
}

impl Default for ManipulatorParams {
    fn default() -> Self {
        Self {
            m1: 10.0,
            m2: 5.0,
            l1: 1.0,
            l2: 1.0,
            lc1: 0.5,
            lc2: 0.5,
            i1: 10.0 / 12.0,
            i2: 5.0 / 12.0,
            g: 9.8,
        }
    }
}

impl ManipulatorParams {
    pub fn validate(&self) -> Result<(), ManipulatorError> {
        let fields = [
            ("m1", self.m1),
            ("m2", self.m2),
            ("l1", self.l1),
            ("l2", self.l2),
            ("lc1", self.lc1),
            ("lc2", self.lc2),
            ("i1", self.i1),
            ("i2", self.i2),
            ("g", self.g),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(ManipulatorError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }

    /// `h = m2 l1 lc2 sin(q2)`, the coefficient shared by the Coriolis terms.
    fn coriolis_coefficient(&self, q2: f64) -> f64 {
        self.m2 * self.l1 * self.lc2 * q2.sin()
    }
}

/// Joint angles, joint velocities and the (cycle-local) time they refer to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub q: Vector2<f64>,
    pub qdot: Vector2<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn new(q: [f64; 2], qdot: [f64; 2], t: f64) -> Self {
        Self {
            q: Vector2::from(q),
            qdot: Vector2::from(qdot),
            t,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite()) && self.t.is_finite()
    }

    /// `[q1, q2, q̇1, q̇2]`.
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.q[0], self.q[1], self.qdot[0], self.qdot[1])
    }
}

pub fn inertia_matrix(params: &ManipulatorParams, q: &Vector2<f64>) -> Matrix2<f64> {
    let p = params;
    let c2 = q[1].cos();
    let h22 = p.m2 * p.lc2 * p.lc2 + p.i2;
    let h12 = p.m2 * p.l1 * p.lc2 * c2 + h22;
    let h11 = p.m1 * p.lc1 * p.lc1
        + p.i1
        + p.m2 * (p.l1 * p.l1 + p.lc2 * p.lc2 + 2.0 * p.l1 * p.lc2 * c2)
        + p.i2;
    Matrix2::new(h11, h12, h12, h22)
}

pub fn coriolis_matrix(params: &ManipulatorParams, q: &Vector2<f64>, qdot: &Vector2<f64>) -> Matrix2<f64> {
    let h = params.coriolis_coefficient(q[1]);
    Matrix2::new(
        -h * qdot[1],
        -h * qdot[0] - h * qdot[1],
        h * qdot[0],
        0.0,
    )
}

pub fn gravity_vector(params: &ManipulatorParams, q: &Vector2<f64>) -> Vector2<f64> {
    let p = params;
    let c1 = q[0].cos();
    let c12 = (q[0] + q[1]).cos();
    Vector2::new(
        p.m1 * p.lc1 * p.g * c1 + p.m2 * p.g * (p.l2 * c12 + p.l1 * c1),
        p.m2 * p.lc2 * p.g * c12,
    )
}

/// Analytic time derivative of `H(q(t))` given `q̇`.
pub fn inertia_matrix_rate(params: &ManipulatorParams, q: &Vector2<f64>, qdot: &Vector2<f64>) -> Matrix2<f64> {
    let d = -params.m2 * params.l1 * params.lc2 * q[1].sin() * qdot[1];
    Matrix2::new(2.0 * d, d, d, 0.0)
}

/// Scalar signal described by a small closed set of named shapes.
///
/// Frequencies are angular [rad/s]. A bare number in a config file
/// deserializes to [`Waveform::Constant`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "WaveformRepr", into = "WaveformRepr")]
pub enum Waveform {
    Constant(f64),
    /// `offset + amplitude · sin(frequency · t)`
    Sine { amplitude: f64, frequency: f64, offset: f64 },
    /// `offset + amplitude · cos(frequency · t)`
    Cosine { amplitude: f64, frequency: f64, offset: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WaveformRepr {
    Value(f64),
    Shape(WaveformShape),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum WaveformShape {
    Constant {
        value: f64,
    },
    Sine {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        offset: f64,
    },
    Cosine {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl From<WaveformRepr> for Waveform {
    fn from(repr: WaveformRepr) -> Self {
        match repr {
            WaveformRepr::Value(v) | WaveformRepr::Shape(WaveformShape::Constant { value: v }) => Waveform::Constant(v),
            WaveformRepr::Shape(WaveformShape::Sine { amplitude, frequency, offset }) => Waveform::Sine {
                amplitude,
                frequency,
                offset,
            },
            WaveformRepr::Shape(WaveformShape::Cosine { amplitude, frequency, offset }) => Waveform::Cosine {
                amplitude,
                frequency,
                offset,
            },
        }
    }
}

impl From<Waveform> for WaveformRepr {
    fn from(w: Waveform) -> Self {
        match w {
            Waveform::Constant(v) => WaveformRepr::Value(v),
            Waveform::Sine { amplitude, frequency, offset } => WaveformRepr::Shape(WaveformShape::Sine {
                amplitude,
                frequency,
                offset,
            }),
            Waveform::Cosine { amplitude, frequency, offset } => WaveformRepr::Shape(WaveformShape::Cosine {
                amplitude,
                frequency,
                offset,
            }),
        }
    }
}

impl Waveform {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Waveform::Constant(v) => v,
            Waveform::Sine { amplitude, frequency, offset } => offset + amplitude * (frequency * t).sin(),
            Waveform::Cosine { amplitude, frequency, offset } => offset + amplitude * (frequency * t).cos(),
        }
    }

    /// Largest angular frequency present (0 for constants).
    pub fn frequency(&self) -> f64 {
        match *self {
            Waveform::Constant(_) => 0.0,
            Waveform::Sine { frequency, .. } | Waveform::Cosine { frequency, .. } => frequency.abs(),
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            Waveform::Constant(v) => v.is_finite(),
            Waveform::Sine { amplitude, frequency, offset } | Waveform::Cosine { amplitude, frequency, offset } => {
                amplitude.is_finite() && frequency.is_finite() && offset.is_finite()
            }
        }
    }
}

/// Known state-dependent function multiplying the uncertainty in the mixed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StateTerm {
    #[default]
    Gravity,
    Zero,
}

impl StateTerm {
    pub fn eval(&self, params: &ManipulatorParams, q: &Vector2<f64>) -> Vector2<f64> {
        match self {
            StateTerm::Gravity => gravity_vector(params, q),
            StateTerm::Zero => Vector2::zeros(),
        }
    }
}

/// Which additive uncertainty `Δb` is injected into the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UncertaintySpec {
    #[default]
    None,
    /// `Δb = [Δ1(t), Δ2(t)]`.
    TimeVarying { delta: [Waveform; 2] },
    /// `Δb = diag(Δ1, Δ2) · G(q)`; the diagonal entries may themselves vary in time.
    StateDependentGravity { delta: [Waveform; 2] },
    /// `Δb = Δ (Q(q) + η(t))` with `‖η(t)‖ ≤ eta_bound`.
    Mixed {
        delta: [[f64; 2]; 2],
        #[serde(default)]
        state_term: StateTerm,
        eta: [Waveform; 2],
        eta_bound: f64,
    },
}

impl UncertaintySpec {
    /// Checks descriptor sanity and, for the mixed form, samples `‖η(t)‖ ≤ C1`
    /// over two periods of the slowest channel.
    pub fn validate(&self) -> Result<(), ManipulatorError> {
        match self {
            UncertaintySpec::None => Ok(()),
            UncertaintySpec::TimeVarying { delta } | UncertaintySpec::StateDependentGravity { delta } => {
                if delta.iter().all(Waveform::is_finite) {
                    Ok(())
                } else {
                    Err(ManipulatorError::NonFiniteWaveform)
                }
            }
            UncertaintySpec::Mixed { delta, eta, eta_bound, .. } => {
                if !delta.iter().flatten().all(|v| v.is_finite()) || !eta.iter().all(Waveform::is_finite) {
                    return Err(ManipulatorError::NonFiniteWaveform);
                }
                if !(eta_bound.is_finite() && *eta_bound >= 0.0) {
                    return Err(ManipulatorError::InvalidBound(*eta_bound));
                }
                let slowest = eta
                    .iter()
                    .map(Waveform::frequency)
                    .filter(|w| *w > 0.0)
                    .fold(f64::INFINITY, f64::min);
                let horizon = if slowest.is_finite() {
                    (4.0 * std::f64::consts::PI / slowest).min(1e5)
                } else {
                    1.0
                };
                const SAMPLES: usize = 20_000;
                for i in 0..=SAMPLES {
                    let t = horizon * i as f64 / SAMPLES as f64;
                    let norm = eta[0].eval(t).hypot(eta[1].eval(t));
                    if norm > eta_bound * (1.0 + 1e-12) {
                        return Err(ManipulatorError::EtaBoundViolated {
                            t,
                            norm,
                            bound: *eta_bound,
                        });
                    }
                }
                Ok(())
            }
        }
    }

    /// Acceleration-level disturbance at configuration `q` and (global) time `t`.
    pub fn acceleration(&self, params: &ManipulatorParams, q: &Vector2<f64>, t: f64) -> Vector2<f64> {
        match self {
            UncertaintySpec::None => Vector2::zeros(),
            UncertaintySpec::TimeVarying { delta } => Vector2::new(delta[0].eval(t), delta[1].eval(t)),
            UncertaintySpec::StateDependentGravity { delta } => {
                let g = gravity_vector(params, q);
                Vector2::new(delta[0].eval(t) * g[0], delta[1].eval(t) * g[1])
            }
            UncertaintySpec::Mixed { delta, state_term, eta, .. } => {
                let d = Matrix2::new(delta[0][0], delta[0][1], delta[1][0], delta[1][1]);
                let v = state_term.eval(params, q) + Vector2::new(eta[0].eval(t), eta[1].eval(t));
                d * v
            }
        }
    }

    /// True uncertain parameters at time `t`, laid out to match an estimate vector of length `p`.
    ///
    /// Two channels give `[Δ1, Δ2]` (the diagonal for matrix forms); four channels give
    /// the full matrix in row-major order.
    pub fn true_parameters(&self, t: f64, p: usize) -> Vec<f64> {
        let mut out = match self {
            UncertaintySpec::None => vec![0.0; p],
            UncertaintySpec::TimeVarying { delta } | UncertaintySpec::StateDependentGravity { delta } => {
                let (d1, d2) = (delta[0].eval(t), delta[1].eval(t));
                if p == 4 {
                    vec![d1, 0.0, 0.0, d2]
                } else {
                    vec![d1, d2]
                }
            }
            UncertaintySpec::Mixed { delta, .. } => {
                if p == 4 {
                    vec![delta[0][0], delta[0][1], delta[1][0], delta[1][1]]
                } else {
                    vec![delta[0][0], delta[1][1]]
                }
            }
        };
        out.resize(p, 0.0);
        out
    }
}

/// `[q̇; q̈]` of the uncertain plant under torque `tau`.
pub fn plant_derivative(
    params: &ManipulatorParams,
    state: &PlantState,
    tau: &Vector2<f64>,
    unc: &UncertaintySpec,
) -> Result<Vector4<f64>, ManipulatorError> {
    plant_derivative_with_tolerance(params, state, tau, unc, DEFAULT_SINGULAR_TOLERANCE)
}

/// Same as [`plant_derivative`] with an explicit singularity tolerance on `|det H|`.
pub fn plant_derivative_with_tolerance(
    params: &ManipulatorParams,
    state: &PlantState,
    tau: &Vector2<f64>,
    unc: &UncertaintySpec,
    singular_tol: f64,
) -> Result<Vector4<f64>, ManipulatorError> {
    let h = inertia_matrix(params, &state.q);
    let h_inv = invert_inertia(&h, &state.q, singular_tol)?;
    let bias = coriolis_matrix(params, &state.q, &state.qdot) * state.qdot + gravity_vector(params, &state.q);
    let qddot = h_inv * (tau - bias) + unc.acceleration(params, &state.q, state.t);
    Ok(Vector4::new(state.qdot[0], state.qdot[1], qddot[0], qddot[1]))
}

pub(crate) fn invert_inertia(h: &Matrix2<f64>, q: &Vector2<f64>, singular_tol: f64) -> Result<Matrix2<f64>, ManipulatorError> {
    let det = h.determinant();
    if !(det.abs() >= singular_tol) {
        return Err(ManipulatorError::SingularInertia { det, q1: q[0], q2: q[1] });
    }
    Ok(Matrix2::new(h[(1, 1)], -h[(0, 1)], -h[(1, 0)], h[(0, 0)]) / det)
}
