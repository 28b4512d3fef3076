//! Multiparametric extremum-seeking estimators.
//!
//! Each estimated parameter gets its own sinusoidal dither at a distinct
//! frequency; correlating the measured cost with the dither drives the
//! estimate toward a minimizer of the cost without any model of it.
//!
//! Four variants are provided:
//!
//! * [`MesVariant::ContinuousMes`]: `ẋ_i = a_i sin(ω_i t + π/2) J`, `Δ̂_i = x_i + a_i sin(ω_i t − π/2)`.
//! * [`MesVariant::ContinuousDynamic`]: `Δ̂̇_i = a_i √ω_i cos(ω_i t) − k_i √ω_i sin(ω_i t) J`.
//! * [`MesVariant::DiscreteMes`] and [`MesVariant::DiscreteDynamic`]: the per-cycle
//!   versions, updated once at the end of every cycle of length `t_f`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::EpisodeTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("estimator needs at least one parameter channel")]
    NoChannels,
    #[error("estimator `{field}` has {got} entries, expected {expected}")]
    LengthMismatch { field: &'static str, got: usize, expected: usize },
    #[error("estimator `{field}[{index}]` must be finite and strictly positive (got {value})")]
    NonPositive { field: &'static str, index: usize, value: f64 },
    #[error("dither frequencies must be pairwise distinct: omega[{i}] = omega[{j}] = {value}")]
    DuplicateFrequency { i: usize, j: usize, value: f64 },
    #[error("dither frequencies violate omega_i + omega_j != omega_k: omega[{i}] + omega[{j}] = omega[{k}]")]
    ResonantFrequencies { i: usize, j: usize, k: usize },
    #[error("cycle duration t_f must be finite and positive (got {0})")]
    InvalidCycle(f64),
    #[error("cost trace is empty")]
    EmptyTrace,
    #[error("operation needs a {expected:?} estimator, configured variant is {got:?}")]
    WrongVariant { expected: MesVariant, got: MesVariant },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MesVariant {
    ContinuousMes,
    ContinuousDynamic,
    DiscreteMes,
    DiscreteDynamic,
}

impl MesVariant {
    pub fn is_discrete(&self) -> bool {
        matches!(self, MesVariant::DiscreteMes | MesVariant::DiscreteDynamic)
    }
}

const FREQUENCY_TOLERANCE: f64 = 1e-9;

/// Tuning of a multiparametric estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct MesConfig {
    amplitudes: Vec<f64>,
    frequencies: Vec<f64>,
    gains: Vec<f64>,
    t_f: f64,
    variant: MesVariant,
    phase_aligned: bool,
}

impl MesConfig {
    /// Validates and builds a configuration.
    ///
    /// `gains` are the adaptation gains `k_i` of the dynamic laws; they are
    /// ignored for the integrator-based laws.
    pub fn new(
        amplitudes: Vec<f64>,
        frequencies: Vec<f64>,
        gains: Vec<f64>,
        t_f: f64,
        variant: MesVariant,
    ) -> Result<Self, EstimatorError> {
        let p = amplitudes.len();
        if p == 0 {
            return Err(EstimatorError::NoChannels);
        }
        for (field, values) in [("frequencies", &frequencies), ("gains", &gains)] {
            if values.len() != p {
                return Err(EstimatorError::LengthMismatch {
                    field,
                    got: values.len(),
                    expected: p,
                });
            }
        }
        for (field, values) in [("amplitudes", &amplitudes), ("frequencies", &frequencies)] {
            if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
                return Err(EstimatorError::NonPositive { field, index, value });
            }
        }
        if matches!(variant, MesVariant::ContinuousDynamic | MesVariant::DiscreteDynamic) {
            if let Some((index, &value)) = gains.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
                return Err(EstimatorError::NonPositive { field: "gains", index, value });
            }
        }
        if !(t_f.is_finite() && t_f > 0.0) {
            return Err(EstimatorError::InvalidCycle(t_f));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= FREQUENCY_TOLERANCE * a.abs().max(b.abs()).max(1.0);
        for i in 0..p {
            for j in (i + 1)..p {
                if close(frequencies[i], frequencies[j]) {
                    return Err(EstimatorError::DuplicateFrequency {
                        i,
                        j,
                        value: frequencies[i],
                    });
                }
            }
        }
        if variant == MesVariant::ContinuousMes {
            for i in 0..p {
                for j in i..p {
                    for k in 0..p {
                        if close(frequencies[i] + frequencies[j], frequencies[k]) {
                            return Err(EstimatorError::ResonantFrequencies { i, j, k });
                        }
                    }
                }
            }
        }
        Ok(Self {
            amplitudes,
            frequencies,
            gains,
            t_f,
            variant,
            phase_aligned: false,
        })
    }

    /// Shifts the output dither of [`MesVariant::DiscreteMes`] one cycle forward so the
    /// estimate applied during cycle `k` carries the same dither phase the cost of
    /// cycle `k` is later demodulated with. Off by default.
    pub fn with_phase_alignment(mut self, aligned: bool) -> Self {
        self.phase_aligned = aligned;
        self
    }

    pub fn channels(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn t_f(&self) -> f64 {
        self.t_f
    }

    pub fn variant(&self) -> MesVariant {
        self.variant
    }

    pub fn phase_aligned(&self) -> bool {
        self.phase_aligned
    }

    fn expect(&self, expected: MesVariant) -> Result<(), EstimatorError> {
        if self.variant == expected {
            Ok(())
        } else {
            Err(EstimatorError::WrongVariant {
                expected,
                got: self.variant,
            })
        }
    }
}

/// Estimator internals; starts from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MesState {
    /// Integrator states (`ContinuousMes`, `DiscreteMes`).
    pub x: Vec<f64>,
    /// Current estimate `Δ̂`.
    pub delta_hat: Vec<f64>,
    /// Iteration index of the discrete laws.
    pub k: u64,
    /// Time of the continuous laws.
    pub t: f64,
}

impl MesState {
    pub fn zeros(p: usize) -> Self {
        Self {
            x: vec![0.0; p],
            delta_hat: vec![0.0; p],
            k: 0,
            t: 0.0,
        }
    }

    /// Integrated quantity of a continuous law: `x` for `ContinuousMes`, `Δ̂` otherwise.
    pub fn continuous_state(&self, cfg: &MesConfig) -> &[f64] {
        match cfg.variant {
            MesVariant::ContinuousMes => &self.x,
            _ => &self.delta_hat,
        }
    }

    /// Sets the integrated quantity at time `t` and refreshes the estimate.
    pub fn set_continuous_state(&mut self, cfg: &MesConfig, values: &[f64], t: f64) {
        self.t = t;
        match cfg.variant {
            MesVariant::ContinuousMes => {
                self.x.copy_from_slice(values);
                self.delta_hat = continuous_mes_output(cfg, values, t);
            }
            _ => self.delta_hat.copy_from_slice(values),
        }
    }
}

/// Per-cycle integrator law:
/// `x_i(k+1) = x_i(k) + a_i t_f sin(ω_i t_f k + π/2) J`,
/// `Δ̂_i(k+1) = x_i(k+1) + a_i sin(ω_i t_f k − π/2)`.
pub fn mes_discrete_step(state: &MesState, cfg: &MesConfig, j: f64) -> Result<MesState, EstimatorError> {
    cfg.expect(MesVariant::DiscreteMes)?;
    let k = state.k as f64;
    let dither_index = if cfg.phase_aligned { k + 1.0 } else { k };
    let mut next = state.clone();
    for i in 0..cfg.channels() {
        let (a, w) = (cfg.amplitudes[i], cfg.frequencies[i]);
        next.x[i] = state.x[i] + a * cfg.t_f * (w * cfg.t_f * k + FRAC_PI_2).sin() * j;
        next.delta_hat[i] = next.x[i] + a * (w * cfg.t_f * dither_index - FRAC_PI_2).sin();
    }
    next.k = state.k + 1;
    Ok(next)
}

/// Per-cycle dynamic law:
/// `Δ̂_i(k+1) = Δ̂_i(k) + t_f (a_i √ω_i cos(ω_i t_f k) − k_i √ω_i sin(ω_i t_f k) J)`.
pub fn mes_dynamic_discrete_step(state: &MesState, cfg: &MesConfig, j: f64) -> Result<MesState, EstimatorError> {
    cfg.expect(MesVariant::DiscreteDynamic)?;
    let k = state.k as f64;
    let mut next = state.clone();
    for i in 0..cfg.channels() {
        let (a, w, g) = (cfg.amplitudes[i], cfg.frequencies[i], cfg.gains[i]);
        let phase = w * cfg.t_f * k;
        let sw = w.sqrt();
        next.delta_hat[i] = state.delta_hat[i] + cfg.t_f * (a * sw * phase.cos() - g * sw * phase.sin() * j);
    }
    next.k = state.k + 1;
    Ok(next)
}

/// Right-hand side of a continuous law at `state.t` under cost `j`.
///
/// Returns `ẋ` for `ContinuousMes` and `Δ̂̇` for `ContinuousDynamic`; neither
/// depends on the integrated state itself.
pub fn mes_continuous_derivative(state: &MesState, cfg: &MesConfig, j: f64) -> Result<Vec<f64>, EstimatorError> {
    let mut out = vec![0.0; cfg.channels()];
    continuous_rhs(cfg, state.t, j, &mut out)?;
    Ok(out)
}

pub(crate) fn continuous_rhs(cfg: &MesConfig, t: f64, j: f64, out: &mut [f64]) -> Result<(), EstimatorError> {
    match cfg.variant {
        MesVariant::ContinuousMes => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = cfg.amplitudes[i] * (cfg.frequencies[i] * t + FRAC_PI_2).sin() * j;
            }
        }
        MesVariant::ContinuousDynamic => {
            for (i, o) in out.iter_mut().enumerate() {
                let w = cfg.frequencies[i];
                let sw = w.sqrt();
                *o = cfg.amplitudes[i] * sw * (w * t).cos() - cfg.gains[i] * sw * (w * t).sin() * j;
            }
        }
        other => {
            return Err(EstimatorError::WrongVariant {
                expected: MesVariant::ContinuousMes,
                got: other,
            })
        }
    }
    Ok(())
}

/// `Δ̂_i(t) = x_i(t) + a_i sin(ω_i t − π/2)`.
pub fn continuous_mes_output(cfg: &MesConfig, x: &[f64], t: f64) -> Vec<f64> {
    (0..cfg.channels())
        .map(|i| x[i] + cfg.amplitudes[i] * (cfg.frequencies[i] * t - FRAC_PI_2).sin())
        .collect()
}

/// Applies the end-of-cycle update of a discrete law; continuous laws are left untouched.
pub fn end_of_cycle(state: &MesState, cfg: &MesConfig, j: f64) -> Result<MesState, EstimatorError> {
    match cfg.variant {
        MesVariant::DiscreteMes => mes_discrete_step(state, cfg, j),
        MesVariant::DiscreteDynamic => mes_dynamic_discrete_step(state, cfg, j),
        _ => Ok(state.clone()),
    }
}

/// Weights of the tracking cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub q1: f64,
    pub q2: f64,
}

/// `J = Q1 ∫ ‖q − q_d‖² dt + Q2 ∫ ‖q̇ − q̇_d‖² dt`, trapezoid rule on the trace grid.
pub fn evaluate_cost(trace: &EpisodeTrace, weights: CostWeights) -> Result<f64, EstimatorError> {
    if trace.len() < 2 {
        return Err(EstimatorError::EmptyTrace);
    }
    let integrand: Vec<f64> = (0..trace.len())
        .map(|n| {
            let e = trace.q[n] - trace.qd[n];
            let ed = trace.qdot[n] - trace.qdot_d[n];
            weights.q1 * e.norm_squared() + weights.q2 * ed.norm_squared()
        })
        .collect();
    Ok(trapezoid(&trace.t, &integrand))
}

pub(crate) fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2)
        .zip(f.windows(2))
        .map(|(tw, fw)| 0.5 * (tw[1] - tw[0]) * (fw[0] + fw[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn table2() -> MesConfig {
        MesConfig::new(vec![0.05, 0.04], vec![7.4, 7.5], vec![0.0, 0.0], 4.0, MesVariant::DiscreteMes).unwrap()
    }

    fn table3() -> MesConfig {
        MesConfig::new(vec![0.01, 0.01], vec![9.9, 9.8], vec![0.01, 0.01], 4.0, MesVariant::DiscreteDynamic).unwrap()
    }

    #[test]
    fn zero_cost_step_is_pure_dither() {
        let next = mes_discrete_step(&MesState::zeros(2), &table2(), 0.0).unwrap();
        assert_eq!(next.x, vec![0.0, 0.0]);
        assert_abs_diff_eq!(next.delta_hat[0], -0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(next.delta_hat[1], -0.04, epsilon = 1e-15);
        assert_eq!(next.k, 1);
    }

    #[test]
    fn table2_first_step() {
        let next = mes_discrete_step(&MesState::zeros(2), &table2(), 6.0).unwrap();
        assert_abs_diff_eq!(next.x[0], 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(next.delta_hat[0], 1.15, epsilon = 1e-12);
    }

    #[test]
    fn dynamic_zero_cost_step() {
        let cfg = table3();
        let next = mes_dynamic_discrete_step(&MesState::zeros(2), &cfg, 0.0).unwrap();
        assert_abs_diff_eq!(next.delta_hat[0], 4.0 * 0.01 * 9.9f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(next.delta_hat[1], 4.0 * 0.01 * 9.8f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn table3_first_step() {
        let next = mes_dynamic_discrete_step(&MesState::zeros(2), &table3(), 7.0).unwrap();
        assert_abs_diff_eq!(next.delta_hat[0], 0.12586, epsilon = 5e-6);
    }

    #[test]
    fn step_rejects_other_variant() {
        let err = mes_discrete_step(&MesState::zeros(2), &table3(), 1.0).unwrap_err();
        assert!(matches!(err, EstimatorError::WrongVariant { .. }));
    }

    #[test]
    fn duplicate_frequencies_rejected() {
        let err = MesConfig::new(vec![0.1, 0.1], vec![7.4, 7.4], vec![0.0, 0.0], 4.0, MesVariant::DiscreteMes).unwrap_err();
        assert!(matches!(err, EstimatorError::DuplicateFrequency { i: 0, j: 1, .. }));
    }

    #[test]
    fn resonant_frequencies_rejected_for_continuous_mes() {
        let freqs = vec![1.0, 2.5, 3.5];
        let err = MesConfig::new(vec![0.1; 3], freqs.clone(), vec![0.0; 3], 4.0, MesVariant::ContinuousMes).unwrap_err();
        assert!(matches!(err, EstimatorError::ResonantFrequencies { .. }));
        // doubling: 1 + 1 = 2
        let err = MesConfig::new(vec![0.1; 2], vec![1.0, 2.0], vec![0.0; 2], 4.0, MesVariant::ContinuousMes).unwrap_err();
        assert!(matches!(err, EstimatorError::ResonantFrequencies { i: 0, j: 0, k: 1 }));
        assert!(MesConfig::new(vec![0.1; 3], freqs, vec![0.0; 3], 4.0, MesVariant::DiscreteMes).is_ok());
    }

    #[test]
    fn invalid_tuning_rejected() {
        assert!(matches!(
            MesConfig::new(vec![0.0], vec![1.0], vec![0.0], 4.0, MesVariant::DiscreteMes),
            Err(EstimatorError::NonPositive { field: "amplitudes", .. })
        ));
        assert!(matches!(
            MesConfig::new(vec![0.1], vec![1.0], vec![0.0], 4.0, MesVariant::DiscreteDynamic),
            Err(EstimatorError::NonPositive { field: "gains", .. })
        ));
        assert!(matches!(
            MesConfig::new(vec![0.1], vec![1.0, 2.0], vec![0.0], 4.0, MesVariant::DiscreteMes),
            Err(EstimatorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            MesConfig::new(vec![0.1], vec![1.0], vec![0.0], 0.0, MesVariant::DiscreteMes),
            Err(EstimatorError::InvalidCycle(_))
        ));
        assert!(matches!(
            MesConfig::new(vec![], vec![], vec![], 4.0, MesVariant::DiscreteMes),
            Err(EstimatorError::NoChannels)
        ));
    }

    #[test]
    fn zero_cost_discrete_mes_stays_within_dither() {
        let cfg = table2();
        let mut state = MesState::zeros(2);
        for _ in 0..1000 {
            state = mes_discrete_step(&state, &cfg, 0.0).unwrap();
            assert!(state.delta_hat[0].abs() <= 0.05 + 1e-15);
            assert!(state.delta_hat[1].abs() <= 0.04 + 1e-15);
        }
    }

    #[test]
    fn continuous_mes_zero_cost_keeps_integrator() {
        let cfg = MesConfig::new(vec![0.2, 0.1], vec![3.0, 4.5], vec![0.0, 0.0], 4.0, MesVariant::ContinuousMes).unwrap();
        let state = MesState { x: vec![0.3, -0.1], delta_hat: vec![0.0; 2], k: 0, t: 1.7 };
        let d = mes_continuous_derivative(&state, &cfg, 0.0).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        let out = continuous_mes_output(&cfg, &[0.3, -0.1], 0.0);
        assert_abs_diff_eq!(out[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], -0.2, epsilon = 1e-15);
    }

    #[test]
    fn continuous_rhs_rejects_discrete_variant() {
        assert!(mes_continuous_derivative(&MesState::zeros(2), &table2(), 1.0).is_err());
    }
}
