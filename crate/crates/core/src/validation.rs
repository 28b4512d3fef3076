//! Invariant checks behind `es-adapt validate`.
//!
//! Every check reports the measured value next to its threshold so a failing
//! run says how far off it is, not just that it failed.

use std::fmt;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::linearizer::{build_error_dynamics, ControllerGains};
use crate::manipulator::{coriolis_matrix, inertia_matrix, ManipulatorParams, UncertaintySpec, Waveform};
use crate::scenario::ScenarioPreset;
use crate::sim::{run_episode, run_mes_loop, reference_signal, RobustChoice, SimConfig, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    /// Passes when `measured < threshold`.
    Below,
    /// Passes when `|measured − target| ≤ threshold`.
    Within(i32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub measured: f64,
    pub threshold: f64,
    pub bound: Bound,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &'static str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            measured,
            threshold,
            bound: Bound::Below,
            passed: measured < threshold,
            detail: detail.into(),
        }
    }

    fn failed(name: &'static str, detail: impl Into<String>) -> Self {
        Self {
            name,
            measured: f64::NAN,
            threshold: f64::NAN,
            bound: Bound::Below,
            passed: false,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>6} {:>14} {:>16}  detail", "check", "result", "measured", "threshold")?;
        for c in &self.checks {
            let threshold = match c.bound {
                Bound::Below => format!("< {:.3e}", c.threshold),
                Bound::Within(target) => format!("{target} ± {}", c.threshold),
            };
            writeln!(
                f,
                "{:<28} {:>6} {:>14.6e} {:>16}  {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.measured,
                threshold,
                c.detail
            )?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// Runs every check. `gains` are the feedback gains under test.
pub fn run_validation(gains: &[Vec<f64>], params: &ManipulatorParams) -> ValidationReport {
    let checks = vec![
        check_hurwitz(gains),
        check_lyapunov(gains),
        check_inertia(params),
        check_skew_symmetry(params),
        check_nominal_exactness(),
        check_rk4_order(),
        check_iss_ordering(),
        check_mes_convergence("mes_synthetic_quadratic", false),
        check_mes_convergence("mes_synthetic_phase_aligned", true),
    ];
    ValidationReport { checks }
}

pub fn check_hurwitz(gains: &[Vec<f64>]) -> CheckResult {
    const NAME: &str = "gains_hurwitz";
    let gains = match ControllerGains::new(gains.to_vec()) {
        Ok(g) => g,
        Err(e) => return CheckResult::failed(NAME, e.to_string()),
    };
    let worst = (0..gains.outputs())
        .flat_map(|i| gains.companion_block(i).complex_eigenvalues().iter().map(|c| c.re).collect::<Vec<_>>())
        .fold(f64::NEG_INFINITY, f64::max);
    let detail = match gains.check_hurwitz() {
        Ok(()) => "max Re(lambda) over companion blocks".to_string(),
        Err(e) => e.to_string(),
    };
    CheckResult::below(NAME, worst, 0.0, detail)
}

pub fn check_lyapunov(gains: &[Vec<f64>]) -> CheckResult {
    const NAME: &str = "lyapunov_residual";
    let result = ControllerGains::new(gains.to_vec()).and_then(|g| {
        let r = g.relative_degrees();
        build_error_dynamics(&g, &r)
    });
    match result {
        Ok(d) => CheckResult::below(NAME, d.lyapunov_residual(), 1e-10, "|A'P + PA + I|_inf"),
        Err(e) => CheckResult::failed(NAME, e.to_string()),
    }
}

/// Minimum over a 50x50 grid of `λ_min(H)`, failing outright on any asymmetry.
pub fn check_inertia(params: &ManipulatorParams) -> CheckResult {
    const NAME: &str = "inertia_symmetric_pd";
    let n = 50;
    let mut min_eig = f64::INFINITY;
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let q = grid_point(i, j, n);
            let h = inertia_matrix(params, &q);
            asym = asym.max((h[(0, 1)] - h[(1, 0)]).abs());
            min_eig = min_eig.min(h.symmetric_eigenvalues().min());
        }
    }
    let mut c = CheckResult::below(NAME, -min_eig, 0.0, format!("-min eig(H) on 50x50 grid; asymmetry {asym:e}"));
    c.passed &= asym == 0.0;
    c
}

fn grid_point(i: usize, j: usize, n: usize) -> Vector2<f64> {
    use std::f64::consts::PI;
    let step = 2.0 * PI / (n - 1) as f64;
    Vector2::new(-PI + i as f64 * step, -PI + j as f64 * step)
}

/// Deterministic, well-spread sample in [0, 1) (golden-ratio sequence).
fn spread(k: usize) -> f64 {
    (0.5 + k as f64 * 0.618_033_988_749_894_9).fract()
}

/// `Ḣ − 2C` must be skew-symmetric; Ḣ by central differences along 10 trajectories.
pub fn check_skew_symmetry(params: &ManipulatorParams) -> CheckResult {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut k = 0;
    for _ in 0..10 {
        let mut draw = || {
            k += 1;
            spread(k)
        };
        let amp = Vector2::new(0.5 + 2.0 * draw(), 0.5 + 2.0 * draw());
        let freq = Vector2::new(0.2 + 3.0 * draw(), 0.2 + 3.0 * draw());
        let phase = Vector2::new(6.0 * draw(), 6.0 * draw());
        let q_at = |t: f64| amp.component_mul(&Vector2::new((freq[0] * t + phase[0]).sin(), (freq[1] * t + phase[1]).sin()));
        let qd_at = |t: f64| {
            amp.component_mul(&freq)
                .component_mul(&Vector2::new((freq[0] * t + phase[0]).cos(), (freq[1] * t + phase[1]).cos()))
        };
        for s in 0..20 {
            let t = 0.25 * s as f64;
            let hdot = (inertia_matrix(params, &q_at(t + h)) - inertia_matrix(params, &q_at(t - h))) / (2.0 * h);
            let n = hdot - 2.0 * coriolis_matrix(params, &q_at(t), &qd_at(t));
            worst = worst.max((n + n.transpose()).abs().max());
        }
    }
    CheckResult::below("skew_symmetry", worst, 1e-6, "max |N + N'|, N = Hdot - 2C, 10 trajectories")
}

pub fn check_nominal_exactness() -> CheckResult {
    const NAME: &str = "nominal_exactness";
    let mut cfg = ScenarioPreset::Nominal.config();
    cfg.sim.iterations = 1;
    match run_episode(&cfg, &[0.0, 0.0], 0) {
        Ok(trace) => CheckResult::below(NAME, trace.max_z(), 1e-6, "max |z(t)| over [0, t_f], matched start"),
        Err(e) => CheckResult::failed(NAME, e.to_string()),
    }
}

/// Final-state error of the nominal closed loop against the exact error flow.
pub fn nominal_global_error(dt: f64, e0: [f64; 2], edot0: [f64; 2]) -> Result<f64, SimError> {
    let mut cfg = ScenarioPreset::Nominal.config();
    cfg.sim.dt = dt;
    let r0 = reference_signal(0.0);
    cfg.sim.q0 = [r0.q[0] + e0[0], r0.q[1] + e0[1]];
    cfg.sim.qdot0 = [r0.qdot[0] + edot0[0], r0.qdot[1] + edot0[1]];
    let trace = run_episode(&cfg, &[0.0, 0.0], 0)?;
    let end = trace.final_state().expect("non-empty trace");

    let gains = cfg.controller_gains()?;
    let dynamics = build_error_dynamics(&gains, &[2, 2])?;
    let z0 = DVector::from_vec(vec![e0[0], edot0[0], e0[1], edot0[1]]);
    let z = (dynamics.a_tilde.clone() * cfg.sim.t_f).exp() * z0;
    let rf = reference_signal(cfg.sim.t_f);
    let exact = [rf.q[0] + z[0], rf.q[1] + z[2], rf.qdot[0] + z[1], rf.qdot[1] + z[3]];
    let got = [end.q[0], end.q[1], end.qdot[0], end.qdot[1]];
    Ok(exact.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn sci(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Least-squares slope of `log err` against `log dt`.
pub fn loglog_slope(dts: &[f64], errors: &[f64]) -> f64 {
    let x: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Perturbed start used for the order check.
pub const ORDER_CHECK_E0: [f64; 2] = [2.0, -2.0];
pub const ORDER_CHECK_EDOT0: [f64; 2] = [1.0, 0.0];
pub const ORDER_CHECK_DTS: [f64; 3] = [4e-3, 2e-3, 1e-3];

pub fn check_rk4_order() -> CheckResult {
    const NAME: &str = "rk4_order";
    let errors: Result<Vec<f64>, SimError> = ORDER_CHECK_DTS
        .iter()
        .map(|&dt| nominal_global_error(dt, ORDER_CHECK_E0, ORDER_CHECK_EDOT0))
        .collect();
    match errors {
        Ok(errors) => {
            let slope = loglog_slope(&ORDER_CHECK_DTS, &errors);
            CheckResult {
                name: NAME,
                measured: slope,
                threshold: 0.5,
                bound: Bound::Within(4),
                passed: (slope - 4.0).abs() <= 0.5,
                detail: format!("global errors {} at dt = {ORDER_CHECK_DTS:?}", sci(&errors)),
            }
        }
        Err(e) => CheckResult::failed(NAME, e.to_string()),
    }
}

/// Case 1 episode with constant truth and a frozen estimation error of norm `e_delta`.
pub fn iss_config(truth: [f64; 2]) -> SimConfig {
    let mut cfg = ScenarioPreset::Nominal.config();
    cfg.controller.robust_case = RobustChoice::Case1;
    cfg.uncertainty = UncertaintySpec::TimeVarying {
        delta: [Waveform::Constant(truth[0]), Waveform::Constant(truth[1])],
    };
    cfg
}

pub const ISS_TRUTH: [f64; 2] = [1.0, 0.88];
pub const ISS_ERRORS: [f64; 3] = [0.0, 0.1, 1.0];

/// Peak `‖z‖` over the last quarter of the cycle, for each frozen estimation error.
pub fn iss_ceilings() -> Result<Vec<f64>, SimError> {
    let cfg = iss_config(ISS_TRUTH);
    let dir = std::f64::consts::FRAC_1_SQRT_2;
    ISS_ERRORS
        .iter()
        .map(|&e| {
            let estimate = [ISS_TRUTH[0] - e * dir, ISS_TRUTH[1] - e * dir];
            let trace = run_episode(&cfg, &estimate, 0)?;
            let start = trace.t.iter().position(|&t| t >= 0.75 * cfg.sim.t_f).unwrap_or(0);
            Ok(trace.z_norm[start..].iter().copied().fold(0.0, f64::max))
        })
        .collect()
}

pub fn check_iss_ordering() -> CheckResult {
    const NAME: &str = "iss_ordering";
    match iss_ceilings() {
        Ok(c) => {
            let increasing = c.windows(2).all(|w| w[0] < w[1]);
            let mut r = CheckResult::below(NAME, c[0], 1e-4, format!("steady |z| ceilings {} for e = {ISS_ERRORS:?}", sci(&c)));
            r.passed &= increasing;
            if !increasing {
                r.detail.push_str("; not strictly increasing");
            }
            r
        }
        Err(e) => CheckResult::failed(NAME, e.to_string()),
    }
}

/// Best distance to the minimiser over the synthetic-quadratic run.
pub fn synthetic_best_distance(phase_aligned: bool) -> Result<(f64, f64), SimError> {
    let mut cfg = ScenarioPreset::SyntheticQuadratic.config();
    cfg.mes.phase_aligned = phase_aligned;
    let run = run_mes_loop(&cfg)?;
    let target = DVector::from_vec(cfg.synthetic.target.clone());
    let mut estimates: Vec<&Vec<f64>> = run.records.iter().map(|r| &r.delta_hat).collect();
    estimates.push(&run.final_state.delta_hat);
    let best = estimates
        .into_iter()
        .map(|d| (DVector::from_vec(d.clone()) - &target).norm())
        .fold(f64::INFINITY, f64::min);
    let radius = DMatrix::from_row_slice(1, cfg.channels(), &cfg.mes.amplitudes).norm();
    Ok((best, radius + 0.1))
}

pub fn check_mes_convergence(name: &'static str, phase_aligned: bool) -> CheckResult {
    match synthetic_best_distance(phase_aligned) {
        Ok((best, bound)) => CheckResult::below(name, best, bound, "min |x - x*| within 500 iterations vs |a| + 0.1"),
        Err(e) => CheckResult::failed(name, e.to_string()),
    }
}
