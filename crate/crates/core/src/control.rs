//! Nominal feedback-linearizing control and the three robust ISS terms.
//!
//! The plant is seen through its linearized form `y^(r) = b(ξ) + A(ξ) u + Δb`.
//! The nominal input `u_n` cancels `b` and places the error poles; the robust
//! input `u_r` dominates the residual uncertainty through `V = zᵀPz`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linearizer::{CertifiedErrorDynamics, ControllerGains};

/// Largest accepted condition number of `A(ξ)`.
pub const CONDITION_LIMIT: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("input matrix is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("robust term needs {0}, which the plant view does not provide")]
    MissingTerm(&'static str),
    #[error("uncertainty bound C1 must be finite and positive (got {0})")]
    InvalidBound(f64),
}

/// `b(ξ)`, `A(ξ)` and the known functions the robust terms scale with.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedPlantView {
    b: DVector<f64>,
    a_inv: DMatrix<f64>,
    /// `L(ξ)` bounding the state-dependent uncertainty (Case 2).
    l: Option<DVector<f64>>,
    /// `Q(ξ)` of the mixed uncertainty (Case 3).
    q: Option<DVector<f64>>,
}

impl LinearizedPlantView {
    /// From `b` and `A`; `A` is inverted after the condition-number guard.
    pub fn new(b: DVector<f64>, a: DMatrix<f64>) -> Result<Self, ControlError> {
        check_square(&a, b.len())?;
        guard_condition(&a)?;
        let a_inv = a.try_inverse().ok_or(ControlError::IllConditioned(f64::INFINITY))?;
        Ok(Self { b, a_inv, l: None, q: None })
    }

    /// From `b` and an analytically known `A⁻¹` (for a manipulator, `A⁻¹ = H`).
    pub fn from_inverse(b: DVector<f64>, a_inv: DMatrix<f64>) -> Result<Self, ControlError> {
        check_square(&a_inv, b.len())?;
        guard_condition(&a_inv)?;
        Ok(Self { b, a_inv, l: None, q: None })
    }

    pub fn with_bound_carrier(mut self, l: DVector<f64>) -> Self {
        self.l = Some(l);
        self
    }

    pub fn with_state_term(mut self, q: DVector<f64>) -> Self {
        self.q = Some(q);
        self
    }

    pub fn outputs(&self) -> usize {
        self.b.len()
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn a_inv(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    fn bound_carrier(&self) -> Result<&DVector<f64>, ControlError> {
        self.l.as_ref().ok_or(ControlError::MissingTerm("L(ξ)"))
    }

    fn state_term(&self) -> Result<&DVector<f64>, ControlError> {
        self.q.as_ref().ok_or(ControlError::MissingTerm("Q(ξ)"))
    }
}

fn check_square(m: &DMatrix<f64>, outputs: usize) -> Result<(), ControlError> {
    if m.nrows() != outputs || m.ncols() != outputs {
        return Err(ControlError::DimensionMismatch(format!(
            "input matrix is {}x{} for {} outputs",
            m.nrows(),
            m.ncols(),
            outputs
        )));
    }
    Ok(())
}

/// Condition number of a square matrix in the spectral norm.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 2 && m.ncols() == 2 {
        // closed form from the singular values of a 2x2 matrix
        let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let s = a * a + b * b + c * c + d * d;
        let det = (a * d - b * c).abs();
        let disc = (s * s - 4.0 * det * det).max(0.0).sqrt();
        let smax = ((s + disc) / 2.0).sqrt();
        let smin = if det == 0.0 { 0.0 } else { det / smax };
        return if smin > 0.0 { smax / smin } else { f64::INFINITY };
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    }
}

fn guard_condition(m: &DMatrix<f64>) -> Result<(), ControlError> {
    let cond = condition_number(m);
    if cond.is_finite() && cond <= CONDITION_LIMIT {
        Ok(())
    } else {
        Err(ControlError::IllConditioned(cond))
    }
}

/// Desired outputs and their derivatives at one instant.
///
/// `derivatives[i][j]` is `y_id^(j)` for `j = 0..=r_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSignal {
    pub derivatives: Vec<Vec<f64>>,
}

impl ReferenceSignal {
    pub fn new(derivatives: Vec<Vec<f64>>) -> Self {
        Self { derivatives }
    }
}

/// Which robust term is added to the nominal input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustCase {
    /// `Δb = Δ(t)`, estimate is an m-vector.
    Case1,
    /// `‖Δb‖ ≤ ‖Δ‖ ‖L(ξ)‖`, estimate is an m×m matrix.
    Case2,
    /// `Δb = Δ(t)(Q(ξ) + η(t))` with `‖η‖ ≤ c1`.
    Case3 { c1: f64 },
}

/// Discontinuous switching function used by Cases 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SignMode {
    /// Signum with `sign(0) = 0`.
    #[default]
    Exact,
    /// Boundary-layer saturation `sat(x / ε)`.
    BoundaryLayer(f64),
}

impl SignMode {
    /// `0` selects the exact signum, anything positive a boundary layer of that width.
    pub fn from_width(eps: f64) -> Self {
        if eps > 0.0 {
            SignMode::BoundaryLayer(eps)
        } else {
            SignMode::Exact
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            SignMode::Exact => signum(x),
            SignMode::BoundaryLayer(eps) => (x / eps).clamp(-1.0, 1.0),
        }
    }

    fn apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        v.map(|x| self.apply(x))
    }
}

/// Componentwise sign with `sign(0) = 0`.
pub fn signum(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Induced 2-norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.nrows() == 2 && m.ncols() == 2 {
        let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let s = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        let disc = (s * s - 4.0 * det * det).max(0.0).sqrt();
        return ((s + disc) / 2.0).sqrt();
    }
    m.clone().singular_values().max()
}

/// `u_n = A⁻¹(ξ) [v_s − b(ξ)]` with `v_si = y_id^(r_i) − Σ_j K^i_j (y_i^(j−1) − y_id^(j−1))`.
///
/// `outputs[i]` holds `y_i, …, y_i^(r_i−1)`.
pub fn nominal_control(
    view: &LinearizedPlantView,
    gains: &ControllerGains,
    reference: &ReferenceSignal,
    outputs: &[Vec<f64>],
) -> Result<DVector<f64>, ControlError> {
    let m = view.outputs();
    if gains.outputs() != m || reference.derivatives.len() != m || outputs.len() != m {
        return Err(ControlError::DimensionMismatch(format!(
            "view has {m} outputs, gains {}, reference {}, measurements {}",
            gains.outputs(),
            reference.derivatives.len(),
            outputs.len()
        )));
    }
    let mut v = DVector::zeros(m);
    for i in 0..m {
        let k = &gains.rows()[i];
        let r = k.len();
        let yd = &reference.derivatives[i];
        let y = &outputs[i];
        if y.len() != r || yd.len() != r + 1 {
            return Err(ControlError::DimensionMismatch(format!(
                "output {i}: relative degree {r}, {} measured and {} reference derivatives",
                y.len(),
                yd.len()
            )));
        }
        let feedback: f64 = (0..r).map(|j| k[j] * (y[j] - yd[j])).sum();
        v[i] = yd[r] - feedback;
    }
    Ok(view.a_inv() * (v - view.b()))
}

fn check_error(dynamics: &CertifiedErrorDynamics, z: &DVector<f64>, m: usize) -> Result<(), ControlError> {
    if z.len() != dynamics.state_dim() || dynamics.outputs() != m {
        return Err(ControlError::DimensionMismatch(format!(
            "error state has {} entries, certificate expects {} and {} outputs (view has {m})",
            z.len(),
            dynamics.state_dim(),
            dynamics.outputs()
        )));
    }
    Ok(())
}

/// Case 1: `u_r = −A⁻¹(ξ) (B̃ᵀPz + Δ̂)`.
pub fn robust_control_case1(
    view: &LinearizedPlantView,
    dynamics: &CertifiedErrorDynamics,
    z: &DVector<f64>,
    delta_hat: &DVector<f64>,
) -> Result<DVector<f64>, ControlError> {
    let m = view.outputs();
    check_error(dynamics, z, m)?;
    if delta_hat.len() != m {
        return Err(ControlError::DimensionMismatch(format!(
            "estimate has {} entries for {m} outputs",
            delta_hat.len()
        )));
    }
    let s = dynamics.projected_error(z);
    Ok(-(view.a_inv() * (s + delta_hat)))
}

/// Case 2: `u_r = −A⁻¹ B̃ᵀPz ‖L‖² − A⁻¹ ‖Δ̂‖ ‖L‖ sign(B̃ᵀPz)`.
pub fn robust_control_case2(
    view: &LinearizedPlantView,
    dynamics: &CertifiedErrorDynamics,
    z: &DVector<f64>,
    delta_hat_norm: f64,
    sign: SignMode,
) -> Result<DVector<f64>, ControlError> {
    check_error(dynamics, z, view.outputs())?;
    let l_norm = view.bound_carrier()?.norm();
    let s = dynamics.projected_error(z);
    let inner = &s * (l_norm * l_norm) + sign.apply_vec(&s) * (delta_hat_norm * l_norm);
    Ok(-(view.a_inv() * inner))
}

/// Case 3: `u_r = −A⁻¹ [B̃ᵀPz ‖Q‖² + Δ̂ Q + ‖Δ̂‖ C1 sign(B̃ᵀPz) + B̃ᵀPz C1²]`.
pub fn robust_control_case3(
    view: &LinearizedPlantView,
    dynamics: &CertifiedErrorDynamics,
    z: &DVector<f64>,
    delta_hat: &DMatrix<f64>,
    c1: f64,
    sign: SignMode,
) -> Result<DVector<f64>, ControlError> {
    let m = view.outputs();
    check_error(dynamics, z, m)?;
    if !(c1.is_finite() && c1 > 0.0) {
        return Err(ControlError::InvalidBound(c1));
    }
    if delta_hat.nrows() != m || delta_hat.ncols() != m {
        return Err(ControlError::DimensionMismatch(format!(
            "estimate is {}x{} for {m} outputs",
            delta_hat.nrows(),
            delta_hat.ncols()
        )));
    }
    let q = view.state_term()?;
    let q_norm = q.norm();
    let s = dynamics.projected_error(z);
    let inner = &s * (q_norm * q_norm)
        + delta_hat * q
        + sign.apply_vec(&s) * (spectral_norm(delta_hat) * c1)
        + &s * (c1 * c1);
    Ok(-(view.a_inv() * inner))
}

/// `u_f = u_n + u_r`.
pub fn total_control(u_n: &DVector<f64>, u_r: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
    if u_n.len() != u_r.len() {
        return Err(ControlError::DimensionMismatch(format!(
            "nominal input has {} entries, robust input {}",
            u_n.len(),
            u_r.len()
        )));
    }
    Ok(u_n + u_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearizer::build_error_dynamics;
    use approx::assert_abs_diff_eq;

    fn certified() -> CertifiedErrorDynamics {
        build_error_dynamics(&ControllerGains::uniform(&[2, 2], 1.0).unwrap(), &[2, 2]).unwrap()
    }

    fn identity_view() -> LinearizedPlantView {
        LinearizedPlantView::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap()
    }

    /// z with B̃ᵀPz = [0.5, -0.1] under unit gains (P rows [0.5, 1.0]).
    fn z_for_projection() -> DVector<f64> {
        DVector::from_vec(vec![1.0, 0.0, 0.0, -0.1])
    }

    #[test]
    fn nominal_zero_error_is_zero() {
        let gains = ControllerGains::uniform(&[2, 2], 1.0).unwrap();
        let reference = ReferenceSignal::new(vec![vec![0.3, 0.1, 0.0], vec![0.3, 0.1, 0.0]]);
        let outputs = vec![vec![0.3, 0.1], vec![0.3, 0.1]];
        let u = nominal_control(&identity_view(), &gains, &reference, &outputs).unwrap();
        assert_eq!(u, DVector::zeros(2));
    }

    #[test]
    fn nominal_feedback_terms() {
        let gains = ControllerGains::new(vec![vec![2.0, 3.0], vec![1.0, 1.0]]).unwrap();
        let reference = ReferenceSignal::new(vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]]);
        let outputs = vec![vec![0.5, -0.5], vec![0.0, 0.0]];
        let view = LinearizedPlantView::new(DVector::from_vec(vec![0.25, 0.0]), DMatrix::from_diagonal_element(2, 2, 2.0)).unwrap();
        let u = nominal_control(&view, &gains, &reference, &outputs).unwrap();
        // v1 = 1 - (2*0.5 + 3*(-0.5)) = 1.5; u1 = (1.5 - 0.25)/2
        assert_abs_diff_eq!(u[0], 0.625, epsilon = 1e-15);
        assert_eq!(u[1], 0.0);
    }

    #[test]
    fn ill_conditioned_input_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        assert!(matches!(
            LinearizedPlantView::new(DVector::zeros(2), a),
            Err(ControlError::IllConditioned(_))
        ));
    }

    #[test]
    fn condition_number_closed_form_matches_svd() {
        let m = DMatrix::from_row_slice(2, 2, &[15.0, 4.0, 4.0, 1.7]);
        let sv = m.clone().singular_values();
        assert_abs_diff_eq!(condition_number(&m), sv.max() / sv.min(), epsilon = 1e-9);
        let d = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, 0.5, 2.0]);
        assert_abs_diff_eq!(spectral_norm(&d), d.clone().singular_values().max(), epsilon = 1e-12);
    }

    #[test]
    fn case1_zero_inputs() {
        let u = robust_control_case1(&identity_view(), &certified(), &DVector::zeros(4), &DVector::zeros(2)).unwrap();
        assert_eq!(u, DVector::zeros(2));
    }

    #[test]
    fn case1_projection_example() {
        let z = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let u = robust_control_case1(&identity_view(), &certified(), &z, &DVector::zeros(2)).unwrap();
        assert_abs_diff_eq!(u, DVector::from_vec(vec![-0.5, 0.0]), epsilon = 1e-12);
    }

    #[test]
    fn case2_vanishes_on_zero_projection() {
        let view = identity_view().with_bound_carrier(DVector::from_vec(vec![3.0, 4.0]));
        let u = robust_control_case2(&view, &certified(), &DVector::zeros(4), 7.0, SignMode::Exact).unwrap();
        assert_eq!(u, DVector::zeros(2));
    }

    #[test]
    fn case2_arithmetic_example() {
        let view = identity_view().with_bound_carrier(DVector::from_vec(vec![2.0, 0.0]));
        let u = robust_control_case2(&view, &certified(), &z_for_projection(), 3.0, SignMode::Exact).unwrap();
        assert_abs_diff_eq!(u, DVector::from_vec(vec![-8.0, 6.4]), epsilon = 1e-12);
    }

    #[test]
    fn case2_requires_bound_carrier() {
        let err = robust_control_case2(&identity_view(), &certified(), &DVector::zeros(4), 1.0, SignMode::Exact).unwrap_err();
        assert!(matches!(err, ControlError::MissingTerm(_)));
    }

    #[test]
    fn case3_zero_inputs() {
        let view = identity_view().with_state_term(DVector::from_vec(vec![1.0, 0.0]));
        let u = robust_control_case3(&view, &certified(), &DVector::zeros(4), &DMatrix::zeros(2, 2), 1.0, SignMode::Exact).unwrap();
        assert_eq!(u, DVector::zeros(2));
    }

    #[test]
    fn case3_arithmetic_example() {
        let view = identity_view().with_state_term(DVector::from_vec(vec![1.0, 0.0]));
        let u = robust_control_case3(&view, &certified(), &z_for_projection(), &DMatrix::identity(2, 2), 1.0, SignMode::Exact).unwrap();
        assert_abs_diff_eq!(u, DVector::from_vec(vec![-3.0, 1.2]), epsilon = 1e-12);
    }

    #[test]
    fn case3_with_zero_state_term() {
        let view = identity_view().with_state_term(DVector::zeros(2));
        let dh = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let u = robust_control_case3(&view, &certified(), &z_for_projection(), &dh, 0.5, SignMode::Exact).unwrap();
        let expected = -(DVector::from_vec(vec![1.0, -1.0]) * (2.0 * 0.5) + DVector::from_vec(vec![0.5, -0.1]) * 0.25);
        assert_abs_diff_eq!(u, expected, epsilon = 1e-12);
    }

    #[test]
    fn case3_rejects_non_positive_bound() {
        let view = identity_view().with_state_term(DVector::zeros(2));
        let err = robust_control_case3(&view, &certified(), &DVector::zeros(4), &DMatrix::zeros(2, 2), 0.0, SignMode::Exact);
        assert!(matches!(err, Err(ControlError::InvalidBound(_))));
    }

    #[test]
    fn total_is_elementwise_sum() {
        let u_n = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(total_control(&u_n, &DVector::zeros(2)).unwrap(), u_n);
        assert_eq!(total_control(&u_n, &(-&u_n)).unwrap(), DVector::zeros(2));
        assert!(total_control(&u_n, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn signum_and_boundary_layer() {
        assert_eq!(signum(0.0), 0.0);
        assert_eq!(signum(-2.0), -1.0);
        let sat = SignMode::BoundaryLayer(1e-3);
        assert_eq!(sat.apply(5e-4), 0.5);
        assert_eq!(sat.apply(-1.0), -1.0);
        assert_eq!(SignMode::from_width(0.0), SignMode::Exact);
    }
}
