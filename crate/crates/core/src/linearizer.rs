//! Tracking-error coordinates of an input-output linearized system.
//!
//! For outputs with relative degrees `r_1..r_m` the error state stacks
//! `z^i = [e_i, ė_i, …, e_i^(r_i−1)]`. Under the nominal controller it obeys
//! `ż = Ã z` with `Ã` block diagonal in companion form; the robust terms act
//! through `B̃`, which selects the last row of every block. `P` solves
//! `ÃᵀP + PÃ = −I` and certifies the chosen gains.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Companion eigenvalues with real part at or above this are rejected.
pub const HURWITZ_THRESHOLD: f64 = -1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearizerError {
    #[error("gains for output {output} are not Hurwitz: eigenvalue {re} + {im}i has non-negative real part")]
    NotHurwitz { output: usize, re: f64, im: f64 },
    #[error("Lyapunov equation could not be solved: linear system is numerically singular")]
    LyapunovSolveFailed,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Feedback gains `K^i_j`; `rows[i][j]` multiplies the `j`-th derivative of `e_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    rows: Vec<Vec<f64>>,
}

impl ControllerGains {
    /// Builds gains without checking stability; see [`ControllerGains::check_hurwitz`].
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, LinearizerError> {
        if rows.is_empty() || rows.iter().any(Vec::is_empty) {
            return Err(LinearizerError::DimensionMismatch(
                "every output needs at least one gain".into(),
            ));
        }
        Ok(Self { rows })
    }

    /// Same gain for every entry.
    pub fn uniform(relative_degrees: &[usize], value: f64) -> Result<Self, LinearizerError> {
        Self::new(relative_degrees.iter().map(|&r| vec![value; r]).collect())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn outputs(&self) -> usize {
        self.rows.len()
    }

    pub fn relative_degrees(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    /// Companion block `Ã_i` for output `i`.
    pub fn companion_block(&self, output: usize) -> DMatrix<f64> {
        let k = &self.rows[output];
        let r = k.len();
        let mut a = DMatrix::zeros(r, r);
        for row in 0..r.saturating_sub(1) {
            a[(row, row + 1)] = 1.0;
        }
        for (j, kj) in k.iter().enumerate() {
            a[(r - 1, j)] = -kj;
        }
        a
    }

    pub fn check_hurwitz(&self) -> Result<(), LinearizerError> {
        for output in 0..self.outputs() {
            if self.rows[output].iter().any(|k| !k.is_finite()) {
                return Err(LinearizerError::NotHurwitz {
                    output,
                    re: f64::NAN,
                    im: f64::NAN,
                });
            }
            let eig = self.companion_block(output).complex_eigenvalues();
            if let Some(bad) = eig.iter().find(|l| !(l.re < HURWITZ_THRESHOLD)) {
                return Err(LinearizerError::NotHurwitz {
                    output,
                    re: bad.re,
                    im: bad.im,
                });
            }
        }
        Ok(())
    }
}

/// Stacked tracking error `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorState {
    pub z: DVector<f64>,
    pub relative_degrees: Vec<usize>,
}

impl ErrorState {
    /// Splits `z` back into per-output derivative stacks.
    pub fn unpack(&self) -> Vec<Vec<f64>> {
        let mut offset = 0;
        self.relative_degrees
            .iter()
            .map(|&r| {
                let block = self.z.rows(offset, r).iter().copied().collect();
                offset += r;
                block
            })
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.z.norm()
    }
}

/// Builds `z` from measured and desired output derivative stacks.
///
/// `y[i]` holds `y_i, ẏ_i, …, y_i^(r_i−1)`; `yd[i]` must have at least as many
/// entries (extra higher derivatives of the reference are ignored).
pub fn pack_error_state(y: &[Vec<f64>], yd: &[Vec<f64>]) -> Result<ErrorState, LinearizerError> {
    if y.len() != yd.len() {
        return Err(LinearizerError::DimensionMismatch(format!(
            "{} measured outputs vs {} reference outputs",
            y.len(),
            yd.len()
        )));
    }
    let mut z = Vec::new();
    let mut relative_degrees = Vec::with_capacity(y.len());
    for (i, (yi, ydi)) in y.iter().zip(yd).enumerate() {
        if ydi.len() < yi.len() || yi.is_empty() {
            return Err(LinearizerError::DimensionMismatch(format!(
                "output {i}: {} measured derivatives vs {} reference derivatives",
                yi.len(),
                ydi.len()
            )));
        }
        z.extend(yi.iter().zip(ydi).map(|(a, b)| a - b));
        relative_degrees.push(yi.len());
    }
    Ok(ErrorState {
        z: DVector::from_vec(z),
        relative_degrees,
    })
}

/// `Ã`, `B̃` and the Lyapunov certificate `P` for a set of Hurwitz gains.
#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedErrorDynamics {
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// `B̃ᵀP`, cached since every robust term needs it.
    bt_p: DMatrix<f64>,
    relative_degrees: Vec<usize>,
}

impl CertifiedErrorDynamics {
    pub fn relative_degrees(&self) -> &[usize] {
        &self.relative_degrees
    }

    pub fn state_dim(&self) -> usize {
        self.a_tilde.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.b_tilde.ncols()
    }

    /// `B̃ᵀ P z`.
    pub fn projected_error(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.bt_p * z
    }

    pub fn bt_p(&self) -> &DMatrix<f64> {
        &self.bt_p
    }

    /// `V(z) = zᵀ P z`.
    pub fn storage(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.p * z))
    }

    /// `‖ÃᵀP + PÃ + I‖∞` (max absolute entry).
    pub fn lyapunov_residual(&self) -> f64 {
        let n = self.state_dim();
        let r = self.a_tilde.transpose() * &self.p + &self.p * &self.a_tilde + DMatrix::identity(n, n);
        r.amax()
    }

    /// Smallest and largest eigenvalue of `P`.
    pub fn p_eigen_bounds(&self) -> (f64, f64) {
        let eig = self.p.clone().symmetric_eigenvalues();
        (eig.min(), eig.max())
    }
}

pub fn build_error_dynamics(gains: &ControllerGains, r: &[usize]) -> Result<CertifiedErrorDynamics, LinearizerError> {
    if gains.relative_degrees() != r {
        return Err(LinearizerError::DimensionMismatch(format!(
            "gain rows have lengths {:?} but relative degrees are {:?}",
            gains.relative_degrees(),
            r
        )));
    }
    gains.check_hurwitz()?;

    let n: usize = r.iter().sum();
    let m = r.len();
    let mut a_tilde = DMatrix::zeros(n, n);
    let mut b_tilde = DMatrix::zeros(n, m);
    let mut offset = 0;
    let mut blocks = Vec::with_capacity(m);
    for (i, &ri) in r.iter().enumerate() {
        let block = gains.companion_block(i);
        a_tilde.view_mut((offset, offset), (ri, ri)).copy_from(&block);
        b_tilde[(offset + ri - 1, i)] = 1.0;
        blocks.push((offset, block));
        offset += ri;
    }

    let p = match solve_blocks(n, &blocks) {
        Some(p) => p,
        None => solve_lyapunov_dense(&a_tilde).ok_or(LinearizerError::LyapunovSolveFailed)?,
    };
    let bt_p = b_tilde.transpose() * &p;
    Ok(CertifiedErrorDynamics {
        a_tilde,
        b_tilde,
        p,
        bt_p,
        relative_degrees: r.to_vec(),
    })
}

fn solve_blocks(n: usize, blocks: &[(usize, DMatrix<f64>)]) -> Option<DMatrix<f64>> {
    let mut p = DMatrix::zeros(n, n);
    for (offset, block) in blocks {
        let pb = solve_lyapunov_symmetric(block)?;
        let r = block.nrows();
        p.view_mut((*offset, *offset), (r, r)).copy_from(&pb);
    }
    Some(p)
}

/// Solves `AᵀP + PA = −I` over the `n(n+1)/2` unknowns of a symmetric `P`.
pub fn solve_lyapunov_symmetric(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let index = |i: usize, j: usize| {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        lo * n - lo * (lo + 1) / 2 + hi
    };
    let unknowns = n * (n + 1) / 2;
    let mut lhs = DMatrix::zeros(unknowns, unknowns);
    let mut rhs = DVector::zeros(unknowns);
    // Equation (i, j), i <= j: Σ_k a_ki P_kj + Σ_k P_ik a_kj = −δ_ij
    for i in 0..n {
        for j in i..n {
            let row = index(i, j);
            for k in 0..n {
                lhs[(row, index(k, j))] += a[(k, i)];
                lhs[(row, index(i, k))] += a[(k, j)];
            }
            if i == j {
                rhs[row] = -1.0;
            }
        }
    }
    let sol = solve_checked(lhs, rhs)?;
    Some(DMatrix::from_fn(n, n, |i, j| sol[index(i, j)]))
}

/// Solves `AᵀP + PA = −I` through the full `n²` Kronecker system and symmetrizes.
pub fn solve_lyapunov_dense(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // vec(AᵀP) = (I ⊗ Aᵀ) vec(P), vec(PA) = (Aᵀ ⊗ I) vec(P), column-major vec.
    let lhs = eye.kronecker(&a.transpose()) + a.transpose().kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, (-&eye).iter().copied());
    let sol = solve_checked(lhs, rhs)?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Some((&p + p.transpose()) * 0.5)
}

fn solve_checked(lhs: DMatrix<f64>, rhs: DVector<f64>) -> Option<DVector<f64>> {
    let scale = lhs.amax().max(1.0);
    let lu = lhs.lu();
    let u_min = lu.u().diagonal().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if !(u_min > 1e-13 * scale) {
        return None;
    }
    let sol = lu.solve(&rhs)?;
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_gains() -> ControllerGains {
        ControllerGains::uniform(&[2, 2], 1.0).unwrap()
    }

    #[test]
    fn unit_gains_give_known_certificate() {
        let dynamics = build_error_dynamics(&unit_gains(), &[2, 2]).unwrap();
        let block = DMatrix::from_row_slice(2, 2, &[1.5, 0.5, 0.5, 1.0]);
        let mut expected = DMatrix::zeros(4, 4);
        expected.view_mut((0, 0), (2, 2)).copy_from(&block);
        expected.view_mut((2, 2), (2, 2)).copy_from(&block);
        assert_abs_diff_eq!(dynamics.p, expected, epsilon = 1e-12);
        assert!(dynamics.lyapunov_residual() < 1e-12);
    }

    #[test]
    fn selector_matrix_layout() {
        let dynamics = build_error_dynamics(&unit_gains(), &[2, 2]).unwrap();
        let expected = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(dynamics.b_tilde, expected);
    }

    #[test]
    fn companion_layout() {
        let gains = ControllerGains::new(vec![vec![2.0, 3.0, 4.0]]).unwrap();
        let a = gains.companion_block(0);
        let expected = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -2.0, -3.0, -4.0]);
        assert_eq!(a, expected);
    }

    #[test]
    fn unstable_gain_is_rejected() {
        let gains = ControllerGains::new(vec![vec![-1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let err = build_error_dynamics(&gains, &[2, 2]).unwrap_err();
        assert!(matches!(err, LinearizerError::NotHurwitz { output: 0, .. }));
    }

    #[test]
    fn marginal_gain_is_rejected() {
        // s² + 1: purely imaginary roots
        let gains = ControllerGains::new(vec![vec![1.0, 0.0]]).unwrap();
        assert!(matches!(gains.check_hurwitz(), Err(LinearizerError::NotHurwitz { .. })));
    }

    #[test]
    fn mismatched_relative_degree_is_rejected() {
        let err = build_error_dynamics(&unit_gains(), &[2, 1]).unwrap_err();
        assert!(matches!(err, LinearizerError::DimensionMismatch(_)));
    }

    #[test]
    fn mixed_relative_degrees() {
        let gains = ControllerGains::new(vec![vec![3.0], vec![6.0, 11.0, 6.0]]).unwrap();
        let dynamics = build_error_dynamics(&gains, &[1, 3]).unwrap();
        assert!(dynamics.lyapunov_residual() < 1e-10);
        assert_eq!(dynamics.b_tilde[(0, 0)], 1.0);
        assert_eq!(dynamics.b_tilde[(3, 1)], 1.0);
        assert_eq!(dynamics.b_tilde.sum(), 2.0);
        assert!(dynamics.p.clone().cholesky().is_some());
    }

    #[test]
    fn dense_and_block_solves_agree() {
        let gains = ControllerGains::new(vec![vec![2.0, 3.0], vec![6.0, 11.0, 6.0]]).unwrap();
        let dynamics = build_error_dynamics(&gains, &[2, 3]).unwrap();
        let dense = solve_lyapunov_dense(&dynamics.a_tilde).unwrap();
        assert_abs_diff_eq!(dense, dynamics.p, epsilon = 1e-10);
    }

    #[test]
    fn pack_zero_error() {
        let y = vec![vec![0.5, 0.25], vec![0.5, 0.25]];
        let e = pack_error_state(&y, &y).unwrap();
        assert_eq!(e.z, DVector::zeros(4));
    }

    #[test]
    fn pack_order() {
        let y = vec![vec![0.1, 0.0], vec![-0.2, 0.3]];
        let yd = vec![vec![0.0, 0.0, 9.0], vec![0.0, 0.0, 9.0]];
        let e = pack_error_state(&y, &yd).unwrap();
        assert_eq!(e.z.as_slice(), &[0.1, 0.0, -0.2, 0.3]);
        assert_eq!(e.unpack(), y);
    }

    #[test]
    fn pack_rejects_short_reference() {
        let y = vec![vec![0.1, 0.0]];
        let yd = vec![vec![0.0]];
        assert!(matches!(pack_error_state(&y, &yd), Err(LinearizerError::DimensionMismatch(_))));
        assert!(pack_error_state(&y, &[yd[0].clone(), yd[0].clone()]).is_err());
    }
}
