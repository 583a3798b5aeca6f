//! Continuous-time LQR design.
//!
//! The algebraic Riccati equation `AᵀS + SA − SBR⁻¹BᵀS + Q = 0` is solved with
//! the matrix sign function of the Hamiltonian, then polished by Newton–Kleinman
//! iterations until the residual contract is met.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative CARE residual every accepted solution satisfies.
pub const CARE_TOLERANCE: f64 = 1e-8;

const SIGN_MAX_ITERS: usize = 100;
const NEWTON_MAX_ITERS: usize = 20;

/// Cost weights, Riccati solution and the resulting state-feedback gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrDesign {
    pub q_c: DMatrix<f64>,
    pub r_c: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub k_c: DMatrix<f64>,
}

impl LqrDesign {
    pub fn new(a: &DMatrix<f64>, b: &DMatrix<f64>, q_c: DMatrix<f64>, r_c: DMatrix<f64>) -> Result<Self> {
        let s = solve_care(a, b, &q_c, &r_c)?;
        let k_c = lqr_gain(&s, b, &r_c)?;
        Ok(Self { q_c, r_c, s, k_c })
    }
}

/// Regulation target and its time derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct DesiredState {
    pub x_d: DVector<f64>,
    pub x_d_dot: DVector<f64>,
}

impl DesiredState {
    pub fn origin(n_x: usize) -> Self {
        Self {
            x_d: DVector::zeros(n_x),
            x_d_dot: DVector::zeros(n_x),
        }
    }
}

/// `‖AᵀS + SA − SBR⁻¹BᵀS + Q‖_F`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q_c: &DMatrix<f64>,
    r_c: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<f64> {
    let r_inv = invert(r_c, "R_c")?;
    let g = b * r_inv * b.transpose();
    Ok((a.transpose() * s + s * a - s * g * s + q_c).norm())
}

pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, q_c: &DMatrix<f64>, r_c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q_c.shape() != (n, n) || r_c.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension("CARE operands have inconsistent shapes".into()));
    }
    let r_inv = r_c
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Solver {
            reason: "R_c is singular".into(),
            residual: f64::INFINITY,
        })?;
    let g = b * &r_inv * b.transpose();

    let mut s = sign_function_solution(a, &g, q_c)?;
    let mut residual = care_residual(a, b, q_c, r_c, &s)?;
    for _ in 0..NEWTON_MAX_ITERS {
        if residual <= CARE_TOLERANCE * (1.0 + s.norm()) * 1e-2 {
            break;
        }
        let k = &r_inv * b.transpose() * &s;
        let a_cl = a - b * &k;
        let rhs = -(q_c + k.transpose() * r_c * &k);
        let Some(next) = solve_lyapunov(&a_cl, &rhs) else { break };
        let next = symmetrize(&next);
        let next_residual = care_residual(a, b, q_c, r_c, &next)?;
        if !(next_residual < residual) {
            break;
        }
        s = next;
        residual = next_residual;
    }

    if !(residual <= CARE_TOLERANCE * (1.0 + s.norm())) {
        return Err(Error::Solver {
            reason: "residual above tolerance".into(),
            residual,
        });
    }
    let min_eig = s.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-9 * (1.0 + s.norm()) {
        return Err(Error::Solver {
            reason: format!("solution not PSD (min eigenvalue {min_eig:.3e})"),
            residual,
        });
    }
    let a_cl = a - &g * &s;
    let max_re = a_cl
        .complex_eigenvalues()
        .iter()
        .map(|e| e.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max_re < 0.0) {
        return Err(Error::Solver {
            reason: format!("closed loop not stable (max Re λ = {max_re:.3e}); pair not stabilizable"),
            residual,
        });
    }
    Ok(s)
}

/// Stabilizing solution from the sign of `H = [[A, −G], [−Q, −Aᵀ]]`.
fn sign_function_solution(a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut z = h;
    let mut converged = false;
    for _ in 0..SIGN_MAX_ITERS {
        let inv = match z.clone().try_inverse() {
            Some(inv) if inv.iter().all(|v| v.is_finite()) => inv,
            _ => {
                return Err(Error::Solver {
                    reason: "Hamiltonian has eigenvalues on the imaginary axis".into(),
                    residual: f64::INFINITY,
                })
            }
        };
        let det = z.determinant().abs();
        let c = if det.is_finite() && det > 0.0 {
            det.powf(-1.0 / (2.0 * n as f64))
        } else {
            1.0
        };
        let next = (&z * c + inv / c) * 0.5;
        let delta = (&next - &z).norm();
        z = next;
        if delta <= 1e-13 * z.norm() {
            converged = true;
            break;
        }
    }
    if !converged || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver {
            reason: "sign iteration did not converge".into(),
            residual: f64::INFINITY,
        });
    }

    // [W12; W22 + I] S = -[W11 + I; W21]
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(z.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    let s = lhs.svd(true, true).solve(&rhs, 1e-14).map_err(|e| Error::Solver {
        reason: e.to_string(),
        residual: f64::INFINITY,
    })?;
    Ok(symmetrize(&s))
}

/// Solves `AᵀX + XA = C` through its Kronecker form.
fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let vec = DVector::from_column_slice(c.as_slice());
    let sol = op.lu().solve(&vec)?;
    Some(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn invert(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(format!("{name} is not invertible")))
}

/// `K_c = R_c⁻¹ Bᵀ S`.
pub fn lqr_gain(s: &DMatrix<f64>, b: &DMatrix<f64>, r_c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(invert(r_c, "R_c")? * b.transpose() * s)
}

/// `u = −K_c (x̂ − x_D)`.
pub fn control_law(k_c: &DMatrix<f64>, x_hat: &DVector<f64>, desired: &DesiredState) -> DVector<f64> {
    -(k_c * (x_hat - &desired.x_d))
}

/// Rectangle-rule quadratic cost `Σ dt (xᵀQ_c x + uᵀR_c u)` over aligned samples.
pub fn lqr_cost(xs: &[DVector<f64>], us: &[DVector<f64>], q_c: &DMatrix<f64>, r_c: &DMatrix<f64>, dt: f64) -> f64 {
    xs.iter()
        .zip(us)
        .map(|(x, u)| dt * ((x.transpose() * q_c * x)[0] + (u.transpose() * r_c * u)[0]))
        .sum()
}
