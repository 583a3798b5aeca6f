//! Non-spiking estimators: the continuous-time Kalman filter and the modified
//! sliding innovation filter (MSIF), plus the innovation-covariance pipeline that
//! the spiking network reuses for its adaptive weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::LtiModel;
use crate::error::{Error, Result};

/// Default initial covariance scale, `P(0) = scale · I`.
pub const DEFAULT_P0_SCALE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t: f64,
}

impl FilterState {
    pub fn new(x_hat: DVector<f64>, p0_scale: f64) -> Self {
        let n = x_hat.len();
        Self {
            x_hat,
            p: DMatrix::identity(n, n) * p0_scale,
            t: 0.0,
        }
    }
}

/// Sliding boundary layer of the MSIF gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsifConfig {
    pub delta: f64,
}

impl MsifConfig {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Domain(format!("boundary layer must be positive, got {delta}")));
        }
        Ok(Self { delta })
    }
}

impl Default for MsifConfig {
    fn default() -> Self {
        Self { delta: 0.005 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorVariant {
    Kalman,
    Msif,
}

fn inverse(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(format!("{name} is not invertible")))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Euler step of `Ṗ = ÂP + PÂᵀ + Q − PCᵀR⁻¹CP` on the design model, symmetrized.
pub fn kf_riccati_step(p: &DMatrix<f64>, model_hat: &LtiModel, dt: f64) -> Result<DMatrix<f64>> {
    let r_inv = inverse(&model_hat.r, "R")?;
    Ok(riccati_step_with(p, model_hat, &r_inv, dt))
}

fn riccati_step_with(p: &DMatrix<f64>, m: &LtiModel, r_inv: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let pct = p * m.c.transpose();
    let p_dot = &m.a * p + p * m.a.transpose() + &m.q - &pct * r_inv * pct.transpose();
    symmetrize(p + p_dot * dt)
}

/// `P_zz = CPCᵀ + R`.
pub fn innovation_covariance(p: &DMatrix<f64>, c: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    c * p * c.transpose() + r
}

/// Continuous Kalman gain `PCᵀR⁻¹`.
pub fn kf_gain(p: &DMatrix<f64>, c: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(p * c.transpose() * inverse(r, "R")?)
}

/// Elementwise clamp of nonnegative entries to at most 1.
pub fn saturate(v: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(bad) = v.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::Domain(format!(
            "saturation expects nonnegative entries, got {bad}"
        )));
    }
    Ok(v.map(|x| x.min(1.0)))
}

/// Moore–Penrose pseudoinverse.
pub fn pseudo_inverse(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eps = f64::EPSILON * c.nrows().max(c.ncols()) as f64 * c.amax().max(1.0);
    c.clone()
        .pseudo_inverse(eps)
        .expect("pseudo-inverse tolerance is nonnegative")
}

/// `K_MSIF = C⁺ · diag(sat(diag(P_zz)/δ))`.
pub fn msif_gain(p_zz: &DMatrix<f64>, c: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    msif_gain_with(p_zz, &pseudo_inverse(c), delta)
}

/// [`msif_gain`] with a precomputed `C⁺`.
pub fn msif_gain_with(p_zz: &DMatrix<f64>, c_pinv: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("boundary layer must be positive, got {delta}")));
    }
    let sat = saturate(&(p_zz.diagonal() / delta))?;
    Ok(c_pinv * DMatrix::from_diagonal(&sat))
}

/// Reusable estimator bound to one design model.
///
/// Caches `R⁻¹` and `C⁺` so the per-step update is allocation-light.
#[derive(Debug, Clone)]
pub struct Estimator {
    model_hat: LtiModel,
    variant: EstimatorVariant,
    cfg: MsifConfig,
    r_inv: DMatrix<f64>,
    c_pinv: DMatrix<f64>,
}

impl Estimator {
    pub fn new(model_hat: LtiModel, variant: EstimatorVariant, cfg: MsifConfig) -> Result<Self> {
        let r_inv = inverse(&model_hat.r, "R")?;
        let c_pinv = pseudo_inverse(&model_hat.c);
        Ok(Self {
            model_hat,
            variant,
            cfg,
            r_inv,
            c_pinv,
        })
    }

    pub fn model(&self) -> &LtiModel {
        &self.model_hat
    }

    pub fn variant(&self) -> EstimatorVariant {
        self.variant
    }

    pub fn innovation_covariance(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        innovation_covariance(p, &self.model_hat.c, &self.model_hat.r)
    }

    pub fn msif_gain(&self, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        msif_gain_with(&self.innovation_covariance(p), &self.c_pinv, self.cfg.delta)
    }

    pub fn gain(&self, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.variant {
            EstimatorVariant::Kalman => Ok(p * self.model_hat.c.transpose() * &self.r_inv),
            EstimatorVariant::Msif => self.msif_gain(p),
        }
    }

    pub fn propagate_covariance(&self, p: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
        riccati_step_with(p, &self.model_hat, &self.r_inv, dt)
    }

    /// `x̂' = x̂ + dt(Âx̂ + Bu + K(z − Cx̂))`, with `P` advanced by the Riccati ODE.
    pub fn step(&self, fs: &FilterState, u: &DVector<f64>, z: &DVector<f64>, dt: f64) -> Result<FilterState> {
        let k = self.gain(&fs.p)?;
        let m = &self.model_hat;
        let innovation = z - &m.c * &fs.x_hat;
        let x_dot = &m.a * &fs.x_hat + &m.b * u + k * innovation;
        Ok(FilterState {
            x_hat: &fs.x_hat + x_dot * dt,
            p: self.propagate_covariance(&fs.p, dt),
            t: fs.t + dt,
        })
    }
}

/// Free-function form of [`Estimator::step`].
pub fn estimator_step(
    fs: &FilterState,
    model_hat: &LtiModel,
    u: &DVector<f64>,
    z: &DVector<f64>,
    variant: EstimatorVariant,
    cfg: MsifConfig,
    dt: f64,
) -> Result<FilterState> {
    Estimator::new(model_hat.clone(), variant, cfg)?.step(fs, u, z, dt)
}
