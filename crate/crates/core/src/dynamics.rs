//! Linear time-invariant plant models, the two case-study scenarios, and
//! noisy propagation / measurement of the true plant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard gravitational parameter of the Earth, m³/s².
pub const MU_EARTH: f64 = 3.986004418e14;
/// Default target orbit radius, m (400 km altitude LEO).
pub const DEFAULT_ORBIT_RADIUS: f64 = 6.771e6;

const SYMMETRY_TOL: f64 = 1e-9;

/// Continuous-time linear plant `ẋ = Ax + Bu + w`, `z = Cx + d`.
///
/// `q` and `r` are the covariances of `w` and `d`; `dt` is the simulation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub dt: f64,
}

impl LtiModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        let model = Self { a, b, c, q, r, dt };
        model.validate()?;
        Ok(model)
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_z(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if !self.a.is_square() {
            return Err(Error::Dimension(format!(
                "A must be square, got {}x{}",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", self.b.nrows())));
        }
        if self.c.ncols() != n {
            return Err(Error::Dimension(format!("C has {} cols, expected {n}", self.c.ncols())));
        }
        if self.q.shape() != (n, n) {
            return Err(Error::Dimension(format!("Q must be {n}x{n}")));
        }
        let m = self.c.nrows();
        if self.r.shape() != (m, m) {
            return Err(Error::Dimension(format!("R must be {m}x{m}")));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {}", self.dt)));
        }
        if !is_symmetric(&self.q) || !is_symmetric(&self.r) {
            return Err(Error::Domain("Q and R must be symmetric".into()));
        }
        if self.q.clone().symmetric_eigenvalues().min() < -SYMMETRY_TOL {
            return Err(Error::Domain("Q must be positive semidefinite".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::Domain("R must be positive definite".into()));
        }
        Ok(())
    }

    /// Copy of this model whose dynamics matrix is scaled by `alpha`.
    ///
    /// Used to build the design model `Â = αA` seen by estimators and
    /// controllers; the truth plant keeps the original.
    pub fn with_scaled_dynamics(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.a *= alpha;
        out
    }

    /// Controllability matrix `[B, AB, …, Aⁿ⁻¹B]`.
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let n = self.n_x();
        let m = self.n_u();
        let mut out = DMatrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for k in 0..n {
            out.view_mut((0, k * m), (n, m)).copy_from(&block);
            block = &self.a * block;
        }
        out
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= SYMMETRY_TOL * (1.0 + m.amax())
}

/// True plant state at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: DVector<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn new(x: DVector<f64>) -> Self {
        Self { x, t: 0.0 }
    }
}

/// Circular-orbit parameters for the rendezvous model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwParams {
    pub mu_earth: f64,
    pub orbit_radius: f64,
}

impl Default for CwParams {
    fn default() -> Self {
        Self {
            mu_earth: MU_EARTH,
            orbit_radius: DEFAULT_ORBIT_RADIUS,
        }
    }
}

impl CwParams {
    pub fn mean_motion(&self) -> Result<f64> {
        mean_motion(self.mu_earth, self.orbit_radius)
    }
}

/// Mean motion `n = sqrt(μ / R_o³)` in rad/s.
pub fn mean_motion(mu_earth: f64, orbit_radius: f64) -> Result<f64> {
    if !(mu_earth > 0.0) || !(orbit_radius > 0.0) {
        return Err(Error::Domain(format!(
            "mean motion needs mu > 0 and R_o > 0, got mu={mu_earth}, R_o={orbit_radius}"
        )));
    }
    Ok((mu_earth / orbit_radius.powi(3)).sqrt())
}

/// Double-integrator workbench plant with position-only measurement.
pub fn build_workbench() -> LtiModel {
    workbench_with_dynamics(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]))
}

/// Workbench plant with the dynamics matrix `[[0,0],[0,1]]` exactly as it is
/// usually printed. `(A, B)` is not stabilizable, so no LQR design exists for it;
/// kept only for documentation and for exercising solver failure paths.
pub fn build_workbench_as_printed() -> LtiModel {
    workbench_with_dynamics(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]))
}

fn workbench_with_dynamics(a: DMatrix<f64>) -> LtiModel {
    LtiModel {
        a,
        b: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        q: DMatrix::identity(2, 2) / 1000.0,
        r: DMatrix::identity(1, 1) / 100.0,
        dt: 0.01,
    }
}

/// Which in-plane coupling the rendezvous dynamics use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CwVariant {
    /// Velocity-coupled terms `ẍ = 2nż`, `ÿ = −n²ẏ`, `z̈ = −2nẋ + 2n²ż`.
    #[default]
    AsPrinted,
    /// Textbook Hill equations with `x` along-track, `y` cross-track and `z`
    /// radial: `ẍ = 2nż`, `ÿ = −n²y`, `z̈ = −2nẋ + 3n²z`.
    Standard,
}

/// Rendezvous model for state `[x, y, z, ẋ, ẏ, ż]` and thrust `[f_x, f_y, f_z]`,
/// measured through position only (`C = [I₃ | 0]`).
pub fn build_cw(n: f64, dt: f64, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<LtiModel> {
    build_cw_variant(n, dt, q, r, CwVariant::AsPrinted)
}

pub fn build_cw_variant(n: f64, dt: f64, q: DMatrix<f64>, r: DMatrix<f64>, variant: CwVariant) -> Result<LtiModel> {
    if !(n > 0.0) {
        return Err(Error::Domain(format!("mean motion must be positive, got {n}")));
    }
    let mut a = DMatrix::zeros(6, 6);
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
    }
    match variant {
        CwVariant::AsPrinted => {
            a[(3, 5)] = 2.0 * n;
            a[(4, 4)] = -n * n;
            a[(5, 3)] = -2.0 * n;
            a[(5, 5)] = 2.0 * n * n;
        }
        CwVariant::Standard => {
            a[(3, 5)] = 2.0 * n;
            a[(4, 1)] = -n * n;
            a[(5, 3)] = -2.0 * n;
            a[(5, 2)] = 3.0 * n * n;
        }
    }
    let mut b = DMatrix::zeros(6, 3);
    let mut c = DMatrix::zeros(3, 6);
    for i in 0..3 {
        b[(i + 3, i)] = 1.0;
        c[(i, i)] = 1.0;
    }
    LtiModel::new(a, b, c, q, r, dt)
}

/// Draws zero-mean Gaussian vectors with a fixed (PSD) covariance.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(covariance: &DMatrix<f64>) -> Self {
        let eig = covariance.clone().symmetric_eigen();
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
        Self { factor }
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * xi
    }
}

/// The true plant: its model plus cached noise factors.
///
/// Process noise is discretized Euler–Maruyama style, `w_k ~ N(0, Q·dt)`.
#[derive(Debug, Clone)]
pub struct Plant {
    model: LtiModel,
    process: GaussianSampler,
    measurement: GaussianSampler,
}

impl Plant {
    pub fn new(model: LtiModel) -> Self {
        let process = GaussianSampler::new(&(&model.q * model.dt));
        let measurement = GaussianSampler::new(&model.r);
        Self {
            model,
            process,
            measurement,
        }
    }

    pub fn model(&self) -> &LtiModel {
        &self.model
    }

    /// One Euler–Maruyama step `x' = x + dt(Ax + Bu) + w`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &PlantState,
        u: &DVector<f64>,
        rng: &mut R,
        noise_on: bool,
    ) -> PlantState {
        let m = &self.model;
        let mut x = &state.x + (&m.a * &state.x + &m.b * u) * m.dt;
        if noise_on {
            x += self.process.sample(rng);
        }
        PlantState { x, t: state.t + m.dt }
    }

    /// `z = Cx + s·d` with `d ~ N(0, R)`; `s` is the outlier scale (1 nominally).
    pub fn measure<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        rng: &mut R,
        noise_on: bool,
        outlier_scale: f64,
    ) -> DVector<f64> {
        let mut z = &self.model.c * x;
        if noise_on {
            z += self.measurement.sample(rng) * outlier_scale;
        }
        z
    }
}

/// Free-function form of [`Plant::step`]. Rebuilds the noise factor per call;
/// prefer a long-lived [`Plant`] inside loops.
pub fn step_plant<R: Rng + ?Sized>(
    model: &LtiModel,
    state: &PlantState,
    u: &DVector<f64>,
    rng: &mut R,
    noise_on: bool,
) -> PlantState {
    Plant::new(model.clone()).step(state, u, rng, noise_on)
}

/// Free-function form of [`Plant::measure`].
pub fn measure<R: Rng + ?Sized>(
    model: &LtiModel,
    x: &DVector<f64>,
    rng: &mut R,
    noise_on: bool,
    outlier_scale: f64,
) -> Result<DVector<f64>> {
    if !(outlier_scale >= 1.0) {
        return Err(Error::Domain(format!(
            "outlier scale must be >= 1, got {outlier_scale}"
        )));
    }
    Ok(Plant::new(model.clone()).measure(x, rng, noise_on, outlier_scale))
}
