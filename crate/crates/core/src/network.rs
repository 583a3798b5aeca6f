//! Recurrent leaky integrate-and-fire network that estimates the plant state
//! and emits the LQR control at the same time.
//!
//! Every weight is synthesized in closed form from the design model, the LQR
//! gain and two random decoders; nothing is trained. The decoded estimate is
//! `x̂ = D r`, the decoded desired state is `D̄ r`, and the control read out for
//! the plant is `u = −K_c (D − D̄) r`.
//!
//! Time is discretized as follows, once per simulation step:
//!
//! 1. forward-Euler drift of the membrane potentials from the slow weights,
//!    the encoded measurement and the desired-state drive, plus membrane noise;
//! 2. leak of the filtered spike trains, `r ← (1 − λ dt) r`;
//! 3. greedy firing: while some live neuron is above threshold, the one with
//!    the largest margin fires (lowest index on ties), its spike is added to `r`
//!    and the fast weights act on `σ` immediately;
//! 4. silenced neurons are clamped to `σ = 0`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::LtiModel;
use crate::error::{Error, Result};
use crate::filters;
use crate::regulator::DesiredState;

/// Firing-loop budget per neuron and step; exceeding `N · MAX_SPIKES_PER_NEURON`
/// iterations is reported as an instability.
pub const MAX_SPIKES_PER_NEURON: usize = 10;

const DEGENERATE_COLUMN: f64 = 1e-12;

/// Estimate decoder `D` and desired-state decoder `D̄`, both `n_x × N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderPair {
    pub d: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
    pub variance_d: f64,
    pub variance_d_bar: f64,
}

impl DecoderPair {
    /// Samples both decoders from one seed (`D̄` uses a different stream).
    pub fn sample(n_x: usize, n: usize, variance_d: f64, variance_d_bar: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            d: sample_decoder(n_x, n, variance_d, seed)?,
            d_bar: sample_decoder(n_x, n, variance_d_bar, seed ^ 0x9e37_79b9_7f4a_7c15)?,
            variance_d,
            variance_d_bar,
        })
    }

    pub fn neurons(&self) -> usize {
        self.d.ncols()
    }
}

/// `n_x × N` matrix of i.i.d. `N(0, variance)` entries; columns too close to
/// zero are redrawn.
pub fn sample_decoder(n_x: usize, n: usize, variance: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(variance > 0.0) || n == 0 || n_x == 0 {
        return Err(Error::Domain(format!(
            "decoder needs variance > 0 and nonempty shape, got variance={variance}, {n_x}x{n}"
        )));
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = DMatrix::zeros(n_x, n);
    for j in 0..n {
        loop {
            for i in 0..n_x {
                d[(i, j)] = normal.sample(&mut rng);
            }
            if d.column(j).norm() >= DEGENERATE_COLUMN {
                break;
            }
        }
    }
    Ok(d)
}

/// Per-neuron thresholds `T_i = (‖D_i‖² + νλ + μλ²) / 2`.
pub fn thresholds(d: &DMatrix<f64>, nu: f64, mu: f64, lambda: f64) -> DVector<f64> {
    let penalty = nu * lambda + mu * lambda * lambda;
    DVector::from_iterator(
        d.ncols(),
        d.column_iter().map(|col| (col.norm_squared() + penalty) / 2.0),
    )
}

/// Weights fixed at construction time.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticWeights {
    /// `DᵀB`, encodes an external control input.
    pub f: DMatrix<f64>,
    /// `Dᵀ(Â + λI)D`
    pub omega_s: DMatrix<f64>,
    /// `−(DᵀD + μλ²I)`
    pub omega_f: DMatrix<f64>,
    /// `−DᵀBK_cD`
    pub omega_c: DMatrix<f64>,
    /// `DᵀBK_cD̄`
    pub omega_bar: DMatrix<f64>,
    /// `−(D̄ᵀD̄ + μλ²I)`
    pub omega_bar_f: DMatrix<f64>,
}

pub fn synthesize_static_weights(
    model_hat: &LtiModel,
    k_c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    d_bar: &DMatrix<f64>,
    lambda: f64,
    mu: f64,
) -> Result<StaticWeights> {
    let n_x = model_hat.n_x();
    let n = d.ncols();
    if d.nrows() != n_x || d_bar.shape() != d.shape() {
        return Err(Error::Dimension(format!(
            "decoders must be {n_x}x{n}, got D {:?} and D̄ {:?}",
            d.shape(),
            d_bar.shape()
        )));
    }
    if k_c.shape() != (model_hat.n_u(), n_x) {
        return Err(Error::Dimension(format!("K_c must be {}x{n_x}", model_hat.n_u())));
    }
    let dt = d.transpose();
    let eye_n = DMatrix::<f64>::identity(n, n);
    let mu_l2 = mu * lambda * lambda;
    let bk = &model_hat.b * k_c;
    Ok(StaticWeights {
        f: &dt * &model_hat.b,
        omega_s: &dt * (&model_hat.a + DMatrix::identity(n_x, n_x) * lambda) * d,
        omega_f: -(&dt * d + &eye_n * mu_l2),
        omega_c: -(&dt * &bk * d),
        omega_bar: &dt * &bk * d_bar,
        omega_bar_f: -(d_bar.transpose() * d_bar + &eye_n * mu_l2),
    })
}

/// Measurement-update weights, refreshed from the innovation covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeights {
    /// `−DᵀGCD`
    pub omega_k: DMatrix<f64>,
    /// `DᵀG`
    pub f_k: DMatrix<f64>,
}

impl AdaptiveWeights {
    fn from_gain(gain: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> Self {
        let f_k = d.transpose() * gain;
        let omega_k = -(&f_k * c * d);
        Self { omega_k, f_k }
    }
}

/// `G = C⁺ diag(sat(diag(P_zz)/δ))`, `Ω_k = −DᵀGCD`, `F_k = DᵀG`.
pub fn update_adaptive_weights(
    p_zz: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    delta: f64,
) -> Result<AdaptiveWeights> {
    let gain = filters::msif_gain(p_zz, c, delta)?;
    Ok(AdaptiveWeights::from_gain(&gain, c, d))
}

/// Neurons that fired during one simulation step, in firing order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeRecord {
    pub step: usize,
    pub neurons: Vec<usize>,
}

/// Leak and firing-rule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub eta_std: f64,
}

#[derive(Debug, Clone)]
pub struct SpikingNetwork {
    pub sigma: DVector<f64>,
    pub r: DVector<f64>,
    pub thresholds: DVector<f64>,
    pub decoders: DecoderPair,
    pub k_c: DMatrix<f64>,
    pub weights: StaticWeights,
    pub adaptive: AdaptiveWeights,
    pub params: NetworkParams,
    pub silenced: Vec<bool>,
    c: DMatrix<f64>,
    adaptive_gain: DMatrix<f64>,
    slow_static: DMatrix<f64>,
    // slow_static + Ω_k, rebuilt with the adaptive weights
    slow_total: DMatrix<f64>,
    fast_total: DMatrix<f64>,
    step_index: usize,
}

impl SpikingNetwork {
    /// Builds the network for design model `model_hat` with the adaptive
    /// weights zeroed; call [`Self::set_adaptive_gain`] before stepping.
    pub fn new(model_hat: &LtiModel, k_c: DMatrix<f64>, decoders: DecoderPair, params: NetworkParams) -> Result<Self> {
        if !(params.lambda > 0.0) || params.mu < 0.0 || params.nu < 0.0 || params.eta_std < 0.0 {
            return Err(Error::Domain(format!("invalid network parameters {params:?}")));
        }
        let n = decoders.neurons();
        let weights =
            synthesize_static_weights(model_hat, &k_c, &decoders.d, &decoders.d_bar, params.lambda, params.mu)?;
        let thresholds = thresholds(&decoders.d, params.nu, params.mu, params.lambda);
        let adaptive_gain = DMatrix::zeros(model_hat.n_x(), model_hat.n_z());
        let adaptive = AdaptiveWeights::from_gain(&adaptive_gain, &model_hat.c, &decoders.d);
        let slow_static = &weights.omega_c + &weights.omega_bar + &weights.omega_s;
        let slow_total = &slow_static + &adaptive.omega_k;
        let fast_total = &weights.omega_f + &weights.omega_bar_f;
        Ok(Self {
            sigma: DVector::zeros(n),
            r: DVector::zeros(n),
            thresholds,
            decoders,
            k_c,
            weights,
            adaptive,
            params,
            silenced: vec![false; n],
            c: model_hat.c.clone(),
            adaptive_gain,
            slow_static,
            slow_total,
            fast_total,
            step_index: 0,
        })
    }

    pub fn neurons(&self) -> usize {
        self.r.len()
    }

    pub fn live_neurons(&self) -> usize {
        self.silenced.iter().filter(|s| !**s).count()
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    /// Current `G = C⁺ sat(·)` behind `Ω_k` and `F_k`.
    pub fn adaptive_gain(&self) -> &DMatrix<f64> {
        &self.adaptive_gain
    }

    /// Installs the measurement gain `G`; the `N × N` products are rebuilt
    /// only when `G` actually changes.
    pub fn set_adaptive_gain(&mut self, gain: &DMatrix<f64>) -> Result<()> {
        if gain.shape() != self.adaptive_gain.shape() {
            return Err(Error::Dimension(format!(
                "adaptive gain must be {:?}",
                self.adaptive_gain.shape()
            )));
        }
        if gain != &self.adaptive_gain {
            self.adaptive_gain = gain.clone();
            self.adaptive = AdaptiveWeights::from_gain(gain, &self.c, &self.decoders.d);
            self.slow_total = &self.slow_static + &self.adaptive.omega_k;
        }
        Ok(())
    }

    /// Refreshes `Ω_k, F_k` from the innovation covariance.
    pub fn update_adaptive(&mut self, p_zz: &DMatrix<f64>, delta: f64) -> Result<()> {
        let gain = filters::msif_gain(p_zz, &self.c, delta)?;
        self.set_adaptive_gain(&gain)
    }

    /// Loads an initial estimate and desired state into the network.
    ///
    /// Starts from `r = 0`, `σ = Dᵀx̂₀ + D̄ᵀx_D` and runs the firing loop, so
    /// that afterwards `D r ≈ x̂₀` and `D̄ r ≈ x_D` to within spike resolution.
    pub fn encode(&mut self, x_hat: &DVector<f64>, x_d: &DVector<f64>) -> Result<Vec<usize>> {
        self.r.fill(0.0);
        self.sigma = self.decoders.d.tr_mul(x_hat) + self.decoders.d_bar.tr_mul(x_d);
        self.clamp_silenced();
        self.fire()
    }

    pub fn decode_state(&self) -> DVector<f64> {
        decode_state(&self.decoders.d, &self.r)
    }

    pub fn decode_desired(&self) -> DVector<f64> {
        decode_state(&self.decoders.d_bar, &self.r)
    }

    pub fn decode_control(&self) -> DVector<f64> {
        decode_control(&self.k_c, &self.decoders.d, &self.decoders.d_bar, &self.r)
    }

    /// Advances the network by one step of length `dt`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        z: &DVector<f64>,
        desired: &DesiredState,
        dt: f64,
        rng: &mut R,
    ) -> Result<SpikeRecord> {
        let lambda = self.params.lambda;
        let drive = &self.slow_total * &self.r
            + &self.adaptive.f_k * z
            + self.decoders.d_bar.tr_mul(&(&desired.x_d_dot + &desired.x_d * lambda));
        self.sigma += (drive - &self.sigma * lambda) * dt;
        if self.params.eta_std > 0.0 {
            let scale = self.params.eta_std * dt.sqrt();
            for s in self.sigma.iter_mut() {
                *s += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        self.r *= 1.0 - lambda * dt;
        self.clamp_silenced();
        let neurons = self.fire()?;
        let record = SpikeRecord {
            step: self.step_index,
            neurons,
        };
        self.step_index += 1;
        Ok(record)
    }

    /// Live neuron with the largest positive margin `σ_i − T_i`, if any.
    fn most_excited(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.sigma.len() {
            if self.silenced[i] {
                continue;
            }
            let margin = self.sigma[i] - self.thresholds[i];
            if margin > 0.0 && best.is_none_or(|(_, m)| margin > m) {
                best = Some((i, margin));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Fires the most excited neuron once, if any is above threshold.
    pub fn fire_once(&mut self) -> Option<usize> {
        let i = self.most_excited()?;
        self.sigma += self.fast_total.column(i);
        self.r[i] += 1.0;
        self.clamp_silenced();
        Some(i)
    }

    fn fire(&mut self) -> Result<Vec<usize>> {
        let budget = self.neurons() * MAX_SPIKES_PER_NEURON;
        let mut fired = Vec::new();
        while let Some(i) = self.fire_once() {
            fired.push(i);
            if fired.len() > budget {
                return Err(Error::Instability {
                    step: self.step_index,
                    reason: format!("firing loop exceeded {budget} spikes"),
                });
            }
        }
        Ok(fired)
    }

    fn clamp_silenced(&mut self) {
        for (s, off) in self.sigma.iter_mut().zip(&self.silenced) {
            if *off {
                *s = 0.0;
            }
        }
    }

    /// Permanently removes the marked neurons from firing. Their rates are
    /// kept and keep leaking.
    pub fn silence(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.neurons() {
            return Err(Error::Dimension(format!(
                "silence mask has {} entries, expected {}",
                mask.len(),
                self.neurons()
            )));
        }
        let merged: Vec<bool> = self.silenced.iter().zip(mask).map(|(a, b)| *a || *b).collect();
        if merged.iter().all(|s| *s) {
            return Err(Error::Config("cannot silence every neuron".into()));
        }
        self.silenced = merged;
        self.clamp_silenced();
        Ok(())
    }
}

/// Free-function form of [`SpikingNetwork::step`].
pub fn network_step<R: Rng + ?Sized>(
    net: &mut SpikingNetwork,
    z: &DVector<f64>,
    desired: &DesiredState,
    dt: f64,
    rng: &mut R,
) -> Result<SpikeRecord> {
    net.step(z, desired, dt, rng)
}

/// Free-function form of [`SpikingNetwork::silence`].
pub fn silence_neurons(net: &mut SpikingNetwork, mask: &[bool]) -> Result<()> {
    net.silence(mask)
}

/// `x̂ = D r`
pub fn decode_state(d: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    d * r
}

/// `u = −K_c (D − D̄) r`
pub fn decode_control(k_c: &DMatrix<f64>, d: &DMatrix<f64>, d_bar: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    -(k_c * ((d - d_bar) * r))
}

/// Increment `dt (‖x − x̂‖² + ν‖r‖₁ + μ‖r‖²)` of the coding objective.
pub fn spike_cost(x_true: &DVector<f64>, x_hat: &DVector<f64>, r: &DVector<f64>, nu: f64, mu: f64, dt: f64) -> f64 {
    dt * ((x_true - x_hat).norm_squared() + nu * r.lp_norm(1) + mu * r.norm_squared())
}
