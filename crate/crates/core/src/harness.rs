//! Closed-loop experiments: scenario defaults, the simulation loop for the
//! three frameworks, metrics, parameter sweeps and file output.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{build_cw_variant, build_workbench, CwParams, CwVariant, LtiModel, Plant, PlantState};
use crate::error::{Error, Result};
use crate::filters::{Estimator, EstimatorVariant, FilterState, MsifConfig};
use crate::network::{spike_cost, DecoderPair, NetworkParams, SpikingNetwork};
use crate::regulator::{control_law, lqr_cost, DesiredState, LqrDesign};

/// Independent random streams drawn from one master seed.
const STREAM_PLANT: u64 = 0;
const STREAM_MEASUREMENT: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_MEMBRANE: u64 = 3;

/// Preferred cell of the firing-parameter grid.
pub const PREFERRED_MU_NU: (f64, f64) = (0.005, 0.005);

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Workbench,
    Cw,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Workbench => "workbench",
            Scenario::Cw => "cw",
        }
    }

    pub fn state_labels(self) -> Vec<&'static str> {
        match self {
            Scenario::Workbench => vec!["x1", "x2"],
            Scenario::Cw => vec!["x(m)", "y(m)", "z(m)", "vx(m/s)", "vy(m/s)", "vz(m/s)"],
        }
    }

    /// Measurement-outlier instants and scale used for this scenario's
    /// robustness runs.
    pub fn outlier_preset(self) -> (Vec<f64>, f64) {
        match self {
            Scenario::Workbench => (vec![3.0, 5.0, 6.0], 500.0),
            Scenario::Cw => (vec![100.0, 150.0, 200.0], 200.0),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "workbench" => Ok(Scenario::Workbench),
            "cw" => Ok(Scenario::Cw),
            other => Err(Error::Config(format!(
                "unknown scenario '{other}' (expected workbench or cw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Framework {
    #[serde(rename = "lqg")]
    Lqg,
    #[serde(rename = "lqr-msif")]
    LqrMsif,
    #[serde(rename = "snn-lqr-msif")]
    SnnLqrMsif,
}

impl Framework {
    pub const ALL: [Framework; 3] = [Framework::Lqg, Framework::LqrMsif, Framework::SnnLqrMsif];

    pub fn name(self) -> &'static str {
        match self {
            Framework::Lqg => "lqg",
            Framework::LqrMsif => "lqr-msif",
            Framework::SnnLqrMsif => "snn-lqr-msif",
        }
    }

    pub fn is_spiking(self) -> bool {
        self == Framework::SnnLqrMsif
    }

    fn estimator_variant(self) -> EstimatorVariant {
        match self {
            Framework::Lqg => EstimatorVariant::Kalman,
            Framework::LqrMsif | Framework::SnnLqrMsif => EstimatorVariant::Msif,
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lqg" => Ok(Framework::Lqg),
            "lqr-msif" => Ok(Framework::LqrMsif),
            "snn-lqr-msif" => Ok(Framework::SnnLqrMsif),
            other => Err(Error::Config(format!(
                "unknown framework '{other}' (expected lqg, lqr-msif or snn-lqr-msif)"
            ))),
        }
    }
}

/// Neurons switched off from `time` onwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SilenceEvent {
    pub time: f64,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySpec {
    /// `α` in `Â = α A`.
    pub model_scale: f64,
    pub outlier_times: Vec<f64>,
    pub outlier_scale: f64,
    pub silence_schedule: Vec<SilenceEvent>,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        Self {
            model_scale: 1.0,
            outlier_times: Vec::new(),
            outlier_scale: 1.0,
            silence_schedule: Vec::new(),
        }
    }
}

impl UncertaintySpec {
    pub fn with_outliers(times: Vec<f64>, scale: f64) -> Self {
        Self {
            outlier_times: times,
            outlier_scale: scale,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub framework: Framework,
    pub duration: f64,
    pub dt: f64,
    pub n_neurons: usize,
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub delta: f64,
    pub eta_std: f64,
    pub seeds: Vec<u64>,
    pub uncertainty: UncertaintySpec,
    /// Window (steps) for the active-neuron series.
    pub metrics_window: usize,
    pub error_tail_start: f64,
    pub x0: Vec<f64>,
    /// `Q_c = q_c_scale · I`
    pub q_c_scale: f64,
    /// `R_c = r_c_scale · I`
    pub r_c_scale: f64,
    pub decoder_variance: f64,
    pub desired_decoder_variance: f64,
    /// `P(0) = p0_scale · I`
    pub p0_scale: f64,
    /// Process and measurement noise on or off.
    pub noise: bool,
    pub cw_variant: CwVariant,
}

impl ExperimentConfig {
    /// Nominal parameter set of a scenario.
    pub fn defaults(scenario: Scenario, framework: Framework) -> Self {
        let seeds: Vec<u64> = (0..10).collect();
        match scenario {
            Scenario::Workbench => Self {
                scenario,
                framework,
                duration: 10.0,
                dt: 0.01,
                n_neurons: 250,
                lambda: 0.01,
                mu: 0.005,
                nu: 0.005,
                delta: 0.005,
                eta_std: 0.0,
                seeds,
                uncertainty: UncertaintySpec::default(),
                metrics_window: 10,
                error_tail_start: 6.0,
                x0: vec![10.0, 1.0],
                q_c_scale: 1.0,
                r_c_scale: 1.0,
                decoder_variance: 0.25,
                desired_decoder_variance: 1.0 / 300.0,
                p0_scale: 1e-2,
                noise: true,
                cw_variant: CwVariant::AsPrinted,
            },
            Scenario::Cw => Self {
                scenario,
                framework,
                duration: 360.0,
                dt: 0.1,
                n_neurons: 350,
                lambda: 0.001,
                mu: 1.0,
                nu: 1e-4,
                delta: 0.005,
                eta_std: 0.0,
                seeds,
                uncertainty: UncertaintySpec::default(),
                metrics_window: 10,
                error_tail_start: 300.0,
                x0: vec![70.0, 30.0, -5.0, -1.7, -0.9, 0.25],
                q_c_scale: 1e-6,
                r_c_scale: 1.0,
                decoder_variance: 1.0 / 50.0,
                desired_decoder_variance: 1.0 / 2500.0,
                // x̂(0) = x(0) exactly, so the start-up covariance is kept small.
                p0_scale: 1e-4,
                noise: true,
                cw_variant: CwVariant::AsPrinted,
            },
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.dt > 0.0) || !(self.duration > 0.0) {
            return bad(format!(
                "duration and dt must be positive, got {} and {}",
                self.duration, self.dt
            ));
        }
        let ratio = self.duration / self.dt;
        if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
            return bad(format!(
                "duration {} is not a whole number of steps of {}",
                self.duration, self.dt
            ));
        }
        if self.framework.is_spiking() && self.n_neurons == 0 {
            return bad("spiking framework needs at least one neuron".into());
        }
        if !(self.lambda > 0.0) || self.mu < 0.0 || self.nu < 0.0 || !(self.delta > 0.0) || self.eta_std < 0.0 {
            return bad("need lambda > 0, delta > 0 and nonnegative mu, nu, eta_std".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.metrics_window == 0 {
            return bad("metrics_window must be at least 1".into());
        }
        if !(self.error_tail_start >= 0.0 && self.error_tail_start < self.duration) {
            return bad(format!(
                "error_tail_start {} must lie in [0, duration)",
                self.error_tail_start
            ));
        }
        let n_x = match self.scenario {
            Scenario::Workbench => 2,
            Scenario::Cw => 6,
        };
        if self.x0.len() != n_x {
            return bad(format!("x0 must have {n_x} entries for {}", self.scenario));
        }
        if !(self.q_c_scale > 0.0 && self.r_c_scale > 0.0 && self.p0_scale >= 0.0) {
            return bad("need q_c_scale > 0, r_c_scale > 0 and p0_scale >= 0".into());
        }
        if !(self.decoder_variance > 0.0 && self.desired_decoder_variance > 0.0) {
            return bad("decoder variances must be positive".into());
        }
        let u = &self.uncertainty;
        if !(u.model_scale > 0.0) {
            return bad(format!("model_scale must be positive, got {}", u.model_scale));
        }
        if !(u.outlier_scale >= 1.0) {
            return bad(format!("outlier_scale must be >= 1, got {}", u.outlier_scale));
        }
        if let Some(t) = u.outlier_times.iter().find(|t| !(**t >= 0.0 && **t <= self.duration)) {
            return bad(format!("outlier time {t} outside [0, {}]", self.duration));
        }
        for ev in &u.silence_schedule {
            if ev.mask.len() != self.n_neurons {
                return bad(format!(
                    "silence mask has {} entries, expected {}",
                    ev.mask.len(),
                    self.n_neurons
                ));
            }
            if !(ev.time >= 0.0 && ev.time <= self.duration) {
                return bad(format!("silence time {} outside [0, {}]", ev.time, self.duration));
            }
        }
        Ok(())
    }

    /// Truth model of the scenario.
    pub fn plant_model(&self) -> Result<LtiModel> {
        match self.scenario {
            Scenario::Workbench => {
                let mut m = build_workbench();
                m.dt = self.dt;
                m.validate()?;
                Ok(m)
            }
            Scenario::Cw => {
                let n = CwParams::default().mean_motion()?;
                let q = DMatrix::identity(6, 6) * 1e-12;
                let r = DMatrix::identity(3, 3) * 1e-2;
                build_cw_variant(n, self.dt, q, r, self.cw_variant)
            }
        }
    }

    /// Model the estimator, controller and network are built from.
    pub fn design_model(&self) -> Result<LtiModel> {
        Ok(self.plant_model()?.with_scaled_dynamics(self.uncertainty.model_scale))
    }

    /// LQR design on the design model.
    pub fn lqr(&self) -> Result<LqrDesign> {
        let m = self.design_model()?;
        let (n_x, n_u) = (m.n_x(), m.n_u());
        LqrDesign::new(
            &m.a,
            &m.b,
            DMatrix::identity(n_x, n_x) * self.q_c_scale,
            DMatrix::identity(n_u, n_u) * self.r_c_scale,
        )
    }

    pub fn x0_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }

    /// Choices made where the nominal setup leaves room, echoed into run
    /// summaries.
    pub fn corrections(&self) -> Vec<String> {
        let mut log = Vec::new();
        match self.scenario {
            Scenario::Workbench => {
                log.push("workbench A is the double integrator [[0,1],[0,0]]".to_string());
            }
            Scenario::Cw => {
                log.push("cw measurement C = [I3 | 0], R = 1e-2 I3".to_string());
                log.push(format!("cw A variant: {:?}", self.cw_variant));
            }
        }
        log.push(format!("P(0) = {:e} I", self.p0_scale));
        log.push("K_c designed on the design model A_hat = alpha A".to_string());
        log.push("covariance P propagated by the Riccati ODE without a posterior reset".to_string());
        if self.framework.is_spiking() {
            log.push("network initialised by encoding x_hat(0) and x_D through the full fast reset".to_string());
            log.push("thresholds use the state decoder D only".to_string());
        }
        log
    }
}

/// Series and metrics of one closed-loop run; row `k` is time `k·dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario: Scenario,
    pub framework: Framework,
    pub seed: u64,
    pub dt: f64,
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub x_hat: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub p_diag: Vec<DVector<f64>>,
    /// `(step, neuron)` pairs, spiking framework only.
    pub raster: Vec<(usize, usize)>,
    pub n_neurons: usize,
    pub tail_start: f64,
    pub tail_error: Vec<f64>,
    pub spike_fraction: f64,
    pub active_fraction: Vec<f64>,
    pub lqr_cost: f64,
    pub spike_cost: f64,
}

impl RunResult {
    pub fn steps(&self) -> usize {
        self.t.len()
    }

    pub fn spike_count(&self) -> usize {
        self.raster.len()
    }
}

/// Runs one closed-loop simulation for `seed`.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let truth = cfg.plant_model()?;
    let model_hat = cfg.design_model()?;
    let lqr = cfg.lqr()?;
    let n_x = truth.n_x();
    let steps = cfg.steps();
    let dt = cfg.dt;
    let desired = DesiredState::origin(n_x);

    let plant = Plant::new(truth);
    let estimator = Estimator::new(
        model_hat.clone(),
        cfg.framework.estimator_variant(),
        MsifConfig::new(cfg.delta)?,
    )?;
    let mut plant_rng = seeded_stream(seed, STREAM_PLANT);
    let mut meas_rng = seeded_stream(seed, STREAM_MEASUREMENT);
    let mut eta_rng = seeded_stream(seed, STREAM_MEMBRANE);

    let x0 = cfg.x0_vector();
    let mut state = PlantState::new(x0.clone());
    let mut fs = FilterState::new(x0.clone(), cfg.p0_scale);

    let mut net = if cfg.framework.is_spiking() {
        let decoder_seed = seeded_stream(seed, STREAM_DECODER).next_u64();
        let decoders = DecoderPair::sample(
            n_x,
            cfg.n_neurons,
            cfg.decoder_variance,
            cfg.desired_decoder_variance,
            decoder_seed,
        )?;
        let params = NetworkParams {
            lambda: cfg.lambda,
            mu: cfg.mu,
            nu: cfg.nu,
            eta_std: cfg.eta_std,
        };
        let mut net = SpikingNetwork::new(&model_hat, lqr.k_c.clone(), decoders, params)?;
        net.update_adaptive(&estimator.innovation_covariance(&fs.p), cfg.delta)?;
        net.encode(&x0, &desired.x_d)?;
        Some(net)
    } else {
        None
    };

    let mut silence: Vec<&SilenceEvent> = cfg.uncertainty.silence_schedule.iter().collect();
    silence.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut next_silence = 0;

    let mut out = RunResult {
        scenario: cfg.scenario,
        framework: cfg.framework,
        seed,
        dt,
        t: Vec::with_capacity(steps),
        x: Vec::with_capacity(steps),
        x_hat: Vec::with_capacity(steps),
        u: Vec::with_capacity(steps),
        z: Vec::with_capacity(steps),
        p_diag: Vec::with_capacity(steps),
        raster: Vec::new(),
        n_neurons: if cfg.framework.is_spiking() { cfg.n_neurons } else { 0 },
        tail_start: cfg.error_tail_start,
        tail_error: Vec::new(),
        spike_fraction: 0.0,
        active_fraction: Vec::new(),
        lqr_cost: 0.0,
        spike_cost: 0.0,
    };

    for k in 0..steps {
        let t = k as f64 * dt;
        if let Some(net) = net.as_mut() {
            while next_silence < silence.len() && silence[next_silence].time <= t + dt / 2.0 {
                net.silence(&silence[next_silence].mask)?;
                next_silence += 1;
            }
        }
        let scale = if cfg.uncertainty.outlier_times.iter().any(|to| (t - to).abs() < dt / 2.0) {
            cfg.uncertainty.outlier_scale
        } else {
            1.0
        };
        let z = plant.measure(&state.x, &mut meas_rng, cfg.noise, scale);
        let (x_hat, u) = match &net {
            Some(net) => (net.decode_state(), net.decode_control()),
            None => (fs.x_hat.clone(), control_law(&lqr.k_c, &fs.x_hat, &desired)),
        };
        if let Some(net) = &net {
            out.spike_cost += spike_cost(&state.x, &x_hat, &net.r, cfg.nu, cfg.mu, dt);
        }
        out.t.push(t);
        out.x.push(state.x.clone());
        out.x_hat.push(x_hat);
        out.u.push(u.clone());
        out.z.push(z.clone());
        out.p_diag.push(fs.p.diagonal());

        match net.as_mut() {
            Some(net) => {
                net.update_adaptive(&estimator.innovation_covariance(&fs.p), cfg.delta)?;
                let record = net.step(&z, &desired, dt, &mut eta_rng)?;
                out.raster.extend(record.neurons.iter().map(|i| (k, *i)));
                fs.p = estimator.propagate_covariance(&fs.p, dt);
                fs.t = t + dt;
            }
            None => fs = estimator.step(&fs, &u, &z, dt)?,
        }
        state = plant.step(&state, &u, &mut plant_rng, cfg.noise);
        if state.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability {
                step: k,
                reason: "plant state is no longer finite".into(),
            });
        }
    }

    out.tail_error = avg_error_after(&out, cfg.error_tail_start);
    out.lqr_cost = lqr_cost(&out.x, &out.u, &lqr.q_c, &lqr.r_c, dt);
    if cfg.framework.is_spiking() {
        out.spike_fraction = spike_fraction(&out.raster, cfg.n_neurons, steps);
        out.active_fraction = active_fraction_timeseries(&out.raster, cfg.n_neurons, steps, cfg.metrics_window);
    }
    Ok(out)
}

/// Runs every seed of `cfg` in parallel; results keep seed order.
pub fn run_seeds(cfg: &ExperimentConfig) -> Vec<Result<RunResult>> {
    cfg.seeds.par_iter().map(|seed| run_experiment(cfg, *seed)).collect()
}

/// Per-state mean of `|x_i(t)|` over `t ≥ t_start`.
pub fn tail_average(t: &[f64], x: &[DVector<f64>], t_start: f64, dt: f64) -> Vec<f64> {
    let n_x = x.first().map_or(0, |v| v.len());
    let mut sum = vec![0.0; n_x];
    let mut count = 0usize;
    for (ti, xi) in t.iter().zip(x) {
        if *ti >= t_start - 1e-9 * dt {
            for (s, v) in sum.iter_mut().zip(xi.iter()) {
                *s += v.abs();
            }
            count += 1;
        }
    }
    if count > 0 {
        for s in &mut sum {
            *s /= count as f64;
        }
    }
    sum
}

/// Controlled-state error averaged over the tail window, per state.
pub fn avg_error_after(result: &RunResult, t_start: f64) -> Vec<f64> {
    tail_average(&result.t, &result.x, t_start, result.dt)
}

/// Percent of the `n · steps` possible spikes that were emitted.
pub fn spike_fraction(raster: &[(usize, usize)], n: usize, steps: usize) -> f64 {
    if n == 0 || steps == 0 {
        return 0.0;
    }
    100.0 * raster.len() as f64 / (n * steps) as f64
}

/// At step `k`, percent of neurons with at least one spike in `(k − window, k]`.
pub fn active_fraction_timeseries(raster: &[(usize, usize)], n: usize, steps: usize, window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut last_spike: Vec<Option<usize>> = vec![None; n];
    let mut series = Vec::with_capacity(steps);
    let mut idx = 0;
    let mut sorted;
    let raster = if raster.windows(2).all(|w| w[0].0 <= w[1].0) {
        raster
    } else {
        sorted = raster.to_vec();
        sorted.sort_by_key(|p| p.0);
        &sorted
    };
    for k in 0..steps {
        while idx < raster.len() && raster[idx].0 <= k {
            let (step, i) = raster[idx];
            if i < n {
                last_spike[i] = Some(step);
            }
            idx += 1;
        }
        let active = last_spike.iter().filter(|s| s.is_some_and(|s| s + window > k)).count();
        series.push(if n == 0 { 0.0 } else { 100.0 * active as f64 / n as f64 });
    }
    series
}

/// `±3 sqrt(diag P)` per step (the half-width of the envelope).
pub fn three_sigma_bounds(p_diag: &[DVector<f64>]) -> Vec<DVector<f64>> {
    p_diag.iter().map(|p| p.map(|v| 3.0 * v.max(0.0).sqrt())).collect()
}

/// Largest `|x_i − x̂_i| / (3σ_i)` over the states, per step. A value above 1
/// means the estimate left its envelope.
pub fn normalized_estimation_error(result: &RunResult) -> Vec<f64> {
    let bounds = three_sigma_bounds(&result.p_diag);
    result
        .x
        .iter()
        .zip(&result.x_hat)
        .zip(&bounds)
        .map(|((x, xh), b)| {
            (x - xh)
                .iter()
                .zip(b.iter())
                .map(|(e, b)| {
                    if *b > 0.0 {
                        e.abs() / b
                    } else if *e == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Steps after `from_step` until the normalized error is back inside the
/// envelope, or `None` if it never is.
pub fn reentry_steps(normalized: &[f64], from_step: usize) -> Option<usize> {
    normalized
        .iter()
        .enumerate()
        .skip(from_step + 1)
        .find(|(_, v)| **v <= 1.0)
        .map(|(j, _)| j - from_step)
}

/// Row at which an outlier at time `t` is measured; it shows in the estimate
/// from the next row on.
pub fn outlier_step(t: f64, dt: f64) -> usize {
    (t / dt).round() as usize
}

fn mean_and_std(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n_x = rows.first().map_or(0, |r| r.len());
    let count = rows.len() as f64;
    let mean: Vec<f64> = (0..n_x)
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / count)
        .collect();
    let std = (0..n_x)
        .map(|i| {
            if rows.len() < 2 {
                0.0
            } else {
                (rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / (count - 1.0)).sqrt()
            }
        })
        .collect();
    (mean, std)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSweepRow {
    pub n: usize,
    /// Per-state tail error averaged over the seeds that completed.
    pub tail_error: Vec<f64>,
    /// Norm of `tail_error`; infinite if no seed completed.
    pub error_norm: f64,
    pub instabilities: usize,
    pub divergent: bool,
}

/// Tail error of the spiking framework as a function of the neuron count.
pub fn sweep_neurons(base: &ExperimentConfig, n_list: &[usize]) -> Result<Vec<NeuronSweepRow>> {
    if n_list.is_empty() {
        return Err(Error::Config("neuron list is empty".into()));
    }
    let x0_norm = norm(&base.x0);
    let cells: Vec<(usize, u64)> = n_list
        .iter()
        .flat_map(|n| base.seeds.iter().map(move |s| (*n, *s)))
        .collect();
    let runs: Vec<Result<RunResult>> = cells
        .par_iter()
        .map(|(n, seed)| {
            let mut cfg = base.clone();
            cfg.framework = Framework::SnnLqrMsif;
            cfg.n_neurons = *n;
            run_experiment(&cfg, *seed)
        })
        .collect();
    let per_n = base.seeds.len();
    let mut rows = Vec::with_capacity(n_list.len());
    for (j, n) in n_list.iter().enumerate() {
        let mut ok = Vec::new();
        let mut instabilities = 0;
        for r in &runs[j * per_n..(j + 1) * per_n] {
            match r {
                Ok(run) => ok.push(run.tail_error.clone()),
                Err(Error::Instability { .. }) => instabilities += 1,
                Err(e) => return Err(Error::Config(format!("sweep cell N={n} failed: {e}"))),
            }
        }
        let (tail_error, error_norm) = if ok.is_empty() {
            (vec![f64::INFINITY; base.x0.len()], f64::INFINITY)
        } else {
            let (mean, _) = mean_and_std(&ok);
            let e = norm(&mean);
            (mean, e)
        };
        let divergent = instabilities > 0 || !(error_norm <= 10.0 * x0_norm);
        rows.push(NeuronSweepRow {
            n: *n,
            tail_error,
            error_norm,
            instabilities,
            divergent,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiringCell {
    pub mu: f64,
    pub nu: f64,
    pub error_norm: f64,
    /// `error_norm` divided by the largest finite error of the grid.
    pub normalized_error: f64,
    pub spike_percent: f64,
    pub instabilities: usize,
    pub preferred: bool,
}

/// Tail error and spike percentage over a `μ × ν` grid, in `mu`-major order.
pub fn sweep_firing_params(base: &ExperimentConfig, mu_list: &[f64], nu_list: &[f64]) -> Result<Vec<FiringCell>> {
    if mu_list.is_empty() || nu_list.is_empty() {
        return Err(Error::Config("mu and nu lists must be nonempty".into()));
    }
    let cells: Vec<(f64, f64)> = mu_list
        .iter()
        .flat_map(|m| nu_list.iter().map(move |n| (*m, *n)))
        .collect();
    let mut grid: Vec<FiringCell> = cells
        .par_iter()
        .map(|(mu, nu)| {
            let mut cfg = base.clone();
            cfg.framework = Framework::SnnLqrMsif;
            cfg.mu = *mu;
            cfg.nu = *nu;
            let mut errors = Vec::new();
            let mut spikes = Vec::new();
            let mut instabilities = 0;
            for seed in &cfg.seeds {
                match run_experiment(&cfg, *seed) {
                    Ok(run) => {
                        errors.push(norm(&run.tail_error));
                        spikes.push(run.spike_fraction);
                    }
                    Err(Error::Instability { .. }) => instabilities += 1,
                    Err(e) => return Err(e),
                }
            }
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    f64::INFINITY
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            Ok(FiringCell {
                mu: *mu,
                nu: *nu,
                error_norm: mean(&errors),
                normalized_error: f64::NAN,
                spike_percent: mean(&spikes),
                instabilities,
                preferred: (*mu, *nu) == PREFERRED_MU_NU,
            })
        })
        .collect::<Result<_>>()?;
    let max = grid
        .iter()
        .map(|c| c.error_norm)
        .filter(|e| e.is_finite())
        .fold(0.0, f64::max);
    for c in &mut grid {
        c.normalized_error = if max > 0.0 { c.error_norm / max } else { 1.0 };
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub framework: Framework,
    pub mean_tail_error: Vec<f64>,
    pub std_tail_error: Vec<f64>,
    /// Mean spike percentage, spiking framework only.
    pub spike_fraction: Option<f64>,
    pub runs: usize,
    pub instabilities: usize,
}

/// Mean tail error per framework and state over `seeds`.
pub fn compare_frameworks(base: &ExperimentConfig, frameworks: &[Framework], seeds: &[u64]) -> Result<Vec<CompareRow>> {
    if frameworks.is_empty() {
        return Err(Error::Config("at least one framework is required".into()));
    }
    frameworks
        .iter()
        .map(|fw| {
            let mut cfg = base.clone();
            cfg.framework = *fw;
            cfg.seeds = seeds.to_vec();
            let mut ok = Vec::new();
            let mut spikes = Vec::new();
            let mut instabilities = 0;
            for r in run_seeds(&cfg) {
                match r {
                    Ok(run) => {
                        spikes.push(run.spike_fraction);
                        ok.push(run.tail_error);
                    }
                    Err(Error::Instability { .. }) => instabilities += 1,
                    Err(e) => return Err(e),
                }
            }
            let (mean_tail_error, std_tail_error) = if ok.is_empty() {
                (vec![f64::NAN; cfg.x0.len()], vec![f64::NAN; cfg.x0.len()])
            } else {
                mean_and_std(&ok)
            };
            let spike_fraction =
                (fw.is_spiking() && !spikes.is_empty()).then(|| spikes.iter().sum::<f64>() / spikes.len() as f64);
            Ok(CompareRow {
                framework: *fw,
                mean_tail_error,
                std_tail_error,
                spike_fraction,
                runs: ok.len(),
                instabilities,
            })
        })
        .collect()
}

/// Plain-text table with one column per framework and one row per state.
pub fn format_compare_table(scenario: Scenario, rows: &[CompareRow]) -> String {
    let labels = scenario.state_labels();
    let mut s = format!("{:<10}", "state");
    for r in rows {
        s.push_str(&format!(" {:>14}", r.framework.name()));
    }
    s.push('\n');
    for (i, label) in labels.iter().enumerate() {
        s.push_str(&format!("{label:<10}"));
        for r in rows {
            s.push_str(&format!(
                " {:>14.6}",
                r.mean_tail_error.get(i).copied().unwrap_or(f64::NAN)
            ));
        }
        s.push('\n');
    }
    s
}

fn vector_header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

/// One row per step: `t, x*, xhat*, u*, z*, p*`.
pub fn write_trajectories_csv(result: &RunResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = |v: &[DVector<f64>]| v.first().map_or(0, |x| x.len());
    let mut header = vec!["t".to_string()];
    header.extend(vector_header("x", dim(&result.x)));
    header.extend(vector_header("xhat", dim(&result.x_hat)));
    header.extend(vector_header("u", dim(&result.u)));
    header.extend(vector_header("z", dim(&result.z)));
    header.extend(vector_header("p", dim(&result.p_diag)));
    w.write_record(&header)?;
    for k in 0..result.steps() {
        let mut row = vec![result.t[k].to_string()];
        for series in [&result.x, &result.x_hat, &result.u, &result.z, &result.p_diag] {
            row.extend(series[k].iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Trajectory series read back from a trajectories CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub x_hat: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub p_diag: Vec<DVector<f64>>,
}

pub fn read_trajectories_csv(path: &Path) -> Result<Trajectories> {
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let columns = |prefix: &str| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.strip_prefix(prefix).is_some_and(|rest| rest.parse::<usize>().is_ok()))
            .map(|(i, _)| i)
            .collect()
    };
    let t_col = header
        .iter()
        .position(|h| h == "t")
        .ok_or_else(|| Error::Config(format!("{} has no t column", path.display())))?;
    // "x" would also match nothing else since xhat columns do not parse as x<index>.
    let groups = [columns("x"), columns("xhat"), columns("u"), columns("z"), columns("p")];
    let mut out = Trajectories {
        t: Vec::new(),
        x: Vec::new(),
        x_hat: Vec::new(),
        u: Vec::new(),
        z: Vec::new(),
        p_diag: Vec::new(),
    };
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad number '{}': {e}", &rec[i])))
        };
        out.t.push(num(t_col)?);
        let mut vecs = Vec::with_capacity(5);
        for g in &groups {
            vecs.push(DVector::from_vec(
                g.iter().map(|i| num(*i)).collect::<Result<Vec<_>>>()?,
            ));
        }
        let mut it = vecs.into_iter();
        out.x.push(it.next().unwrap());
        out.x_hat.push(it.next().unwrap());
        out.u.push(it.next().unwrap());
        out.z.push(it.next().unwrap());
        out.p_diag.push(it.next().unwrap());
    }
    Ok(out)
}

/// Spike raster as `step,neuron` rows.
pub fn write_raster_csv(raster: &[(usize, usize)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "neuron"])?;
    for (k, i) in raster {
        w.write_record([k.to_string(), i.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raster_csv(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        let (k, i): (usize, usize) = rec?;
        out.push((k, i));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub tail_start: f64,
    pub tail_error: Vec<f64>,
    pub spike_fraction: f64,
    pub spike_count: usize,
    pub n_neurons: usize,
    pub steps: usize,
    pub lqr_cost: f64,
    pub spike_cost: f64,
}

impl From<&RunResult> for RunMetrics {
    fn from(r: &RunResult) -> Self {
        Self {
            seed: r.seed,
            tail_start: r.tail_start,
            tail_error: r.tail_error.clone(),
            spike_fraction: r.spike_fraction,
            spike_count: r.spike_count(),
            n_neurons: r.n_neurons,
            steps: r.steps(),
            lqr_cost: r.lqr_cost,
            spike_cost: r.spike_cost,
        }
    }
}

/// Config echo, metrics and the corrections log of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub state_labels: Vec<String>,
    pub metrics: RunMetrics,
    pub corrections: Vec<String>,
}

impl RunSummary {
    pub fn new(cfg: &ExperimentConfig, result: &RunResult) -> Self {
        Self {
            config: cfg.clone(),
            state_labels: cfg.scenario.state_labels().iter().map(|s| s.to_string()).collect(),
            metrics: RunMetrics::from(result),
            corrections: cfg.corrections(),
        }
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_summary_json(path: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

/// Writes `trajectories.csv`, `raster.csv` (spiking only) and `summary.json`.
pub fn write_run(cfg: &ExperimentConfig, result: &RunResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_trajectories_csv(result, &dir.join("trajectories.csv"))?;
    if result.framework.is_spiking() {
        write_raster_csv(&result.raster, &dir.join("raster.csv"))?;
    }
    write_json(&RunSummary::new(cfg, result), &dir.join("summary.json"))
}

pub fn write_compare_csv(scenario: Scenario, rows: &[CompareRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "framework",
        "state",
        "mean_tail_error",
        "std_tail_error",
        "runs",
        "instabilities",
    ])?;
    for r in rows {
        for (i, label) in scenario.state_labels().iter().enumerate() {
            w.write_record([
                r.framework.name().to_string(),
                label.to_string(),
                r.mean_tail_error[i].to_string(),
                r.std_tail_error[i].to_string(),
                r.runs.to_string(),
                r.instabilities.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_neuron_sweep_csv(rows: &[NeuronSweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "error_norm", "instabilities", "divergent"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.error_norm.to_string(),
            r.instabilities.to_string(),
            r.divergent.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_firing_grid_csv(grid: &[FiringCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "mu",
        "nu",
        "error_norm",
        "normalized_error",
        "spike_percent",
        "instabilities",
        "preferred",
    ])?;
    for c in grid {
        w.write_record([
            c.mu.to_string(),
            c.nu.to_string(),
            c.error_norm.to_string(),
            c.normalized_error.to_string(),
            c.spike_percent.to_string(),
            c.instabilities.to_string(),
            c.preferred.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Derives plot-ready files from a stored run: `errors.csv` with estimation
/// errors and ±3σ half-widths, and `active.csv` for spiking runs.
pub fn emit_plot_csvs(run_dir: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let summary = read_summary_json(&run_dir.join("summary.json"))?;
    let tr = read_trajectories_csv(&run_dir.join("trajectories.csv"))?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let bounds = three_sigma_bounds(&tr.p_diag);
    let n_x = tr.x.first().map_or(0, |v| v.len());
    let mut w = csv::Writer::from_path(out_dir.join("errors.csv"))?;
    let mut header = vec!["t".to_string()];
    header.extend(vector_header("e", n_x));
    header.extend(vector_header("bound", n_x));
    w.write_record(&header)?;
    for (((t, x), x_hat), bound) in tr.t.iter().zip(&tr.x).zip(&tr.x_hat).zip(&bounds) {
        let mut row = vec![t.to_string()];
        row.extend((x - x_hat).iter().map(|v| v.to_string()));
        row.extend(bound.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    written.push("errors.csv".to_string());

    let raster_path = run_dir.join("raster.csv");
    if summary.config.framework.is_spiking() && raster_path.exists() {
        let raster = read_raster_csv(&raster_path)?;
        let series = active_fraction_timeseries(
            &raster,
            summary.metrics.n_neurons,
            tr.t.len(),
            summary.config.metrics_window,
        );
        let mut w = csv::Writer::from_path(out_dir.join("active.csv"))?;
        w.write_record(["t", "active_percent"])?;
        for (t, a) in tr.t.iter().zip(&series) {
            w.write_record([t.to_string(), a.to_string()])?;
        }
        w.flush()?;
        written.push("active.csv".to_string());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn fake_result(x: Vec<DVector<f64>>, dt: f64) -> RunResult {
        let n = x.len();
        RunResult {
            scenario: Scenario::Workbench,
            framework: Framework::Lqg,
            seed: 0,
            dt,
            t: (0..n).map(|k| k as f64 * dt).collect(),
            x_hat: x.clone(),
            u: vec![dvector![0.0]; n],
            z: vec![dvector![0.0]; n],
            p_diag: vec![dvector![1.0, 1.0]; n],
            x,
            raster: Vec::new(),
            n_neurons: 0,
            tail_start: 0.0,
            tail_error: Vec::new(),
            spike_fraction: 0.0,
            active_fraction: Vec::new(),
            lqr_cost: 0.0,
            spike_cost: 0.0,
        }
    }

    #[test]
    fn tail_error_cases() {
        let r = fake_result(vec![dvector![0.1, 0.0]; 100], 0.1);
        assert_relative_eq!(avg_error_after(&r, 5.0)[0], 0.1, epsilon = 1e-15);
        let r = fake_result(vec![dvector![0.0, 0.0]; 100], 0.1);
        assert_eq!(avg_error_after(&r, 5.0), vec![0.0, 0.0]);
        // ramp from 0 to 1 across the tail
        let x = (0..=100)
            .map(|k| dvector![k as f64 / 100.0, -(k as f64) / 100.0])
            .collect();
        let r = fake_result(x, 0.1);
        let e = avg_error_after(&r, 0.0);
        assert_relative_eq!(e[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(e[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn spike_fraction_cases() {
        let five: Vec<_> = (0..5).map(|k| (k, 0)).collect();
        assert_relative_eq!(spike_fraction(&five, 10, 100), 0.5);
        assert_eq!(spike_fraction(&[], 10, 100), 0.0);
        let all: Vec<_> = (0..100).flat_map(|k| (0..10).map(move |i| (k, i))).collect();
        assert_relative_eq!(spike_fraction(&all, 10, 100), 100.0);
    }

    #[test]
    fn active_fraction_cases() {
        assert_eq!(active_fraction_timeseries(&[], 10, 5, 10), vec![0.0; 5]);
        let s = active_fraction_timeseries(&[(2, 7)], 100, 5, 1);
        assert_eq!(s, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let s = active_fraction_timeseries(&[(1, 0), (2, 1), (2, 0)], 4, 6, 3);
        assert_eq!(s, vec![0.0, 25.0, 50.0, 50.0, 50.0, 0.0]);
        let s = active_fraction_timeseries(&[(2, 1), (1, 0)], 4, 4, 3);
        assert_eq!(s, vec![0.0, 25.0, 50.0, 50.0]);
    }

    #[test]
    fn three_sigma_cases() {
        assert_eq!(three_sigma_bounds(&[dvector![1.0, 1.0]]), vec![dvector![3.0, 3.0]]);
        assert_eq!(three_sigma_bounds(&[dvector![0.0]]), vec![dvector![0.0]]);
        assert_relative_eq!(three_sigma_bounds(&[dvector![0.04]])[0][0], 0.6, epsilon = 1e-15);
    }

    #[test]
    fn reentry_counting() {
        let s = [0.5, 0.5, 3.0, 2.0, 0.9, 0.2];
        assert_eq!(reentry_steps(&s, 2), Some(2));
        assert_eq!(reentry_steps(&s, 0), Some(1));
        assert_eq!(reentry_steps(&[0.0, 5.0, 5.0], 1), None);
    }

    #[test]
    fn names_round_trip() {
        for fw in Framework::ALL {
            assert_eq!(fw.name().parse::<Framework>().unwrap(), fw);
            assert_eq!(serde_json::to_string(&fw).unwrap(), format!("\"{}\"", fw.name()));
        }
        assert!("bogus".parse::<Scenario>().is_err());
        assert_eq!("cw".parse::<Scenario>().unwrap(), Scenario::Cw);
    }

    #[test]
    fn config_validation() {
        let good = ExperimentConfig::defaults(Scenario::Workbench, Framework::SnnLqrMsif);
        good.validate().unwrap();
        assert_eq!(good.steps(), 1000);
        assert_eq!(ExperimentConfig::defaults(Scenario::Cw, Framework::Lqg).steps(), 3600);

        let mut c = good.clone();
        c.duration = 10.005;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.n_neurons = 0;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.uncertainty.model_scale = 0.0;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.uncertainty.outlier_scale = 0.5;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.uncertainty.outlier_times = vec![11.0];
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.x0 = vec![1.0];
        assert!(c.validate().is_err());
        let mut c = good;
        c.uncertainty.silence_schedule = vec![SilenceEvent {
            time: 1.0,
            mask: vec![true; 3],
        }];
        assert!(c.validate().is_err());
    }

    #[test]
    fn design_model_only_scales_a() {
        let mut cfg = ExperimentConfig::defaults(Scenario::Workbench, Framework::Lqg);
        cfg.uncertainty.model_scale = 0.8;
        let truth = cfg.plant_model().unwrap();
        let hat = cfg.design_model().unwrap();
        assert_eq!(hat.a, &truth.a * 0.8);
        assert_eq!((hat.b, hat.c, hat.q, hat.r), (truth.b, truth.c, truth.q, truth.r));
    }

    #[test]
    fn baseline_run_shapes_and_determinism() {
        let mut cfg = ExperimentConfig::defaults(Scenario::Workbench, Framework::Lqg);
        cfg.duration = 1.0;
        cfg.error_tail_start = 0.5;
        let a = run_experiment(&cfg, 3).unwrap();
        assert_eq!(a.t.len(), 100);
        assert_eq!(a.x.len(), 100);
        assert_eq!(a.p_diag.len(), 100);
        assert!(a.raster.is_empty());
        assert_eq!(a.x[0], dvector![10.0, 1.0]);
        assert_eq!(a, run_experiment(&cfg, 3).unwrap());
        assert_ne!(a.x, run_experiment(&cfg, 4).unwrap().x);
    }

    #[test]
    fn spiking_run_determinism() {
        let mut cfg = ExperimentConfig::defaults(Scenario::Workbench, Framework::SnnLqrMsif);
        cfg.duration = 1.0;
        cfg.error_tail_start = 0.5;
        let a = run_experiment(&cfg, 11).unwrap();
        assert_eq!(a, run_experiment(&cfg, 11).unwrap());
        assert!(!a.raster.is_empty());
        assert_eq!(a.active_fraction.len(), 100);
    }

    #[test]
    fn noise_free_baselines_track_truth_exactly() {
        let mut cfg = ExperimentConfig::defaults(Scenario::Workbench, Framework::Lqg);
        cfg.noise = false;
        cfg.duration = 0.5;
        cfg.error_tail_start = 0.0;
        let kf = run_experiment(&cfg, 0).unwrap();
        cfg.framework = Framework::LqrMsif;
        let msif = run_experiment(&cfg, 0).unwrap();
        assert_eq!(kf.x[0], msif.x[0]);
        // exact x̂(0) and no noise: every innovation is zero
        for (x, xh) in kf.x.iter().zip(&kf.x_hat).chain(msif.x.iter().zip(&msif.x_hat)) {
            assert_relative_eq!(x, xh, epsilon = 1e-9);
        }
    }

    #[test]
    fn uncertainty_isolation() {
        // Same noise draws and the same control sequence: the truth does not
        // depend on the design model.
        let mut cfg = ExperimentConfig::defaults(Scenario::Workbench, Framework::Lqg);
        cfg.duration = 1.0;
        cfg.error_tail_start = 0.0;
        let nominal = run_experiment(&cfg, 5).unwrap();
        let plant = Plant::new(cfg.plant_model().unwrap());
        let mut rng = seeded_stream(5, STREAM_PLANT);
        let mut s = PlantState::new(cfg.x0_vector());
        for k in 0..nominal.steps() {
            assert_relative_eq!(s.x, nominal.x[k], epsilon = 1e-12);
            s = plant.step(&s, &nominal.u[k], &mut rng, true);
        }
        cfg.uncertainty.model_scale = 0.8;
        let hat = cfg.design_model().unwrap();
        assert_eq!(hat.b, plant.model().b);
    }

    #[test]
    fn csv_round_trip_reproduces_tail_error() {
        let mut cfg = ExperimentConfig::defaults(Scenario::Workbench, Framework::SnnLqrMsif);
        cfg.duration = 1.0;
        cfg.error_tail_start = 0.5;
        let run = run_experiment(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(&cfg, &run, dir.path()).unwrap();
        let tr = read_trajectories_csv(&dir.path().join("trajectories.csv")).unwrap();
        assert_eq!(tr.t, run.t);
        assert_eq!(tr.x, run.x);
        assert_eq!(tr.p_diag, run.p_diag);
        let summary = read_summary_json(&dir.path().join("summary.json")).unwrap();
        assert_eq!(
            tail_average(&tr.t, &tr.x, summary.config.error_tail_start, summary.config.dt),
            summary.metrics.tail_error
        );
        assert_eq!(read_raster_csv(&dir.path().join("raster.csv")).unwrap(), run.raster);
        let files = emit_plot_csvs(dir.path(), &dir.path().join("plots")).unwrap();
        assert_eq!(files, vec!["errors.csv", "active.csv"]);
    }

    #[test]
    fn single_cell_firing_grid_normalizes_to_one() {
        let mut cfg = ExperimentConfig::defaults(Scenario::Workbench, Framework::SnnLqrMsif);
        cfg.duration = 1.0;
        cfg.error_tail_start = 0.5;
        cfg.seeds = vec![0];
        let grid = sweep_firing_params(&cfg, &[0.005], &[0.005]).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid[0].normalized_error, 1.0);
        assert!(grid[0].preferred);
        assert!(sweep_firing_params(&cfg, &[], &[0.005]).is_err());
    }

    #[test]
    fn neuron_sweep_duplicate_seeds_match() {
        let mut cfg = ExperimentConfig::defaults(Scenario::Workbench, Framework::SnnLqrMsif);
        cfg.duration = 1.0;
        cfg.error_tail_start = 0.5;
        cfg.seeds = vec![4];
        let rows = sweep_neurons(&cfg, &[250, 250]).unwrap();
        assert_eq!(rows[0], rows[1]);
        assert!(sweep_neurons(&cfg, &[]).is_err());
    }

    #[test]
    fn compare_single_framework_matches_run() {
        let mut cfg = ExperimentConfig::defaults(Scenario::Workbench, Framework::LqrMsif);
        cfg.duration = 1.0;
        cfg.error_tail_start = 0.5;
        let rows = compare_frameworks(&cfg, &[Framework::LqrMsif], &[9]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_tail_error, run_experiment(&cfg, 9).unwrap().tail_error);
        assert!(compare_frameworks(&cfg, &[], &[9]).is_err());
        let table = format_compare_table(Scenario::Workbench, &rows);
        assert_eq!(table.lines().count(), 3);
    }
}
