//! Merging of command-line flags, the JSON config file and scenario defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use spikereg::dynamics::CwVariant;
use spikereg::harness::{ExperimentConfig, Framework, Scenario};
use spikereg::{Error, Result};

/// Keys accepted in the config file. Everything is optional; unknown keys
/// are rejected.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: Option<Scenario>,
    pub framework: Option<Framework>,
    pub frameworks: Option<Vec<Framework>>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    pub duration: Option<f64>,
    pub dt: Option<f64>,
    pub n_neurons: Option<usize>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub nu: Option<f64>,
    pub delta: Option<f64>,
    pub eta_std: Option<f64>,
    pub alpha: Option<f64>,
    pub outlier_times: Option<Vec<f64>>,
    pub outlier_scale: Option<f64>,
    pub metrics_window: Option<usize>,
    pub error_tail_start: Option<f64>,
    pub x0: Option<Vec<f64>>,
    pub p0_scale: Option<f64>,
    pub noise: Option<bool>,
    pub cw_variant: Option<CwVariant>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }
}

/// Outliers given as `TIMES@SCALE`, e.g. `3,5,6@500`, or `preset` for the
/// scenario's standard set.
#[derive(Debug, Clone, PartialEq)]
pub enum OutlierArg {
    Preset,
    Explicit(Vec<f64>, f64),
}

pub fn parse_outliers(s: &str) -> std::result::Result<OutlierArg, String> {
    if s == "preset" {
        return Ok(OutlierArg::Preset);
    }
    let (times, scale) = s.split_once('@').ok_or("expected TIMES@SCALE or 'preset'")?;
    let times = parse_list::<f64>(times)?;
    let scale = scale
        .trim()
        .parse::<f64>()
        .map_err(|e| format!("bad outlier scale '{scale}': {e}"))?;
    Ok(OutlierArg::Explicit(times, scale))
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("bad list entry '{p}': {e}")))
        .collect()
}

/// `start:stop:step` (inclusive) or a comma list.
pub fn parse_range(s: &str) -> std::result::Result<Vec<usize>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let num = |p: &str| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("bad range bound '{p}': {e}"))
            };
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step == 0 {
                return Err("range step must be positive".into());
            }
            Ok((start..=stop).step_by(step).collect())
        }
        [_] => parse_list(s),
        _ => Err(format!("expected start:stop:step or a comma list, got '{s}'")),
    }
}

/// Parameter overrides shared by every experiment command.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Scenario: workbench or cw
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
    /// Number of neurons
    #[arg(long = "neurons", short = 'n')]
    pub n_neurons: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Design-model scale, Â = alpha·A
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Measurement outliers as TIMES@SCALE (e.g. 3,5,6@500) or 'preset'
    #[arg(long, value_parser = parse_outliers)]
    pub outliers: Option<OutlierArg>,
    /// Run length in seconds
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub eta_std: Option<f64>,
    /// Disable process and measurement noise
    #[arg(long)]
    pub no_noise: bool,
}

/// Firing-cost weights, separate so the firing-parameter sweep can take
/// lists under the same flag names.
#[derive(Debug, Clone, Default, Args)]
pub struct CodingOverrides {
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
}

pub fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn parse_framework(s: &str) -> std::result::Result<Framework, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Builds the experiment config: flags, then file, then scenario defaults.
pub fn resolve(
    file: &FileConfig,
    ov: &Overrides,
    coding: &CodingOverrides,
    framework: Framework,
) -> Result<ExperimentConfig> {
    let scenario = ov
        .scenario
        .or(file.scenario)
        .ok_or_else(|| Error::Config("no scenario given (use --scenario or the config file)".into()))?;
    let mut cfg = ExperimentConfig::defaults(scenario, framework);

    macro_rules! layer {
        ($field:ident, $file:expr, $cli:expr) => {
            if let Some(v) = $file {
                cfg.$field = v;
            }
            if let Some(v) = $cli {
                cfg.$field = v;
            }
        };
    }
    layer!(duration, file.duration, ov.duration);
    layer!(dt, file.dt, None::<f64>);
    layer!(n_neurons, file.n_neurons, ov.n_neurons);
    layer!(lambda, file.lambda, ov.lambda);
    layer!(mu, file.mu, coding.mu);
    layer!(nu, file.nu, coding.nu);
    layer!(delta, file.delta, ov.delta);
    layer!(eta_std, file.eta_std, ov.eta_std);
    layer!(metrics_window, file.metrics_window, None::<usize>);
    layer!(error_tail_start, file.error_tail_start, None::<f64>);
    layer!(x0, file.x0.clone(), None::<Vec<f64>>);
    layer!(p0_scale, file.p0_scale, None::<f64>);
    layer!(noise, file.noise, ov.no_noise.then_some(false));
    layer!(cw_variant, file.cw_variant, None::<CwVariant>);

    if let Some(a) = file.alpha {
        cfg.uncertainty.model_scale = a;
    }
    if let Some(a) = ov.alpha {
        cfg.uncertainty.model_scale = a;
    }
    if let Some(t) = &file.outlier_times {
        cfg.uncertainty.outlier_times = t.clone();
    }
    if let Some(s) = file.outlier_scale {
        cfg.uncertainty.outlier_scale = s;
    }
    match &ov.outliers {
        Some(OutlierArg::Preset) => {
            let (times, scale) = scenario.outlier_preset();
            cfg.uncertainty.outlier_times = times;
            cfg.uncertainty.outlier_scale = scale;
        }
        Some(OutlierArg::Explicit(times, scale)) => {
            cfg.uncertainty.outlier_times = times.clone();
            cfg.uncertainty.outlier_scale = *scale;
        }
        None => {}
    }
    // A shortened run keeps the tail window inside it.
    if cfg.error_tail_start >= cfg.duration && file.error_tail_start.is_none() {
        cfg.error_tail_start = 0.6 * cfg.duration;
    }
    Ok(cfg)
}

/// Seeds for multi-seed commands: `--seeds`, `--seed`, the file, then the
/// environment.
pub fn resolve_seeds(file: &FileConfig, seeds: Option<&str>, seed: Option<u64>) -> Result<Option<Vec<u64>>> {
    if let Some(s) = seeds {
        let list = parse_list::<u64>(s).map_err(Error::Config)?;
        if list.is_empty() {
            return Err(Error::Config("empty seed list".into()));
        }
        return Ok(Some(list));
    }
    if let Some(list) = seed
        .map(|s| vec![s])
        .or_else(|| file.seeds.clone())
        .or_else(|| file.seed.map(|s| vec![s]))
    {
        return Ok(Some(list));
    }
    Ok(env_seed()?.map(|s| vec![s]))
}

pub const SEED_ENV: &str = "SPIKEREG_SEED";

/// Master seed from the environment, used when neither flags nor the config
/// file name one.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|e| Error::Config(format!("{SEED_ENV}='{v}' is not a seed: {e}"))),
        Err(_) => Ok(None),
    }
}
