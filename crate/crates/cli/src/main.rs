mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spikereg::harness::{
    compare_frameworks, emit_plot_csvs, format_compare_table, run_experiment, sweep_firing_params, sweep_neurons,
    write_compare_csv, write_firing_grid_csv, write_neuron_sweep_csv, write_run, ExperimentConfig, Framework,
};
use spikereg::{Error, Result};

use config::{
    parse_framework, parse_list, parse_range, resolve, resolve_seeds, CodingOverrides, FileConfig, Overrides,
};

#[derive(Debug, Parser)]
#[command(
    name = "spikereg",
    version,
    about = "Closed-loop LQR experiments with Kalman, MSIF and spiking-network estimators"
)]
struct Cli {
    /// JSON config file; command-line flags take precedence over it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one closed-loop simulation and write its series
    Run {
        #[arg(long, value_parser = parse_framework)]
        framework: Option<Framework>,
        /// Master seed (falls back to the config file, then SPIKEREG_SEED)
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        coding: CodingOverrides,
    },
    /// Tail errors of several frameworks over a set of seeds
    Compare {
        /// Comma-separated framework names
        #[arg(long, value_delimiter = ',', value_parser = parse_framework)]
        frameworks: Vec<Framework>,
        /// Comma-separated seeds
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        coding: CodingOverrides,
    },
    /// Parameter sweeps of the spiking framework
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Derive plot-ready CSVs from a stored run directory
    EmitPlots {
        /// Directory holding trajectories.csv and summary.json
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum SweepKind {
    /// Tail error versus neuron count
    Neurons {
        /// start:stop:step or a comma list
        #[arg(long)]
        list: String,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        coding: CodingOverrides,
    },
    /// Normalized tail error and spike percentage over a mu × nu grid
    FiringParams {
        /// Comma-separated mu values
        #[arg(long = "mu")]
        mu_list: String,
        /// Comma-separated nu values
        #[arg(long = "nu")]
        nu_list: String,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Instability { .. } => 3,
        Error::Config(_) | Error::Domain(_) | Error::Dimension(_) => 2,
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Run {
            framework,
            seed,
            overrides,
            coding,
        } => {
            let framework = framework
                .or(file.framework)
                .ok_or_else(|| Error::Config("no framework given (use --framework or the config file)".into()))?;
            let mut cfg = resolve(&file, &overrides, &coding, framework)?;
            let seed = match seed
                .or(file.seed)
                .or_else(|| file.seeds.as_ref().and_then(|s| s.first().copied()))
            {
                Some(s) => s,
                None => config::env_seed()?.unwrap_or(0),
            };
            cfg.seeds = vec![seed];
            cmd_run(&cfg, seed, &out)
        }
        Command::Compare {
            frameworks,
            seeds,
            seed,
            overrides,
            coding,
        } => {
            let requested = if frameworks.is_empty() {
                file.frameworks.clone().unwrap_or_default()
            } else {
                frameworks
            };
            let frameworks = dedup_frameworks(&requested);
            if frameworks.is_empty() {
                return Err(Error::Config("no frameworks given (use --frameworks)".into()));
            }
            let mut cfg = resolve(&file, &overrides, &coding, frameworks[0])?;
            if let Some(s) = resolve_seeds(&file, seeds.as_deref(), seed)? {
                cfg.seeds = s;
            }
            cfg.validate()?;
            let rows = compare_frameworks(&cfg, &frameworks, &cfg.seeds)?;
            std::fs::create_dir_all(&out)?;
            write_compare_csv(cfg.scenario, &rows, &out.join("compare.csv"))?;
            println!(
                "mean tail error after t = {} s over {} seeds",
                cfg.error_tail_start,
                cfg.seeds.len()
            );
            print!("{}", format_compare_table(cfg.scenario, &rows));
            for r in rows.iter().filter(|r| r.instabilities > 0) {
                eprintln!("warning: {} had {} unstable runs", r.framework, r.instabilities);
            }
            Ok(())
        }
        Command::Sweep { kind } => match kind {
            SweepKind::Neurons {
                list,
                seeds,
                seed,
                overrides,
                coding,
            } => {
                let n_list = parse_range(&list).map_err(Error::Config)?;
                if n_list.is_empty() {
                    return Err(Error::Config("empty neuron list".into()));
                }
                let cfg = sweep_config(&file, &overrides, &coding, seeds.as_deref(), seed)?;
                let rows = sweep_neurons(&cfg, &n_list)?;
                std::fs::create_dir_all(&out)?;
                write_neuron_sweep_csv(&rows, &out.join("neuron_sweep.csv"))?;
                println!("{:>6} {:>12} {:>9}", "N", "tail error", "divergent");
                for r in &rows {
                    println!("{:>6} {:>12.6} {:>9}", r.n, r.error_norm, r.divergent);
                }
                Ok(())
            }
            SweepKind::FiringParams {
                mu_list,
                nu_list,
                seeds,
                seed,
                overrides,
            } => {
                let mu_list = parse_list::<f64>(&mu_list).map_err(Error::Config)?;
                let nu_list = parse_list::<f64>(&nu_list).map_err(Error::Config)?;
                if mu_list.is_empty() || nu_list.is_empty() {
                    return Err(Error::Config("empty mu or nu list".into()));
                }
                let cfg = sweep_config(&file, &overrides, &CodingOverrides::default(), seeds.as_deref(), seed)?;
                let grid = sweep_firing_params(&cfg, &mu_list, &nu_list)?;
                std::fs::create_dir_all(&out)?;
                write_firing_grid_csv(&grid, &out.join("firing_grid.csv"))?;
                println!("{:>10} {:>10} {:>12} {:>9}", "mu", "nu", "normalized", "spikes %");
                for c in &grid {
                    println!(
                        "{:>10} {:>10} {:>12.4} {:>9.3}{}",
                        c.mu,
                        c.nu,
                        c.normalized_error,
                        c.spike_percent,
                        if c.preferred { "  (preferred)" } else { "" }
                    );
                }
                Ok(())
            }
        },
        Command::EmitPlots { run_dir } => {
            let target = cli.out.clone().unwrap_or_else(|| run_dir.join("plots"));
            for f in emit_plot_csvs(&run_dir, &target)? {
                println!("{}", target.join(f).display());
            }
            Ok(())
        }
    }
}

fn sweep_config(
    file: &FileConfig,
    overrides: &Overrides,
    coding: &CodingOverrides,
    seeds: Option<&str>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut cfg = resolve(file, overrides, coding, Framework::SnnLqrMsif)?;
    if let Some(s) = resolve_seeds(file, seeds, seed)? {
        cfg.seeds = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dedup_frameworks(list: &[Framework]) -> Vec<Framework> {
    let mut out: Vec<Framework> = Vec::new();
    for fw in list {
        if out.contains(fw) {
            eprintln!("warning: framework {fw} listed more than once; running it once");
        } else {
            out.push(*fw);
        }
    }
    out
}

fn cmd_run(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let result = run_experiment(cfg, seed)?;
    write_run(cfg, &result, out)?;
    println!(
        "{} on {} (seed {seed}): tail error after t = {} s",
        cfg.framework, cfg.scenario, cfg.error_tail_start
    );
    for (label, e) in cfg.scenario.state_labels().iter().zip(&result.tail_error) {
        println!("  {label:<10} {e:.6}");
    }
    if cfg.framework.is_spiking() {
        println!("  spikes     {:.3}% of possible", result.spike_fraction);
    }
    println!("wrote {}", out.display());
    Ok(())
}
