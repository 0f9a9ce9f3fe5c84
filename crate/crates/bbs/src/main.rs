use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bbs::pipeline::{run_compare, run_synth_experiment, RunConfig, SweepConfig};
use bbs::synth::{write_cohorts, PhantomSpec};
use bbs::{Error, Result};

#[derive(Parser)]
#[command(name = "bbs", about = "Block-based statistics for voxel-wise group comparison")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare two groups of volumes listed in a manifest
    Compare {
        /// Run configuration JSON
        #[arg(long)]
        config: PathBuf,
        /// Override the permutation seed from the config
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: BBS_WORKERS or all cores)
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic cohort (phantom volumes, manifest, truth mask)
    Synth {
        /// Phantom/cohort configuration JSON
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the synthetic benchmark sweep
    Bench {
        /// Sweep configuration JSON
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Cohort generation config for `synth`: a phantom spec plus cohort sizing.
#[derive(serde::Deserialize)]
struct SynthConfig {
    #[serde(default)]
    phantom: Option<PhantomSpec>,
    #[serde(default = "default_synth_dims")]
    dims: [usize; 3],
    n_control: usize,
    n_patient: usize,
    #[serde(default = "default_theta")]
    theta_percent: f64,
    #[serde(default)]
    seed: u64,
}

fn default_synth_dims() -> [usize; 3] {
    [64, 64, 1]
}

fn default_theta() -> f64 {
    8.0
}

fn resolve_workers(cli_value: Option<usize>) -> usize {
    cli_value
        .or_else(|| {
            std::env::var("BBS_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(num_cpus)
        .max(1)
}

fn num_cpus() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Compare {
            config,
            seed,
            workers,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.permutation.seed = s;
            }
            let report = run_compare(&cfg, &out, resolve_workers(workers))?;
            println!(
                "tested {} voxels ({} untestable), {} significant at alpha {}",
                report.testable_voxels,
                report.untestable_voxels,
                report.significant_voxels,
                cfg.alpha
            );
            Ok(())
        }
        Command::Synth { config, seed, out } => {
            let cfg: SynthConfig = read_json(&config)?;
            let spec = cfg
                .phantom
                .unwrap_or_else(|| PhantomSpec::default_layout(cfg.dims));
            let manifest = write_cohorts(
                &out,
                &spec,
                cfg.n_control,
                cfg.n_patient,
                cfg.theta_percent,
                seed.unwrap_or(cfg.seed),
            )?;
            println!("wrote cohort manifest {}", manifest.display());
            Ok(())
        }
        Command::Bench {
            sweep,
            seed,
            workers,
            out,
        } => {
            let mut cfg: SweepConfig = read_json(&sweep)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            run_synth_experiment(&cfg, &out, resolve_workers(workers))?;
            println!("sweep complete; metrics in {}", out.join("metrics.csv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
