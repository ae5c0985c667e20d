use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use fanosense::experiment::{read_points_csv, ExperimentConfig, ExperimentManifest, run_sweep, ConfigError, ExperimentError};
use fanosense::fit::{fit_fano, fit_lorentzian, FitResult, FrequencyBand};
use fanosense::inference::fit_frequency_vs_voltage;
use fanosense::langevin::{simulate, Trajectory};
use fanosense::physics::mechanical_frequency;
use fanosense::spectral::{synthesize_spectrum, welch_psd_with, Spectrum};

#[derive(Parser)]
#[command(name = "fanosense", version, about = "Levitated-particle force sensing: simulate, estimate, fit, infer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (or directory for `sweep`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a Langevin trajectory; writes `t,z,p` CSV plus a JSON sidecar.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Needle voltage in V.
        #[arg(long, default_value_t = 0.0)]
        voltage: f64,
    },
    /// Welch PSD of a trajectory CSV.
    Psd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Draw a composite-model spectrum with periodogram statistics.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.0)]
        voltage: f64,
    },
    /// Fit a spectrum: Lorentzian, or composite when a baseline fit is given.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Zero-voltage Lorentzian fit (JSON) to seed a composite fit.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Band centre in Hz; defaults to the baseline resonance or the
        /// configured trap's 0 V frequency.
        #[arg(long)]
        center_hz: Option<f64>,
    },
    /// Run a full voltage sweep into `<out>/<experiment_id>`.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Invert a `voltage_v,omega_m,omega_m_error` table for mass and charge.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

/// An error with its process exit code.
struct Failure(u8, anyhow::Error);

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure(2, e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure(1, e.into())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure(e.exit_code() as u8, e.into())
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.sweep.voltages = vec![0.0];
            c
        }
    };
    if let Some(seed) = common.seed {
        cfg.sweep.seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Simulate { common, voltage } => {
            let cfg = load_config(&common)?;
            let traj = simulate(&cfg.trap_config(), &cfg.needle_at(voltage), cfg.particle_charge(), &cfg.simulation_config(cfg.sweep.seed))
                .map_err(|e| match e {
                    fanosense::langevin::SimulationError::InvalidConfig { .. } | fanosense::langevin::SimulationError::ResolutionGuard { .. } => {
                        Failure(1, e.into())
                    }
                    other => Failure(2, other.into()),
                })?;
            traj.write(&common.out).map_err(|e| anyhow!(e))?;
        }
        Command::Psd { common, input } => {
            let cfg = load_config(&common)?;
            let traj = Trajectory::read(&input).map_err(|e| anyhow!(e))?;
            let spec = welch_psd_with(&traj, &cfg.welch_config()).map_err(|e| Failure(1, e.into()))?;
            spec.write(&common.out).map_err(|e| anyhow!(e))?;
        }
        Command::Synth { common, voltage } => {
            let cfg = load_config(&common)?;
            let model = cfg.synth_model(voltage).map_err(|e| anyhow!(e))?;
            let grid = cfg.synth_grid().map_err(|e| anyhow!(e))?;
            let mut spec = synthesize_spectrum(&model, &grid, cfg.spectral.n_averages, cfg.sweep.seed).map_err(|e| Failure(1, e.into()))?;
            spec.provenance = format!("synth(V={voltage}, K={}, seed={})", cfg.spectral.n_averages, cfg.sweep.seed);
            spec.write(&common.out).map_err(|e| anyhow!(e))?;
        }
        Command::Fit { common, input, baseline, center_hz } => {
            let cfg = load_config(&common)?;
            let spec = Spectrum::read(&input).map_err(|e| anyhow!(e))?;
            let opts = cfg.fit_options();
            let baseline: Option<FitResult> = match baseline {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
                }
                None => None,
            };
            let center = match (center_hz, &baseline) {
                (Some(c), _) => c,
                (None, Some(b)) => b.hz.resonance_hz,
                (None, None) => {
                    mechanical_frequency(&cfg.trap_config(), &cfg.needle_at(0.0), cfg.particle_charge()).map_err(|e| anyhow!(e))?
                        / (2.0 * PI)
                }
            };
            let band = FrequencyBand::around(center, cfg.fitting.band_half_width_hz);
            let fit = match &baseline {
                Some(b) => fit_fano(&spec, b, &band, &opts),
                None => fit_lorentzian(&spec, &band, &opts),
            }
            .map_err(|e| anyhow!(e))?;
            write_json(&common.out, &fit.to_json())?;
            if !fit.converged {
                eprintln!("warning: fit did not converge after {} iterations", fit.n_iterations);
            }
        }
        Command::Sweep { common } => {
            let cfg = load_config(&common)?;
            let manifest = ExperimentManifest::from_config(cfg)?;
            let report = run_sweep(&manifest, &common.out)?;
            eprintln!(
                "{}: {} points, {} failed -> {}",
                report.experiment_id,
                report.n_points,
                report.n_failed,
                common.out.join(&report.experiment_id).display()
            );
            return Ok(report.status.exit_code() as u8);
        }
        Command::Infer { common, input } => {
            let cfg = load_config(&common)?;
            let points = read_points_csv(&input)?;
            let result = fit_frequency_vs_voltage(&points, &cfg.trap_config(), &cfg.needle_at(1.0)).map_err(|e| Failure(1, e.into()))?;
            write_json(&common.out, &(serde_json::to_string_pretty(&result).map_err(|e| anyhow!(e))? + "\n"))?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
