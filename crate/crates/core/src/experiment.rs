//! Voltage-sweep experiments: TOML configuration, manifests, the sweep
//! runner and its on-disk layout.
//!
//! ```text
//! <out>/<experiment_id>/
//!   manifest.json
//!   spectra/point_NN.csv (+ .json sidecar)
//!   fits/point_NN.json
//!   points.csv            per-point ω_m table, input format of `infer`
//!   plots/psd_overlay.csv  fano_vs_voltage.csv  frequency_shift.csv
//!   report.json
//! ```

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constants::{ELEMENTARY_CHARGE, NITROGEN_MOLECULAR_MASS};
use crate::fit::{fit_fano, fit_lorentzian, FanoSplit, FitOptions, FitResult, FrequencyBand};
use crate::inference::{
    fano_parameter_prediction, fit_frequency_vs_voltage, FanoPrediction, InferenceResult, VoltageSweepPoint,
};
use crate::langevin::{simulate, InitialState, SimulationConfig};
use crate::lineshape::{composite_model, perturbed_composite, CompositeModelParams, LorentzianParams};
use crate::lm::LmOptions;
use crate::numerics::linear_regression;
use crate::physics::{mechanical_frequency, NeedleConfig, TrapConfig};
use crate::spectral::{synthesize_spectrum, uniform_grid, welch_psd_with, Detrend, Spectrum, WelchConfig, Window};
use crate::CODE_VERSION;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid value for {field}: {constraint}")]
    Validation { field: String, constraint: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("output directory {0} already exists; refusing to overwrite")]
    AlreadyExists(PathBuf),
    #[error("baseline (0 V) point failed: {0}")]
    Baseline(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl ExperimentError {
    /// Process exit code: 1 for invalid input, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Time-domain Langevin trajectories (Lorentzian physics only).
    Sim,
    /// Spectra drawn from the composite model with Gamma statistics.
    Synth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapSection {
    pub laser_power: f64,
    pub wavelength: f64,
    pub waist_radius: f64,
    pub rayleigh_length: f64,
    pub susceptibility: f64,
    pub nonlinearity: f64,
    pub scattering_correction: f64,
}

impl Default for TrapSection {
    fn default() -> Self {
        let t = TrapConfig::reference();
        Self {
            laser_power: t.laser_power,
            wavelength: t.wavelength,
            waist_radius: t.waist_radius,
            rayleigh_length: t.rayleigh_length,
            susceptibility: t.susceptibility,
            nonlinearity: t.nonlinearity,
            scattering_correction: t.scattering_correction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleSection {
    pub radius: f64,
    pub density: f64,
    /// Signed charge in units of e₀.
    pub charge_elementary: i64,
}

impl Default for ParticleSection {
    fn default() -> Self {
        Self { radius: 75e-9, density: 1800.0, charge_elementary: 48 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeedleSection {
    /// Trap-to-tip distance R. The default puts the static force on a 48 e₀
    /// particle at 2.7 fN for 1 kV.
    pub tip_distance: f64,
    pub tip_radius: f64,
    /// Multiplies the isolated-sphere tip charge.
    pub calibration: f64,
}

impl Default for NeedleSection {
    fn default() -> Self {
        Self { tip_distance: 16.877e-3, tip_radius: 100e-6, calibration: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Integrator step; when absent, `0.05/ω₀`.
    pub timestep: Option<f64>,
    pub duration: f64,
    /// Pa.
    pub gas_pressure: f64,
    pub gas_temperature: f64,
    pub gas_molecular_mass: f64,
    pub feedback_strength: f64,
    pub record_stride: usize,
    pub initial_state: InitialState,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            timestep: None,
            duration: 1.0,
            gas_pressure: 100.0,
            gas_temperature: 295.0,
            gas_molecular_mass: NITROGEN_MOLECULAR_MASS,
            feedback_strength: 0.0,
            record_stride: 8,
            initial_state: InitialState::Thermal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralSection {
    // Welch settings (sim mode).
    pub segment_length: usize,
    pub overlap_fraction: f64,
    pub window: Window,
    pub detrend: Detrend,
    // Synthesis settings (synth mode).
    pub resolution_hz: f64,
    pub n_averages: usize,
    pub linewidth_hz: f64,
    /// Floor `A` relative to the unit resonance peak.
    pub floor_ratio: f64,
    /// Share of the resonant weight carried by the Fano term when the
    /// needle is charged.
    pub fano_fraction: f64,
    /// γ_el used to synthesise spectra, s⁻¹.
    pub gamma_el: f64,
    /// Branch of 𝔣 = ±e₀²/(qQ) used for synthesis, +1 or −1.
    pub fano_branch: i32,
}

impl Default for SpectralSection {
    fn default() -> Self {
        let w = WelchConfig::default();
        Self {
            segment_length: w.segment_length,
            overlap_fraction: w.overlap_fraction,
            window: w.window,
            detrend: w.detrend,
            resolution_hz: 4.0,
            n_averages: 4,
            linewidth_hz: 10.0,
            floor_ratio: 1e-6,
            fano_fraction: 0.9,
            gamma_el: crate::lineshape::REFERENCE_GAMMA_EL,
            fano_branch: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FittingSection {
    pub band_half_width_hz: f64,
    pub max_iterations: usize,
    pub min_bins: usize,
    pub lorentzian_weight_headroom: f64,
    /// γ_el assumed when converting the fitted `p = 𝔣γ_el²` to 𝔣.
    pub reference_gamma_el: f64,
}

impl Default for FittingSection {
    fn default() -> Self {
        let o = FitOptions::default();
        Self {
            band_half_width_hz: 10_000.0,
            max_iterations: o.lm.max_iterations,
            min_bins: o.min_bins,
            lorentzian_weight_headroom: o.lorentzian_weight_headroom,
            reference_gamma_el: crate::lineshape::REFERENCE_GAMMA_EL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Needle voltages in V; must include 0 V (the baseline).
    pub voltages: Vec<f64>,
    /// Point `i` uses seed `seed + i`.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    /// Recorded verbatim in the manifest; never taken from the clock so
    /// reruns are byte-identical.
    pub created_at: String,
    pub mode: SweepMode,
    pub workers: usize,
    pub trap: TrapSection,
    pub particle: ParticleSection,
    pub needle: NeedleSection,
    pub simulation: SimulationSection,
    pub spectral: SpectralSection,
    pub fitting: FittingSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "experiment".into(),
            created_at: "1970-01-01T00:00:00Z".into(),
            mode: SweepMode::Synth,
            workers: 4,
            trap: TrapSection::default(),
            particle: ParticleSection::default(),
            needle: NeedleSection::default(),
            simulation: SimulationSection::default(),
            spectral: SpectralSection::default(),
            fitting: FittingSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn invalid(field: &str, constraint: &str) -> ConfigError {
    ConfigError::Validation { field: field.into(), constraint: constraint.into() }
}

fn check(ok: bool, field: &str, constraint: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(invalid(field, constraint))
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_column(text, s.start));
            ConfigError::Parse { line, column, message: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let id_ok = !self.experiment_id.is_empty()
            && self.experiment_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && !self.experiment_id.starts_with('.');
        check(id_ok, "experiment_id", "must be non-empty and use only [A-Za-z0-9._-]")?;
        check(self.workers >= 1, "workers", "must be >= 1")?;

        let t = &self.trap;
        check(positive(t.laser_power), "trap.laser_power", "must be finite and > 0")?;
        check(positive(t.wavelength), "trap.wavelength", "must be finite and > 0")?;
        check(positive(t.waist_radius), "trap.waist_radius", "must be finite and > 0")?;
        check(positive(t.rayleigh_length), "trap.rayleigh_length", "must be finite and > 0")?;
        check(positive(t.susceptibility), "trap.susceptibility", "must be finite and > 0")?;
        check(t.nonlinearity.is_finite() && t.nonlinearity >= 0.0, "trap.nonlinearity", "must be finite and >= 0")?;
        check(
            t.scattering_correction.is_finite() && t.scattering_correction >= 0.0,
            "trap.scattering_correction",
            "must be finite and >= 0",
        )?;

        check(positive(self.particle.radius), "particle.radius", "must be finite and > 0")?;
        check(positive(self.particle.density), "particle.density", "must be finite and > 0")?;

        let n = &self.needle;
        check(positive(n.tip_distance), "needle.tip_distance", "must be finite and > 0")?;
        check(positive(n.tip_radius), "needle.tip_radius", "must be finite and > 0")?;
        check(positive(n.calibration), "needle.calibration", "must be finite and > 0")?;

        let s = &self.simulation;
        if let Some(dt) = s.timestep {
            check(positive(dt), "simulation.timestep", "must be finite and > 0")?;
        }
        check(positive(s.duration), "simulation.duration", "must be finite and > 0")?;
        check(s.gas_pressure.is_finite() && s.gas_pressure >= 0.0, "simulation.gas_pressure", "must be finite and >= 0")?;
        check(positive(s.gas_temperature), "simulation.gas_temperature", "must be finite and > 0")?;
        check(positive(s.gas_molecular_mass), "simulation.gas_molecular_mass", "must be finite and > 0")?;
        check(s.feedback_strength.is_finite(), "simulation.feedback_strength", "must be finite")?;
        check(s.record_stride >= 1, "simulation.record_stride", "must be >= 1")?;

        let sp = &self.spectral;
        check(sp.segment_length >= 2, "spectral.segment_length", "must be >= 2")?;
        check((0.0..1.0).contains(&sp.overlap_fraction), "spectral.overlap_fraction", "must be in [0, 1)")?;
        check(positive(sp.resolution_hz), "spectral.resolution_hz", "must be finite and > 0")?;
        check(sp.n_averages >= 1, "spectral.n_averages", "must be >= 1")?;
        check(positive(sp.linewidth_hz), "spectral.linewidth_hz", "must be finite and > 0")?;
        check(positive(sp.floor_ratio), "spectral.floor_ratio", "must be finite and > 0")?;
        check((0.0..=1.0).contains(&sp.fano_fraction), "spectral.fano_fraction", "must be in [0, 1]")?;
        check(positive(sp.gamma_el), "spectral.gamma_el", "must be finite and > 0")?;
        check(sp.fano_branch == 1 || sp.fano_branch == -1, "spectral.fano_branch", "must be +1 or -1")?;

        let f = &self.fitting;
        check(positive(f.band_half_width_hz), "fitting.band_half_width_hz", "must be finite and > 0")?;
        check(f.max_iterations >= 1, "fitting.max_iterations", "must be >= 1")?;
        check(f.min_bins >= 5, "fitting.min_bins", "must be >= 5")?;
        check(
            f.lorentzian_weight_headroom.is_finite() && f.lorentzian_weight_headroom > 1.0,
            "fitting.lorentzian_weight_headroom",
            "must be finite and > 1",
        )?;
        check(positive(f.reference_gamma_el), "fitting.reference_gamma_el", "must be finite and > 0")?;

        let v = &self.sweep.voltages;
        check(!v.is_empty(), "sweep.voltages", "must not be empty")?;
        check(v.iter().all(|x| x.is_finite()), "sweep.voltages", "must be finite")?;
        check(v.contains(&0.0), "sweep.voltages", "must include 0 V for the baseline fit")?;
        let distinct: BTreeSet<u64> = v.iter().map(|x| (x + 0.0).to_bits()).collect();
        check(distinct.len() == v.len(), "sweep.voltages", "must not repeat a voltage")?;
        Ok(())
    }

    pub fn trap_config(&self) -> TrapConfig {
        TrapConfig {
            laser_power: self.trap.laser_power,
            wavelength: self.trap.wavelength,
            waist_radius: self.trap.waist_radius,
            rayleigh_length: self.trap.rayleigh_length,
            particle_radius: self.particle.radius,
            particle_density: self.particle.density,
            susceptibility: self.trap.susceptibility,
            nonlinearity: self.trap.nonlinearity,
            scattering_correction: self.trap.scattering_correction,
        }
    }

    pub fn needle_at(&self, voltage: f64) -> NeedleConfig {
        NeedleConfig::calibrated(voltage, self.needle.tip_distance, self.needle.tip_radius, self.needle.calibration)
    }

    pub fn particle_charge(&self) -> f64 {
        self.particle.charge_elementary as f64 * ELEMENTARY_CHARGE
    }

    pub fn simulation_config(&self, seed: u64) -> SimulationConfig {
        let s = &self.simulation;
        SimulationConfig {
            timestep: s.timestep.unwrap_or_else(|| 0.05 / self.trap_config().omega0()),
            duration: s.duration,
            seed,
            gas_pressure: s.gas_pressure,
            gas_temperature: s.gas_temperature,
            gas_molecular_mass: s.gas_molecular_mass,
            feedback_strength: s.feedback_strength,
            record_stride: s.record_stride,
            initial_state: s.initial_state,
        }
    }

    pub fn welch_config(&self) -> WelchConfig {
        WelchConfig {
            segment_length: self.spectral.segment_length,
            overlap_fraction: self.spectral.overlap_fraction,
            window: self.spectral.window,
            detrend: self.spectral.detrend,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            lm: LmOptions { max_iterations: self.fitting.max_iterations, ..LmOptions::default() },
            min_bins: self.fitting.min_bins,
            split: FanoSplit::ReferenceRate { gamma_el: self.fitting.reference_gamma_el },
            lorentzian_weight_headroom: self.fitting.lorentzian_weight_headroom,
        }
    }

    /// Noise-free baseline line shape used for synthesis at 0 V.
    pub fn synth_baseline(&self) -> Result<LorentzianParams, String> {
        let trap = self.trap_config();
        let omega = mechanical_frequency(&trap, &self.needle_at(0.0), self.particle_charge()).map_err(|e| e.to_string())?;
        Ok(LorentzianParams::with_unit_peak(omega, 2.0 * PI * self.spectral.linewidth_hz, self.spectral.floor_ratio))
    }

    /// Composite model synthesised at `voltage`: resonance from the full
    /// trap physics, 𝔣 from the charge product on the configured branch.
    pub fn synth_model(&self, voltage: f64) -> Result<CompositeModelParams, String> {
        let baseline = self.synth_baseline()?;
        let needle = self.needle_at(voltage);
        let q = self.particle_charge();
        let omega_m = mechanical_frequency(&self.trap_config(), &needle, q).map_err(|e| e.to_string())?;
        let fano = if voltage == 0.0 || q == 0.0 {
            0.0
        } else {
            fano_parameter_prediction(q, needle.needle_charge).map_err(|e| e.to_string())?.branch(self.spectral.fano_branch as f64)
        };
        Ok(perturbed_composite(&baseline, omega_m, fano, self.spectral.gamma_el, self.spectral.fano_fraction))
    }

    /// Synthesis grid and fit band, centred on the 0 V resonance.
    pub fn synth_grid(&self) -> Result<Vec<f64>, String> {
        let center = self.synth_baseline()?.omega_m / (2.0 * PI);
        Ok(uniform_grid(center, self.fitting.band_half_width_hz, self.spectral.resolution_hz))
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment_id: String,
    pub config: ExperimentConfig,
    pub voltage_schedule: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Paths relative to the experiment directory.
    pub outputs: Vec<String>,
    pub code_version: String,
    pub created_at: String,
}

fn spectrum_file(i: usize) -> String {
    format!("spectra/point_{i:02}.csv")
}

fn fit_file(i: usize) -> String {
    format!("fits/point_{i:02}.json")
}

const PLOT_FILES: [&str; 3] = ["plots/psd_overlay.csv", "plots/fano_vs_voltage.csv", "plots/frequency_shift.csv"];

impl ExperimentManifest {
    pub fn from_config(config: ExperimentConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let voltages = config.sweep.voltages.clone();
        let seeds: Vec<u64> = (0..voltages.len() as u64).map(|i| config.sweep.seed.wrapping_add(i)).collect();
        let mut outputs = vec!["manifest.json".to_string()];
        for i in 0..voltages.len() {
            outputs.push(spectrum_file(i));
            outputs.push(spectrum_file(i).replace(".csv", ".json"));
            outputs.push(fit_file(i));
        }
        outputs.push("points.csv".into());
        outputs.extend(PLOT_FILES.iter().map(|s| s.to_string()));
        outputs.push("report.json".into());
        Ok(Self {
            experiment_id: config.experiment_id.clone(),
            created_at: config.created_at.clone(),
            config,
            voltage_schedule: voltages,
            seeds,
            outputs,
            code_version: CODE_VERSION.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_config(ExperimentConfig::load(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises") + "\n"
    }

    /// SHA-256 of the manifest's JSON rendering.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepStatus {
    Complete,
    /// Some points (or the inference) failed; see the report.
    Partial,
}

impl SweepStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            SweepStatus::Complete => 0,
            SweepStatus::Partial => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub index: usize,
    pub voltage: f64,
    pub seed: u64,
    pub spectrum: String,
    pub fit: String,
    pub error: Option<String>,
    pub spectrum_sha256: Option<String>,
    pub fit_sha256: Option<String>,
    pub resonance_hz: Option<f64>,
    pub resonance_hz_error: Option<f64>,
    pub omega_m: Option<f64>,
    pub omega_m_error: Option<f64>,
    pub chi2_per_dof: Option<f64>,
    pub converged: Option<bool>,
    /// Fitted `p = 𝔣γ_el²`, rad²/s².
    pub fano_strength: Option<f64>,
    pub fano_strength_error: Option<f64>,
    /// 𝔣 at the reference γ_el.
    pub fano_param: Option<f64>,
    pub fano_param_error: Option<f64>,
    /// 𝔣 = ±e₀²/(q̂Q) from the inferred charge, on the fitted branch, and
    /// the γ_el it implies.
    pub fano_param_from_charge: Option<f64>,
    pub gamma_el_from_charge: Option<f64>,
    pub predicted_fano: Option<FanoPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub experiment_id: String,
    pub manifest_sha256: String,
    pub mode: SweepMode,
    pub status: SweepStatus,
    pub n_points: usize,
    pub n_failed: usize,
    pub points: Vec<PointReport>,
    pub inference: Option<InferenceResult>,
    pub inference_note: Option<String>,
    /// Log-log slope of |𝔣| against |V| over the charged points.
    pub fano_voltage_slope: Option<f64>,
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

struct PointOutcome {
    spectrum: Option<Spectrum>,
    fit: Result<FitResult, String>,
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(io_err(path))
}

fn produce_spectrum(cfg: &ExperimentConfig, voltage: f64, seed: u64) -> Result<Spectrum, String> {
    match cfg.mode {
        SweepMode::Synth => {
            let model = cfg.synth_model(voltage)?;
            let mut s = synthesize_spectrum(&model, &cfg.synth_grid()?, cfg.spectral.n_averages, seed).map_err(|e| e.to_string())?;
            s.provenance = format!("synth(V={voltage}, K={}, seed={seed})", cfg.spectral.n_averages);
            Ok(s)
        }
        SweepMode::Sim => {
            let traj = simulate(&cfg.trap_config(), &cfg.needle_at(voltage), cfg.particle_charge(), &cfg.simulation_config(seed))
                .map_err(|e| e.to_string())?;
            welch_psd_with(&traj, &cfg.welch_config()).map_err(|e| e.to_string())
        }
    }
}

fn fit_band(cfg: &ExperimentConfig, center_hz: f64) -> FrequencyBand {
    FrequencyBand::around(center_hz, cfg.fitting.band_half_width_hz)
}

/// Runs the sweep into `out_root/<experiment_id>`, which must not exist.
pub fn run_sweep(manifest: &ExperimentManifest, out_root: &Path) -> Result<SweepReport, ExperimentError> {
    let cfg = &manifest.config;
    cfg.validate()?;
    let dir = out_root.join(&manifest.experiment_id);
    if dir.exists() {
        return Err(ExperimentError::AlreadyExists(dir));
    }
    for sub in ["spectra", "fits", "plots"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(&dir))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| ExperimentError::Io(e.to_string()))?;
    let schedule: Vec<(usize, f64, u64)> = manifest
        .voltage_schedule
        .iter()
        .zip(&manifest.seeds)
        .enumerate()
        .map(|(i, (&v, &s))| (i, v, s))
        .collect();

    let spectra: Vec<Result<Spectrum, String>> =
        pool.install(|| schedule.par_iter().map(|&(_, v, seed)| produce_spectrum(cfg, v, seed)).collect());

    let opts = cfg.fit_options();
    let baseline_index = manifest.voltage_schedule.iter().position(|&v| v == 0.0).expect("validated");
    let baseline_spectrum = spectra[baseline_index].as_ref().map_err(|e| ExperimentError::Baseline(e.clone()))?;
    let nominal_center = match cfg.mode {
        SweepMode::Synth => cfg.synth_baseline().map_err(ExperimentError::Baseline)?.omega_m,
        SweepMode::Sim => mechanical_frequency(&cfg.trap_config(), &cfg.needle_at(0.0), cfg.particle_charge())
            .map_err(|e| ExperimentError::Baseline(e.to_string()))?,
    } / (2.0 * PI);
    let baseline = fit_lorentzian(baseline_spectrum, &fit_band(cfg, nominal_center), &opts)
        .map_err(|e| ExperimentError::Baseline(e.to_string()))?;
    if !baseline.converged {
        return Err(ExperimentError::Baseline("Lorentzian fit did not converge".into()));
    }
    let band = fit_band(cfg, baseline.hz.resonance_hz);

    let outcomes: Vec<PointOutcome> = pool.install(|| {
        schedule
            .par_iter()
            .zip(spectra)
            .map(|(&(i, v, _), spectrum)| match spectrum {
                Err(e) => PointOutcome { spectrum: None, fit: Err(e) },
                Ok(s) => {
                    let fit = if i == baseline_index {
                        Ok(baseline.clone())
                    } else {
                        match cfg.mode {
                            SweepMode::Synth if v != 0.0 => fit_fano(&s, &baseline, &band, &opts),
                            _ => fit_lorentzian(&s, &band, &opts),
                        }
                        .map_err(|e| e.to_string())
                    };
                    PointOutcome { spectrum: Some(s), fit }
                }
            })
            .collect()
    });

    // Persist per-point files and assemble the report single-threaded.
    let mut points = Vec::with_capacity(outcomes.len());
    let mut provenance = Vec::new();
    for (&(i, voltage, seed), outcome) in schedule.iter().zip(&outcomes) {
        let spectrum_path = spectrum_file(i);
        let fit_path = fit_file(i);
        let mut report = PointReport {
            index: i,
            voltage,
            seed,
            spectrum: spectrum_path.clone(),
            fit: fit_path.clone(),
            error: None,
            spectrum_sha256: None,
            fit_sha256: None,
            resonance_hz: None,
            resonance_hz_error: None,
            omega_m: None,
            omega_m_error: None,
            chi2_per_dof: None,
            converged: None,
            fano_strength: None,
            fano_strength_error: None,
            fano_param: None,
            fano_param_error: None,
            fano_param_from_charge: None,
            gamma_el_from_charge: None,
            predicted_fano: None,
        };
        match &outcome.spectrum {
            Some(s) => {
                s.write(&dir.join(&spectrum_path)).map_err(|e| ExperimentError::Io(e.to_string()))?;
                report.spectrum_sha256 = Some(s.content_hash());
            }
            None => {
                // Keep every manifest entry present: failed points leave a
                // header-only spectrum with an error sidecar.
                let csv = dir.join(&spectrum_path);
                write_text(&csv, "frequency_hz,psd\n")?;
                let msg = outcome.fit.as_ref().err().cloned().unwrap_or_default();
                write_text(&csv.with_extension("json"), &(serde_json::json!({ "error": msg }).to_string() + "\n"))?;
            }
        }
        match &outcome.fit {
            Ok(fit) => {
                write_text(&dir.join(&fit_path), &fit.to_json())?;
                report.fit_sha256 = Some(fit.content_hash());
                report.resonance_hz = Some(fit.hz.resonance_hz);
                report.resonance_hz_error = Some(fit.hz.resonance_hz_error);
                report.omega_m = Some(fit.params.omega_m);
                report.omega_m_error = Some(fit.standard_errors.omega_m);
                report.chi2_per_dof = Some(fit.chi2_per_dof);
                report.converged = Some(fit.converged);
                if fit.model == crate::fit::ModelKind::Composite {
                    report.fano_strength = Some(fit.fano_strength);
                    report.fano_strength_error = Some(fit.fano_strength_error);
                    report.fano_param = Some(fit.params.fano_param);
                    report.fano_param_error = Some(fit.standard_errors.fano_param);
                }
                provenance.push(fit.spectrum_sha256.clone());
                provenance.push(fit.content_hash());
            }
            Err(e) => {
                write_text(&dir.join(&fit_path), &(serde_json::json!({ "error": e }).to_string() + "\n"))?;
                report.error = Some(e.clone());
            }
        }
        points.push(report);
    }

    // Charge inference across the sweep.
    let sweep_points: Vec<VoltageSweepPoint> = points
        .iter()
        .filter_map(|p| {
            let mut sp = VoltageSweepPoint::new(p.voltage, p.omega_m?, p.omega_m_error.filter(|e| e.is_finite()).unwrap_or(0.0));
            sp.fano_param = p.fano_param;
            sp.fano_param_error = p.fano_param_error;
            Some(sp)
        })
        .collect();
    let (inference, inference_note, inference_failed) = if manifest.voltage_schedule.len() < 3 {
        (None, Some("fewer than three voltages scheduled; inference skipped".to_string()), false)
    } else {
        match fit_frequency_vs_voltage(&sweep_points, &cfg.trap_config(), &cfg.needle_at(1.0)) {
            Ok(mut r) => {
                r.provenance = provenance;
                (Some(r), None, false)
            }
            Err(e) => (None, Some(e.to_string()), true),
        }
    };
    if let Some(inf) = &inference {
        for p in points.iter_mut().filter(|p| p.voltage != 0.0) {
            let q_needle = cfg.needle_at(p.voltage).needle_charge;
            let Ok(pred) = fano_parameter_prediction(inf.charge, q_needle) else {
                continue;
            };
            p.predicted_fano = Some(pred);
            if let Some(strength) = p.fano_strength {
                let f = pred.magnitude() * strength.signum();
                p.fano_param_from_charge = Some(f);
                p.gamma_el_from_charge = Some((strength / f).sqrt());
            }
        }
    }

    let (lv, lf): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| p.voltage != 0.0)
        .filter_map(|p| p.fano_param.filter(|f| *f != 0.0).map(|f| (p.voltage.abs().ln(), f.abs().ln())))
        .unzip();
    let fano_voltage_slope = (lv.len() >= 2).then(|| linear_regression(&lv, &lf).0);

    let n_failed = points.iter().filter(|p| p.error.is_some()).count();
    let status = if n_failed > 0 || inference_failed { SweepStatus::Partial } else { SweepStatus::Complete };
    let report = SweepReport {
        experiment_id: manifest.experiment_id.clone(),
        manifest_sha256: manifest.content_hash(),
        mode: cfg.mode,
        status,
        n_points: points.len(),
        n_failed,
        points,
        inference,
        inference_note,
        fano_voltage_slope,
    };

    write_text(&dir.join("points.csv"), &points_csv(&report))?;
    write_plots(&dir, cfg, &report, &outcomes, &schedule, &baseline)?;
    write_text(&dir.join("report.json"), &report.to_json())?;
    write_text(&dir.join("manifest.json"), &manifest.to_json())?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

/// `voltage_v,omega_m,omega_m_error`: successful points only.
fn points_csv(report: &SweepReport) -> String {
    let mut out = String::from("voltage_v,omega_m,omega_m_error\n");
    for p in &report.points {
        if let Some(w) = p.omega_m {
            out.push_str(&format!("{:e},{:e},{}\n", p.voltage, w, opt(p.omega_m_error)));
        }
    }
    out
}

fn write_plots(
    dir: &Path,
    cfg: &ExperimentConfig,
    report: &SweepReport,
    outcomes: &[PointOutcome],
    schedule: &[(usize, f64, u64)],
    baseline: &FitResult,
) -> Result<(), ExperimentError> {
    // PSD overlay: 0 V and the largest-|V| point, data and fitted model.
    let base_idx = schedule.iter().position(|s| s.1 == 0.0).expect("validated");
    let max_idx = schedule
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.abs().total_cmp(&b.1 .1.abs()).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("non-empty");
    let mut overlay = String::from("frequency_hz,psd_0v,model_0v,psd_max_v,model_max_v\n");
    if let Some(base) = &outcomes[base_idx].spectrum {
        let other = outcomes[max_idx].spectrum.as_ref();
        let other_fit = outcomes[max_idx].fit.as_ref().ok();
        for (k, (&f, &s)) in base.frequency_hz.iter().zip(&base.psd).enumerate() {
            let w = 2.0 * PI * f;
            let (ps, pm) = match (other, other_fit) {
                (Some(o), Some(fit)) if k < o.len() => (format!("{:e}", o.psd[k]), format!("{:e}", composite_model(w, &fit.params))),
                (Some(o), None) if k < o.len() => (format!("{:e}", o.psd[k]), String::new()),
                _ => (String::new(), String::new()),
            };
            overlay.push_str(&format!("{f:e},{s:e},{:e},{ps},{pm}\n", composite_model(w, &baseline.params)));
        }
    }
    write_text(&dir.join(PLOT_FILES[0]), &overlay)?;

    let mut fano = String::from(
        "voltage_v,fano_param,fano_param_error,fano_strength,fano_strength_error,fano_param_from_charge,gamma_el_from_charge,predicted_plus,predicted_minus\n",
    );
    for p in report.points.iter().filter(|p| p.voltage != 0.0) {
        fano.push_str(&format!(
            "{:e},{},{},{},{},{},{},{},{}\n",
            p.voltage,
            opt(p.fano_param),
            opt(p.fano_param_error),
            opt(p.fano_strength),
            opt(p.fano_strength_error),
            opt(p.fano_param_from_charge),
            opt(p.gamma_el_from_charge),
            opt(p.predicted_fano.map(|f| f.plus)),
            opt(p.predicted_fano.map(|f| f.minus)),
        ));
    }
    write_text(&dir.join(PLOT_FILES[1]), &fano)?;

    let base_hz = report.points[base_idx].resonance_hz;
    let mut shift = String::from("voltage_v,delta_f_hz,delta_f_error_hz,model_delta_f_hz\n");
    for p in &report.points {
        let model = report.inference.as_ref().map(|inf| {
            let q_needle = cfg.needle_at(p.voltage).needle_charge;
            inf.coefficients.charge * inf.charge * q_needle / (2.0 * PI)
        });
        let delta = p.resonance_hz.zip(base_hz).map(|(a, b)| a - b);
        shift.push_str(&format!("{:e},{},{},{}\n", p.voltage, opt(delta), opt(p.resonance_hz_error), opt(model)));
    }
    write_text(&dir.join(PLOT_FILES[2]), &shift)
}

/// Reads a `voltage_v,omega_m,omega_m_error` table.
pub fn read_points_csv(path: &Path) -> Result<Vec<VoltageSweepPoint>, ExperimentError> {
    let err = |e: &dyn std::fmt::Display| ExperimentError::Io(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(&e))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| err(&e))?;
        let field = |k: usize| -> Result<f64, ExperimentError> {
            let s = record.get(k).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(0.0);
            }
            s.parse::<f64>().map_err(|e| err(&e))
        };
        out.push(VoltageSweepPoint::new(field(0)?, field(1)?, field(2)?));
    }
    Ok(out)
}
