//! One-sided power spectral densities: Welch estimation from trajectories
//! and synthesis of spectra with exact K-average periodogram statistics.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::langevin::Trajectory;
use crate::lineshape::{composite_model, CompositeModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("series too short: {samples} samples give {segments} segment(s) of length {segment_length}; need at least 2")]
    TooShort {
        samples: usize,
        segment_length: usize,
        segments: usize,
    },
    #[error("invalid estimator setting: {0}")]
    InvalidSetting(&'static str),
    #[error("invalid spectrum: {0}")]
    Invalid(String),
    #[error("spectrum i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            // Periodic Hann, the usual choice for spectral estimation.
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detrend {
    #[default]
    Mean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WelchConfig {
    pub segment_length: usize,
    pub overlap_fraction: f64,
    #[serde(default)]
    pub window: Window,
    #[serde(default)]
    pub detrend: Detrend,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self { segment_length: 1 << 14, overlap_fraction: 0.5, window: Window::Hann, detrend: Detrend::Mean }
    }
}

/// A one-sided PSD on a uniform frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub frequency_hz: Vec<f64>,
    pub psd: Vec<f64>,
    /// Number of averaged periodograms (segments) K.
    pub n_averages: usize,
    /// Equivalent number of independent averages after accounting for
    /// segment overlap; sets the per-bin Gamma shape used as fit weights.
    pub effective_averages: f64,
    /// Grid spacing in Hz.
    pub resolution_bandwidth: f64,
    pub provenance: String,
}

/// Sidecar metadata stored next to `frequency_hz,psd` CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSidecar {
    pub n_averages: usize,
    pub effective_averages: f64,
    pub resolution_bandwidth_hz: f64,
    pub provenance: String,
    pub sha256: String,
}

impl Spectrum {
    pub fn new(
        frequency_hz: Vec<f64>,
        psd: Vec<f64>,
        n_averages: usize,
        effective_averages: f64,
        provenance: impl Into<String>,
    ) -> Result<Self, SpectrumError> {
        let resolution_bandwidth = if frequency_hz.len() > 1 { frequency_hz[1] - frequency_hz[0] } else { 0.0 };
        let s = Self {
            frequency_hz,
            psd,
            n_averages,
            effective_averages,
            resolution_bandwidth,
            provenance: provenance.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SpectrumError> {
        let invalid = |m: &str| Err(SpectrumError::Invalid(m.to_string()));
        if self.frequency_hz.len() != self.psd.len() {
            return invalid("grid and values differ in length");
        }
        if self.frequency_hz.len() < 2 {
            return invalid("need at least two bins");
        }
        if self.n_averages < 1 || !(self.effective_averages > 0.0) {
            return invalid("averaging count must be >= 1");
        }
        if self.psd.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid("PSD values must be finite and non-negative");
        }
        let df = self.frequency_hz[1] - self.frequency_hz[0];
        if !(df > 0.0) {
            return invalid("grid must be strictly increasing");
        }
        for (k, pair) in self.frequency_hz.windows(2).enumerate() {
            let step = pair[1] - pair[0];
            if !(step > 0.0) {
                return invalid("grid must be strictly increasing");
            }
            let expected = self.frequency_hz[0] + (k + 1) as f64 * df;
            if (pair[1] - expected).abs() > 1e-6 * df.max(1e-9 * pair[1].abs()) + 1e-9 * pair[1].abs() {
                return invalid("grid must be uniform");
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.psd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psd.is_empty()
    }

    /// Integral of the PSD over frequency (rectangle rule).
    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.resolution_bandwidth
    }

    /// Indices of bins with `low ≤ f ≤ high`.
    pub fn band_indices(&self, low_hz: f64, high_hz: f64) -> std::ops::Range<usize> {
        let start = self.frequency_hz.partition_point(|&f| f < low_hz);
        let end = self.frequency_hz.partition_point(|&f| f <= high_hz);
        start..end.max(start)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 40 + 16);
        out.push_str("frequency_hz,psd\n");
        for (f, s) in self.frequency_hz.iter().zip(&self.psd) {
            out.push_str(&format!("{f:e},{s:e}\n"));
        }
        out
    }

    /// SHA-256 of the CSV rendering, used to chain provenance.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    pub fn sidecar(&self) -> SpectrumSidecar {
        SpectrumSidecar {
            n_averages: self.n_averages,
            effective_averages: self.effective_averages,
            resolution_bandwidth_hz: self.resolution_bandwidth,
            provenance: self.provenance.clone(),
            sha256: self.content_hash(),
        }
    }

    /// Writes the CSV and its `.json` sidecar.
    pub fn write(&self, csv_path: &Path) -> Result<(), SpectrumError> {
        let io = |e: std::io::Error| SpectrumError::Io(format!("{}: {e}", csv_path.display()));
        fs::write(csv_path, self.to_csv()).map_err(io)?;
        let json = serde_json::to_string_pretty(&self.sidecar()).map_err(|e| SpectrumError::Io(e.to_string()))?;
        fs::write(csv_path.with_extension("json"), json + "\n").map_err(io)
    }

    pub fn read(csv_path: &Path) -> Result<Self, SpectrumError> {
        let err = |e: &dyn std::fmt::Display| SpectrumError::Io(format!("{}: {e}", csv_path.display()));
        let side: SpectrumSidecar =
            serde_json::from_str(&fs::read_to_string(csv_path.with_extension("json")).map_err(|e| err(&e))?)
                .map_err(|e| err(&e))?;
        let mut reader = csv::Reader::from_path(csv_path).map_err(|e| err(&e))?;
        let header = reader.headers().map_err(|e| err(&e))?.clone();
        if header.iter().collect::<Vec<_>>() != ["frequency_hz", "psd"] {
            return Err(err(&"expected header frequency_hz,psd"));
        }
        let mut f = Vec::new();
        let mut s = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| err(&e))?;
            f.push(record[0].trim().parse::<f64>().map_err(|e| err(&e))?);
            s.push(record[1].trim().parse::<f64>().map_err(|e| err(&e))?);
        }
        let mut spec = Spectrum::new(f, s, side.n_averages, side.effective_averages, side.provenance)?;
        spec.resolution_bandwidth = side.resolution_bandwidth_hz;
        Ok(spec)
    }
}

/// Equivalent number of independent averages for `segments` overlapping
/// windowed segments offset by `step` samples (Welch 1967):
/// `K_eff = K / (1 + 2 Σ_j (1 − j/K) ρ(j))`, with `ρ(j)` the squared
/// normalised window overlap at lag `j·step`.
pub fn effective_averages(window: &[f64], step: usize, segments: usize) -> f64 {
    let energy: f64 = window.iter().map(|w| w * w).sum();
    let k = segments as f64;
    let mut sum = 0.0;
    for j in 1..segments {
        let lag = j * step;
        if lag >= window.len() {
            break;
        }
        let overlap: f64 = window[..window.len() - lag].iter().zip(&window[lag..]).map(|(a, b)| a * b).sum();
        let rho = (overlap / energy).powi(2);
        sum += (1.0 - j as f64 / k) * rho;
    }
    k / (1.0 + 2.0 * sum)
}

/// Welch estimate of the one-sided PSD of a uniformly sampled series.
///
/// Normalised so that `Σ PSD·Δf` equals the mean-square of the detrended
/// series (for the Hann window, on average).
pub fn welch(series: &[f64], sample_interval: f64, cfg: &WelchConfig, provenance: impl Into<String>) -> Result<Spectrum, SpectrumError> {
    let n = series.len();
    let len = cfg.segment_length;
    if len < 2 {
        return Err(SpectrumError::InvalidSetting("segment_length must be >= 2"));
    }
    if !(0.0..1.0).contains(&cfg.overlap_fraction) {
        return Err(SpectrumError::InvalidSetting("overlap_fraction must be in [0, 1)"));
    }
    if !(sample_interval > 0.0) {
        return Err(SpectrumError::InvalidSetting("sample_interval must be > 0"));
    }
    let step = ((len as f64 * (1.0 - cfg.overlap_fraction)).round() as usize).max(1);
    let segments = if n >= len { (n - len) / step + 1 } else { 0 };
    if segments < 2 {
        return Err(SpectrumError::TooShort { samples: n, segment_length: len, segments });
    }

    let window = cfg.window.coefficients(len);
    let energy: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(len);
    let bins = len / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut buffer = vec![Complex::new(0.0, 0.0); len];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for s in 0..segments {
        let chunk = &series[s * step..s * step + len];
        let mean = match cfg.detrend {
            Detrend::Mean => chunk.iter().sum::<f64>() / len as f64,
            Detrend::None => 0.0,
        };
        for ((b, x), w) in buffer.iter_mut().zip(chunk).zip(&window) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process_with_scratch(&mut buffer, &mut scratch);
        for (a, b) in acc.iter_mut().zip(&buffer) {
            *a += b.norm_sqr();
        }
    }

    let fs = 1.0 / sample_interval;
    let scale = 1.0 / (fs * energy * segments as f64);
    let psd: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let one_sided = if k == 0 || (len % 2 == 0 && k == len / 2) { 1.0 } else { 2.0 };
            a * scale * one_sided
        })
        .collect();
    let frequency_hz: Vec<f64> = (0..bins).map(|k| k as f64 * fs / len as f64).collect();
    let k_eff = effective_averages(&window, step, segments);
    Spectrum::new(frequency_hz, psd, segments, k_eff, provenance)
}

/// Welch PSD of a trajectory's `z` series in m²/Hz.
pub fn welch_psd(traj: &Trajectory, segment_length: usize, overlap_fraction: f64) -> Result<Spectrum, SpectrumError> {
    let cfg = WelchConfig { segment_length, overlap_fraction, ..WelchConfig::default() };
    welch_psd_with(traj, &cfg)
}

pub fn welch_psd_with(traj: &Trajectory, cfg: &WelchConfig) -> Result<Spectrum, SpectrumError> {
    let provenance = format!(
        "welch(z; seed={}, segment_length={}, overlap={})",
        traj.metadata.simulation.seed, cfg.segment_length, cfg.overlap_fraction
    );
    welch(&traj.z_series, traj.sample_interval, cfg, provenance)
}

/// Uniform grid `center ± half_width` with the given spacing, clipped to
/// positive frequencies.
pub fn uniform_grid(center_hz: f64, half_width_hz: f64, resolution_hz: f64) -> Vec<f64> {
    let start_index = ((center_hz - half_width_hz) / resolution_hz).ceil().max(1.0) as i64;
    let end_index = ((center_hz + half_width_hz) / resolution_hz).floor() as i64;
    (start_index..=end_index).map(|k| k as f64 * resolution_hz).collect()
}

/// Draws a spectrum whose bins are independent Gamma(K, S(ω)/K) variates
/// around the composite model, the exact distribution of a K-average
/// periodogram of a Gaussian process.
pub fn synthesize_spectrum(model: &CompositeModelParams, grid_hz: &[f64], n_averages: usize, seed: u64) -> Result<Spectrum, SpectrumError> {
    if n_averages < 1 {
        return Err(SpectrumError::InvalidSetting("n_averages must be >= 1"));
    }
    if !model.is_valid() {
        return Err(SpectrumError::InvalidSetting("composite model parameters out of range"));
    }
    let k = n_averages as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psd = grid_hz
        .iter()
        .map(|&f| {
            let mean = composite_model(2.0 * std::f64::consts::PI * f, model);
            if mean > 0.0 {
                Gamma::new(k, mean / k).expect("positive shape and scale").sample(&mut rng)
            } else {
                0.0
            }
        })
        .collect();
    Spectrum::new(grid_hz.to_vec(), psd, n_averages, k, format!("synth(K={n_averages}, seed={seed})"))
}
