//! Weighted log-space fits of the Lorentzian and composite line shapes.
//!
//! Both fits minimise `Σ [(ln Sᵢ − b(K) − ln M(ωᵢ)) / s(K)]²`, where `b` and
//! `s²` are the mean offset and variance of the log of a Gamma(K) periodogram
//! bin. With the right `K` the reduced χ² of an adequate model is ≈ 1.
//!
//! The composite model depends on 𝔣 and γ_el only through `p = 𝔣γ_el²`, so
//! the fit estimates `p` and a [`FanoSplit`] policy supplies the external
//! information needed to report 𝔣 and γ_el separately.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constants::ELEMENTARY_CHARGE;
use crate::lineshape::{
    composite_model, fano_model, lorentzian_model, resonance_denominator, CompositeModelParams, LorentzianParams, REFERENCE_GAMMA_EL,
};
use crate::lm::{minimize, LmOptions, LmOutcome};
use crate::numerics::{median, moving_average, LogGammaStats};
use crate::spectral::Spectrum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("band holds {found} usable bins; at least {required} are needed")]
    InsufficientBins { found: usize, required: usize },
    #[error("no resolvable peak in band: {0}")]
    NoPeak(String),
    #[error("no dip: the spectrum never falls below half the baseline model (minimum ratio {min_ratio:.3})")]
    NoDip { min_ratio: f64 },
    #[error("baseline fit did not converge")]
    BaselineNotConverged,
    #[error("invalid fit setting: {0}")]
    InvalidSetting(String),
    #[error("fit failed: {0}")]
    Failed(String),
}

/// Frequency window in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBand {
    pub low_hz: f64,
    pub high_hz: f64,
}

impl FrequencyBand {
    pub fn new(low_hz: f64, high_hz: f64) -> Self {
        Self { low_hz, high_hz }
    }

    pub fn around(center_hz: f64, half_width_hz: f64) -> Self {
        Self { low_hz: center_hz - half_width_hz, high_hz: center_hz + half_width_hz }
    }
}

/// How the fitted product `p = 𝔣γ_el²` is split into 𝔣 and γ_el.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FanoSplit {
    /// γ_el is taken as known; 𝔣 = p/γ_el².
    ReferenceRate { gamma_el: f64 },
    /// 𝔣 is taken as known; γ_el = √(p/𝔣).
    KnownFano { fano_param: f64 },
    /// |𝔣| = e₀²/|qQ| with the sign of `p`; γ_el = √(p/𝔣).
    KnownCharge { particle_charge: f64, needle_charge: f64 },
}

impl Default for FanoSplit {
    fn default() -> Self {
        FanoSplit::ReferenceRate { gamma_el: REFERENCE_GAMMA_EL }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub lm: LmOptions,
    pub min_bins: usize,
    pub split: FanoSplit,
    /// Upper bound of the composite fit's Lorentzian weight, as a multiple
    /// of the baseline amplitude.
    pub lorentzian_weight_headroom: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { lm: LmOptions::default(), min_bins: 50, split: FanoSplit::default(), lorentzian_weight_headroom: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lorentzian,
    Composite,
}

/// Undefined errors (singular covariance) are NaN, written as JSON `null`.
fn nullable<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// One-sigma errors; zero for parameters held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamErrors {
    #[serde(deserialize_with = "nullable")]
    pub floor: f64,
    #[serde(deserialize_with = "nullable")]
    pub lorentzian_weight: f64,
    #[serde(deserialize_with = "nullable")]
    pub fano_weight: f64,
    #[serde(deserialize_with = "nullable")]
    pub omega_m: f64,
    #[serde(deserialize_with = "nullable")]
    pub gamma: f64,
    #[serde(deserialize_with = "nullable")]
    pub fano_param: f64,
    #[serde(deserialize_with = "nullable")]
    pub gamma_el: f64,
}

/// Hz-domain view of the fitted line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HzSummary {
    pub resonance_hz: f64,
    #[serde(deserialize_with = "nullable")]
    pub resonance_hz_error: f64,
    pub linewidth_hz: f64,
    #[serde(deserialize_with = "nullable")]
    pub linewidth_hz_error: f64,
    pub dip_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_bins: usize,
    pub gradient_norm: f64,
    pub initial: CompositeModelParams,
    /// Parameters held at their baseline value.
    pub fixed: Vec<String>,
    /// Dip chosen at initialisation and the next-deepest candidate.
    pub dip_hz_initial: Option<f64>,
    pub runner_up_dip_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelKind,
    pub params: CompositeModelParams,
    pub standard_errors: ParamErrors,
    /// `p = 𝔣γ_el²` in rad²/s² and its error: the combination the
    /// spectrum actually determines.
    pub fano_strength: f64,
    #[serde(deserialize_with = "nullable")]
    pub fano_strength_error: f64,
    /// Covariance of 𝔣 and γ_el conditional on the split policy. The data
    /// alone constrain only `p`.
    pub fano_gamma_el_covariance: f64,
    pub split: Option<FanoSplit>,
    pub chi2_per_dof: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub hz: HzSummary,
    pub diagnostics: FitDiagnostics,
    pub spectrum_sha256: String,
}

impl FitResult {
    pub fn lorentzian(&self) -> LorentzianParams {
        self.params.lorentzian()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit result serialises") + "\n"
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    fn finish(mut self) -> Self {
        let se = &self.standard_errors;
        self.hz = HzSummary {
            resonance_hz: self.params.omega_m / (2.0 * PI),
            resonance_hz_error: se.omega_m / (2.0 * PI),
            linewidth_hz: self.params.gamma / (2.0 * PI),
            linewidth_hz_error: se.gamma / (2.0 * PI),
            dip_hz: match self.model {
                ModelKind::Composite => self.params.dip_omega().map(|w| w / (2.0 * PI)),
                ModelKind::Lorentzian => None,
            },
        };
        self
    }
}

/// Band samples in angular frequency with log-domain weights.
struct LogData {
    omega: Vec<f64>,
    psd: Vec<f64>,
    log_psd: Vec<f64>,
    bias: f64,
    inv_sigma: f64,
    resolution_hz: f64,
}

impl LogData {
    fn new(spec: &Spectrum, band: &FrequencyBand, min_bins: usize) -> Result<Self, FitError> {
        if !(band.high_hz > band.low_hz) {
            return Err(FitError::InvalidSetting("band must have high_hz > low_hz".into()));
        }
        let range = spec.band_indices(band.low_hz, band.high_hz);
        let (omega, psd): (Vec<f64>, Vec<f64>) = spec.frequency_hz[range.clone()]
            .iter()
            .zip(&spec.psd[range])
            .filter(|(_, s)| **s > 0.0)
            .map(|(f, s)| (2.0 * PI * f, *s))
            .unzip();
        if omega.len() < min_bins {
            return Err(FitError::InsufficientBins { found: omega.len(), required: min_bins });
        }
        let stats = LogGammaStats::new(spec.effective_averages);
        Ok(Self {
            log_psd: psd.iter().map(|s| s.ln()).collect(),
            omega,
            psd,
            bias: stats.bias,
            inv_sigma: 1.0 / stats.variance.sqrt(),
            resolution_hz: spec.resolution_bandwidth,
        })
    }

    fn len(&self) -> usize {
        self.omega.len()
    }

    fn fill_residuals(&self, model: impl Fn(f64) -> f64, out: &mut [f64]) -> bool {
        for ((r, &w), &ls) in out.iter_mut().zip(&self.omega).zip(&self.log_psd) {
            let m = model(w);
            if !(m > 0.0) {
                return false;
            }
            *r = (ls - self.bias - m.ln()) * self.inv_sigma;
        }
        true
    }

    fn smoothed(&self) -> Vec<f64> {
        moving_average(&self.psd, 3)
    }
}

fn delta_sd(cov: &Option<nalgebra::DMatrix<f64>>, k: usize, derivative: f64) -> f64 {
    match cov.as_ref().map(|c| c[(k, k)]) {
        Some(v) if v >= 0.0 => derivative.abs() * v.sqrt(),
        _ => f64::NAN,
    }
}

fn chi2_per_dof(out: &LmOutcome, n_params: usize) -> f64 {
    out.chi2 / (out.n_residuals.saturating_sub(n_params)).max(1) as f64
}

fn spectrum_hash(spec: &Spectrum) -> String {
    spec.content_hash()
}

fn placeholder_hz() -> HzSummary {
    HzSummary { resonance_hz: 0.0, resonance_hz_error: 0.0, linewidth_hz: 0.0, linewidth_hz_error: 0.0, dip_hz: None }
}

/// Fits `floor + amplitude/D(ω)` in the band.
pub fn fit_lorentzian(spec: &Spectrum, band: &FrequencyBand, opts: &FitOptions) -> Result<FitResult, FitError> {
    let data = LogData::new(spec, band, opts.min_bins)?;
    let n = data.len();
    let smooth = data.smoothed();

    let edge = (n / 10).max(3);
    let mut edges: Vec<f64> = data.psd[..edge].iter().chain(&data.psd[n - edge..]).copied().collect();
    let edge_median = median(&mut edges);
    let (peak_idx, &peak) = smooth.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty band");
    if peak_idx == 0 || peak_idx == n - 1 {
        return Err(FitError::NoPeak("maximum sits at the band edge".into()));
    }
    if peak < 10.0 * edge_median {
        return Err(FitError::NoPeak(format!(
            "peak-to-edge contrast {:.2} is below 10",
            peak / edge_median
        )));
    }

    let floor0 = if edge_median > 0.0 { edge_median } else { 1e-3 * data.psd.iter().cloned().fold(f64::INFINITY, f64::min) };
    let half = floor0 + 0.5 * (peak - floor0);
    let crossing = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev = peak_idx;
        for i in range {
            if smooth[i] < half {
                let t = (smooth[prev] - half) / (smooth[prev] - smooth[i]);
                return Some(data.omega[prev] + t * (data.omega[i] - data.omega[prev]));
            }
            prev = i;
        }
        None
    };
    let left = crossing(&mut (0..peak_idx).rev());
    let right = crossing(&mut (peak_idx + 1..n));
    let omega0 = data.omega[peak_idx];
    let min_width = 2.0 * PI * data.resolution_hz;
    let gamma0 = match (left, right) {
        (Some(l), Some(r)) => r - l,
        (Some(l), None) => 2.0 * (omega0 - l),
        (None, Some(r)) => 2.0 * (r - omega0),
        (None, None) => min_width,
    }
    .max(min_width);
    let amp0 = (peak - floor0).max(f64::MIN_POSITIVE) * (omega0 * gamma0).powi(2);
    let initial = LorentzianParams { omega_m: omega0, gamma: gamma0, amplitude: amp0, floor: floor0 };

    let unpack = |x: &[f64]| LorentzianParams { omega_m: x[0].exp(), gamma: x[1].exp(), amplitude: x[2].exp(), floor: x[3].exp() };
    let residuals = |x: &[f64], out: &mut [f64]| {
        let p = unpack(x);
        p.is_valid() && data.fill_residuals(|w| lorentzian_model(w, &p), out)
    };
    let x0 = [omega0.ln(), gamma0.ln(), amp0.ln(), floor0.ln()];
    let steps = [1e-4 * gamma0 / omega0, 1e-5, 1e-5, 1e-5];
    let out = minimize(residuals, &x0, n, &steps, &opts.lm)
        .ok_or_else(|| FitError::Failed("model undefined at the initial guess".into()))?;
    let p = unpack(&out.x);
    let gamma_el = match opts.split {
        FanoSplit::ReferenceRate { gamma_el } => gamma_el,
        _ => REFERENCE_GAMMA_EL,
    };
    let errors = ParamErrors {
        floor: delta_sd(&out.covariance, 3, p.floor),
        lorentzian_weight: delta_sd(&out.covariance, 2, p.amplitude),
        omega_m: delta_sd(&out.covariance, 0, p.omega_m),
        gamma: delta_sd(&out.covariance, 1, p.gamma),
        ..ParamErrors::default()
    };
    Ok(FitResult {
        model: ModelKind::Lorentzian,
        params: CompositeModelParams::from_lorentzian(&p, gamma_el),
        standard_errors: errors,
        fano_strength: 0.0,
        fano_strength_error: 0.0,
        fano_gamma_el_covariance: 0.0,
        split: None,
        chi2_per_dof: chi2_per_dof(&out, 4),
        n_iterations: out.iterations,
        converged: out.converged,
        hz: placeholder_hz(),
        diagnostics: FitDiagnostics {
            n_bins: n,
            gradient_norm: out.gradient_norm,
            initial: CompositeModelParams::from_lorentzian(&initial, gamma_el),
            fixed: vec![],
            dip_hz_initial: None,
            runner_up_dip_hz: None,
        },
        spectrum_sha256: spectrum_hash(spec),
    }
    .finish())
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

/// Local minima of the lightly smoothed spectrum/baseline ratio that lie
/// below 0.5, deepest first, as (index, smoothed ratio).
/// Covariance of the composite fit in `(ln ω_m, logit B, C, p/p_scale)`.
///
/// The fit itself runs in `ln C`, whose finite-difference column vanishes
/// into rounding once `C` collapses towards zero; here the `C` column is
/// analytic and linear. If `C ≈ 0` leaves `p` unidentified the full normal
/// matrix is singular, and the remaining block is inverted with `p` held at
/// its fitted value (its own error is then undefined).
fn composite_covariance(data: &LogData, x: &[f64], unpack: impl Fn(&[f64]) -> CompositeModelParams, steps: &[f64; 4]) -> Option<DMatrix<f64>> {
    let n = data.len();
    let mut y = x.to_vec();
    y[2] = x[2].exp();
    let at = |y: &[f64]| {
        let mut z = y.to_vec();
        z[2] = y[2].max(f64::MIN_POSITIVE).ln();
        let mut p = unpack(&z);
        p.fano_weight = y[2];
        p
    };
    let mut j = DMatrix::zeros(n, 4);
    let (mut plus, mut minus) = (vec![0.0; n], vec![0.0; n]);
    for k in [0, 1, 3] {
        let (mut yp, mut ym) = (y.clone(), y.clone());
        yp[k] += steps[k];
        ym[k] -= steps[k];
        if !data.fill_residuals(|w| composite_model(w, &at(&yp)), &mut plus)
            || !data.fill_residuals(|w| composite_model(w, &at(&ym)), &mut minus)
        {
            return None;
        }
        for i in 0..n {
            j[(i, k)] = (plus[i] - minus[i]) / (2.0 * steps[k]);
        }
    }
    let p = at(&y);
    for (i, &w) in data.omega.iter().enumerate() {
        j[(i, 2)] = -data.inv_sigma * fano_model(w, &p) / composite_model(w, &p);
    }
    let a = j.transpose() * &j;
    let usable = |c: &DMatrix<f64>| c.iter().all(|v| v.is_finite()) && c.diagonal().iter().all(|&d| d >= 0.0);
    if let Some(c) = a.clone().cholesky().map(|ch| ch.inverse()).filter(usable) {
        return Some(c);
    }
    let keep = [0, 1, 2];
    let sub = DMatrix::from_fn(3, 3, |r, c| a[(keep[r], keep[c])]);
    let inv = sub.cholesky()?.inverse();
    if !usable(&inv) {
        return None;
    }
    let mut full = DMatrix::from_element(4, 4, 0.0);
    for r in 0..3 {
        for c in 0..3 {
            full[(keep[r], keep[c])] = inv[(r, c)];
        }
    }
    full[(3, 3)] = f64::NAN;
    Some(full)
}

fn dip_candidates(ratio: &[f64]) -> Vec<(usize, f64)> {
    let s = moving_average(ratio, 1);
    let mut found: Vec<(usize, f64)> = (1..s.len() - 1)
        .filter(|&i| s[i] < 0.5 && s[i] <= s[i - 1] && s[i] < s[i + 1])
        .map(|i| (i, s[i]))
        .collect();
    found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    found
}

/// Weighted linear least squares for the composite weights at fixed
/// `ω_m`, `Γ` and floor `A`. `M − A = C·Δ²/D + (B + Cp²)/D − 2Cp·Δ/D` is
/// linear in `(C, B + Cp², Cp)`. Returns `(B, C, p)` when `C > 0`.
fn linear_weights(data: &LogData, smooth: &[f64], floor: f64, omega_m: f64, gamma: f64) -> Option<(f64, f64, f64)> {
    let mut rows = Vec::with_capacity(data.len());
    for ((&w, &s), &target) in data.omega.iter().zip(smooth).zip(&data.psd) {
        let d = resonance_denominator(w, omega_m, gamma);
        let delta = w * w - omega_m * omega_m;
        let weight = 1.0 / s.max(f64::MIN_POSITIVE);
        rows.push(([delta * delta / d * weight, weight / d, -2.0 * delta / d * weight], (target - floor) * weight));
    }
    let mut scale = [0.0f64; 3];
    for (r, _) in &rows {
        for k in 0..3 {
            scale[k] = scale[k].max(r[k].abs());
        }
    }
    if scale.iter().any(|s| !(*s > 0.0)) {
        return None;
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (r, y) in &rows {
        let v = Vector3::new(r[0] / scale[0], r[1] / scale[1], r[2] / scale[2]);
        ata += v * v.transpose();
        atb += v * *y;
    }
    let u = ata.try_inverse()? * atb;
    let (c, s1, cp) = (u[0] / scale[0], u[1] / scale[1], u[2] / scale[2]);
    if !(c > 0.0) || cp == 0.0 {
        return None;
    }
    let p = cp / c;
    Some((s1 - c * p * p, c, p))
}

/// Fits the composite model with floor `A` and damping `Γ` held at the
/// baseline values; `ω_m`, `B ∈ [0, headroom·B₀]`, `C > 0` and `p` are free.
pub fn fit_fano(spec: &Spectrum, baseline: &FitResult, band: &FrequencyBand, opts: &FitOptions) -> Result<FitResult, FitError> {
    if !baseline.converged {
        return Err(FitError::BaselineNotConverged);
    }
    let data = LogData::new(spec, band, opts.min_bins)?;
    let n = data.len();
    let base = baseline.params;
    let floor = base.floor;
    let gamma = base.gamma;
    let b0 = base.lorentzian_weight;
    let b_max = opts.lorentzian_weight_headroom * b0;
    let smooth = data.smoothed();

    // Resonance estimate: smoothed maximum, falling back to the baseline.
    let (peak_idx, _) = smooth.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty band");
    let omega0 = if peak_idx > 0 && peak_idx < n - 1 { data.omega[peak_idx] } else { base.omega_m };

    // Dip search against the baseline Lorentzian re-centred on the current
    // peak, so the resonance shift itself does not read as a dip.
    let recentred = LorentzianParams { omega_m: omega0, ..base.lorentzian() };
    let ratio: Vec<f64> = data.omega.iter().zip(&data.psd).map(|(&w, &s)| s / lorentzian_model(w, &recentred)).collect();
    let min_ratio = ratio.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_ratio < 0.5) {
        return Err(FitError::NoDip { min_ratio });
    }
    let candidates = dip_candidates(&ratio);
    let dip_idx = candidates.first().map(|c| c.0).unwrap_or_else(|| {
        ratio.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).expect("non-empty")
    });
    let omega_dip = data.omega[dip_idx];
    let dip_sign = if omega_dip >= omega0 { 1.0 } else { -1.0 };
    let p_dip = (omega_dip * omega_dip - omega0 * omega0).abs().max((omega0 * gamma).max(1.0)) * dip_sign;

    let mut starts: Vec<(f64, f64, f64)> = Vec::new();
    if let Some((b, c, p)) = linear_weights(&data, &smooth, floor, omega0, gamma) {
        if p.signum() == dip_sign {
            starts.push((b, c, p));
        }
    }
    let c_dip = 0.5 * b0 / (p_dip * p_dip);
    starts.push((0.5 * b0, c_dip, p_dip));
    if let Some(&(i, _)) = candidates.get(1) {
        let w = data.omega[i];
        let p = w * w - omega0 * omega0;
        if p != 0.0 {
            starts.push((0.5 * b0, 0.5 * b0 / (p * p), p));
        }
    }

    let steps = [1e-4 * gamma / omega0, 1e-5, 1e-5, 1e-6];
    let unpack_with = |p_scale: f64| {
        move |x: &[f64]| CompositeModelParams {
            floor,
            lorentzian_weight: b_max * logistic(x[1]),
            fano_weight: x[2].exp(),
            omega_m: x[0].exp(),
            gamma,
            fano_param: x[3] * p_scale / (REFERENCE_GAMMA_EL * REFERENCE_GAMMA_EL),
            gamma_el: REFERENCE_GAMMA_EL,
        }
    };
    let mut best: Option<(LmOutcome, f64, CompositeModelParams)> = None;
    for &(b_init, c_init, p_init) in &starts {
        let p_scale = p_init.abs();
        let b_frac = (b_init / b_max).clamp(1e-3, 0.999);
        let unpack = unpack_with(p_scale);
        let residuals = |x: &[f64], out: &mut [f64]| {
            let p = unpack(x);
            p.is_valid() && data.fill_residuals(|w| composite_model(w, &p), out)
        };
        let x0 = [omega0.ln(), logit(b_frac), c_init.max(f64::MIN_POSITIVE).ln(), p_init / p_scale];
        let Some(out) = minimize(residuals, &x0, n, &steps, &opts.lm) else {
            continue;
        };
        let initial = unpack(&x0);
        let better = best.as_ref().is_none_or(|(b, _, _)| out.chi2 < b.chi2);
        if better {
            best = Some((out, p_scale, initial));
        }
    }
    let (out, p_scale, initial) = best.ok_or_else(|| FitError::Failed("model undefined at every starting point".into()))?;

    let x = &out.x;
    let cov = composite_covariance(&data, x, unpack_with(p_scale), &steps);
    let strength = x[3] * p_scale;
    let strength_error = delta_sd(&cov, 3, p_scale);
    let sig = logistic(x[1]);
    let (fano_param, fano_error, gamma_el, gamma_el_error) = split_strength(strength, strength_error, &opts.split)?;
    let params = CompositeModelParams {
        floor,
        lorentzian_weight: b_max * sig,
        fano_weight: x[2].exp(),
        omega_m: x[0].exp(),
        gamma,
        fano_param,
        gamma_el,
    };
    let errors = ParamErrors {
        floor: 0.0,
        lorentzian_weight: delta_sd(&cov, 1, b_max * sig * (1.0 - sig)),
        fano_weight: delta_sd(&cov, 2, 1.0),
        omega_m: delta_sd(&cov, 0, params.omega_m),
        gamma: 0.0,
        fano_param: fano_error,
        gamma_el: gamma_el_error,
    };
    let to_hz = |i: usize| data.omega[i] / (2.0 * PI);
    Ok(FitResult {
        model: ModelKind::Composite,
        params,
        standard_errors: errors,
        fano_strength: strength,
        fano_strength_error: strength_error,
        fano_gamma_el_covariance: 0.0,
        split: Some(opts.split),
        chi2_per_dof: chi2_per_dof(&out, 4),
        n_iterations: out.iterations,
        converged: out.converged,
        hz: placeholder_hz(),
        diagnostics: FitDiagnostics {
            n_bins: n,
            gradient_norm: out.gradient_norm,
            initial,
            fixed: vec!["floor".into(), "gamma".into()],
            dip_hz_initial: Some(to_hz(dip_idx)),
            runner_up_dip_hz: candidates.get(1).map(|c| to_hz(c.0)),
        },
        spectrum_sha256: spectrum_hash(spec),
    }
    .finish())
}

/// Returns `(𝔣, σ_𝔣, γ_el, σ_γ)` for a fitted `p ± σ_p`.
fn split_strength(p: f64, sigma_p: f64, split: &FanoSplit) -> Result<(f64, f64, f64, f64), FitError> {
    let from_fano = |f: f64| -> Result<(f64, f64, f64, f64), FitError> {
        if !(p / f > 0.0) {
            return Err(FitError::Failed(format!("fitted p = {p:e} has the opposite sign to 𝔣 = {f:e}")));
        }
        let g = (p / f).sqrt();
        Ok((f, 0.0, g, 0.5 * g * sigma_p / p.abs()))
    };
    match *split {
        FanoSplit::ReferenceRate { gamma_el } => {
            if !(gamma_el > 0.0) {
                return Err(FitError::InvalidSetting("reference gamma_el must be > 0".into()));
            }
            let g2 = gamma_el * gamma_el;
            Ok((p / g2, sigma_p / g2, gamma_el, 0.0))
        }
        FanoSplit::KnownFano { fano_param } => from_fano(fano_param),
        FanoSplit::KnownCharge { particle_charge, needle_charge } => {
            let qq = (particle_charge * needle_charge).abs();
            if !(qq > 0.0) {
                return Err(FitError::InvalidSetting("known charges must be non-zero".into()));
            }
            from_fano(ELEMENTARY_CHARGE * ELEMENTARY_CHARGE / qq * p.signum())
        }
    }
}
