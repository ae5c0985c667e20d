//! Inversion of fitted observables into particle and needle properties:
//! tip charge, particle mass and charge, charge-to-mass ratio, predicted
//! Fano parameter and the static Coulomb force.
//!
//! Force sign convention: `static_force` is the radial Coulomb force on the
//! particle, positive when repulsive (q and Q of equal sign). An attractive
//! needle therefore gives a negative force. Its projection on `z` is
//! `−F/√2`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{COULOMB_CONSTANT, ELEMENTARY_CHARGE, VACUUM_PERMITTIVITY};
use crate::physics::{NeedleConfig, ShiftCoefficients, TrapConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("need at least 3 sweep points spanning a factor 3 in voltage, got {0}")]
    InsufficientData(String),
    #[error("degenerate design: the voltages do not separate mass and charge")]
    DegenerateDesign,
    #[error("fitted squared mass {0:e} kg² is not positive")]
    NegativeMass(f64),
}

/// Tip charge of a needle at `voltage`, modelled as an isolated sphere of
/// radius `tip_radius`: `Q = 4πε₀ r V`.
pub fn needle_charge(voltage: f64, tip_radius: f64) -> f64 {
    4.0 * PI * VACUUM_PERMITTIVITY * tip_radius * voltage
}

/// Both sign branches of `𝔣 = ±e₀²/(qQ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanoPrediction {
    pub plus: f64,
    pub minus: f64,
}

impl FanoPrediction {
    /// The branch whose sign matches `sign` (e.g. the sign of a fitted 𝔣).
    pub fn branch(&self, sign: f64) -> f64 {
        if sign >= 0.0 {
            self.plus.abs()
        } else {
            -self.plus.abs()
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.plus.abs()
    }
}

pub fn fano_parameter_prediction(q: f64, needle_q: f64) -> Result<FanoPrediction, InferenceError> {
    let product = q * needle_q;
    if product == 0.0 || !product.is_finite() {
        return Err(InferenceError::InvalidInput("q·Q must be finite and non-zero"));
    }
    let plus = ELEMENTARY_CHARGE * ELEMENTARY_CHARGE / product;
    Ok(FanoPrediction { plus, minus: -plus })
}

/// Radial Coulomb force `qQ / (4πε₀R²)`, positive when repulsive.
pub fn static_force(q: f64, needle_q: f64, distance: f64) -> f64 {
    COULOMB_CONSTANT * q * needle_q / (distance * distance)
}

/// One fitted point of a voltage sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageSweepPoint {
    pub voltage: f64,
    pub omega_m: f64,
    pub omega_m_error: f64,
    #[serde(default)]
    pub fano_param: Option<f64>,
    #[serde(default)]
    pub fano_param_error: Option<f64>,
}

impl VoltageSweepPoint {
    pub fn new(voltage: f64, omega_m: f64, omega_m_error: f64) -> Self {
        Self { voltage, omega_m, omega_m_error, fano_param: None, fano_param_error: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceAtVoltage {
    pub voltage: f64,
    pub force: f64,
    pub force_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub mass: f64,
    pub mass_error: f64,
    /// Signed particle charge in C.
    pub charge: f64,
    pub charge_error: f64,
    pub charge_to_mass: f64,
    pub charge_to_mass_error: f64,
    /// Charge in units of e₀.
    pub charge_elementary: f64,
    /// Nearest integer charge when the charge is resolved to better than 0.3 e₀.
    pub quantized_charge: Option<i64>,
    pub coulomb_force_at: Vec<ForceAtVoltage>,
    /// Residual χ² per degree of freedom of the frequency fit.
    pub chi2_per_dof: f64,
    pub n_points: usize,
    pub coefficients: ShiftCoefficients,
    /// Hashes of the inputs this result was derived from, in order.
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl InferenceResult {
    pub fn force_map(&self) -> BTreeMap<String, f64> {
        self.coulomb_force_at
            .iter()
            .map(|f| (format!("{:.1}", f.voltage), f.force))
            .collect()
    }

    pub fn force_at(&self, voltage: f64, needle: &NeedleConfig) -> f64 {
        static_force(self.charge, needle.at_voltage(voltage).needle_charge, needle.tip_distance)
    }
}

/// Weighted linear least squares of `ω_m − ω₀ = 𝓑·m² + 𝓒·Q(V)·q` over the
/// unknowns `(m², q)`.
///
/// `needle` fixes the geometry and the charge-per-volt map; its own voltage
/// is ignored. When every point carries a positive `omega_m_error` those are
/// used as weights and the covariance is taken as-is; otherwise the points are
/// weighted equally and the covariance is scaled by the residual variance.
pub fn fit_frequency_vs_voltage(
    points: &[VoltageSweepPoint],
    trap: &TrapConfig,
    needle: &NeedleConfig,
) -> Result<InferenceResult, InferenceError> {
    if points.len() < 3 {
        return Err(InferenceError::InsufficientData(format!("{} points", points.len())));
    }
    if points.iter().any(|p| !(p.omega_m > 0.0) || !p.voltage.is_finite() || !(p.omega_m_error >= 0.0)) {
        return Err(InferenceError::InvalidInput("omega_m must be > 0 and errors >= 0"));
    }
    let first = points[0].voltage;
    if points.iter().all(|p| p.voltage == first) {
        return Err(InferenceError::DegenerateDesign);
    }
    let max_v = points.iter().map(|p| p.voltage.abs()).fold(0.0, f64::max);
    let min_v = points.iter().map(|p| p.voltage.abs()).fold(f64::INFINITY, f64::min);
    if max_v < 3.0 * min_v {
        return Err(InferenceError::InsufficientData(format!(
            "voltage magnitudes span {min_v}..{max_v} V"
        )));
    }

    let coeffs = ShiftCoefficients::new(trap, needle);
    let weighted = points.iter().all(|p| p.omega_m_error > 0.0);
    let rows: Vec<([f64; 2], f64, f64)> = points
        .iter()
        .map(|p| {
            let q_needle = needle.at_voltage(p.voltage).needle_charge;
            let w = if weighted { p.omega_m_error.powi(-2) } else { 1.0 };
            ([coeffs.mass, coeffs.charge * q_needle], p.omega_m - coeffs.omega0, w)
        })
        .collect();

    // Columns are rescaled to unit norm before solving; 𝓑 and 𝓒Q differ by
    // tens of orders of magnitude.
    let mut scale = [0.0f64; 2];
    for (x, _, w) in &rows {
        for k in 0..2 {
            scale[k] += w * x[k] * x[k];
        }
    }
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(InferenceError::DegenerateDesign);
    }
    let scale = scale.map(f64::sqrt);
    let mut normal = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for (x, y, w) in &rows {
        let xs = Vector2::new(x[0] / scale[0], x[1] / scale[1]);
        normal += *w * xs * xs.transpose();
        rhs += *w * *y * xs;
    }
    let det = normal.determinant();
    if !(det.abs() > 1e-12) {
        return Err(InferenceError::DegenerateDesign);
    }
    let inverse = normal.try_inverse().ok_or(InferenceError::DegenerateDesign)?;
    let solution = inverse * rhs;
    let mass_sq = solution[0] / scale[0];
    let charge = solution[1] / scale[1];

    let chi2: f64 = rows
        .iter()
        .map(|(x, y, w)| {
            let r = y - x[0] * mass_sq - x[1] * charge;
            w * r * r
        })
        .sum();
    let dof = (rows.len() - 2).max(1) as f64;
    let chi2_per_dof = chi2 / dof;
    let cov_scale = if weighted { 1.0 } else { chi2_per_dof };
    let var_mass_sq = inverse[(0, 0)] * cov_scale / (scale[0] * scale[0]);
    let var_charge = inverse[(1, 1)] * cov_scale / (scale[1] * scale[1]);
    let cov_mq = inverse[(0, 1)] * cov_scale / (scale[0] * scale[1]);

    if !(mass_sq > 0.0) {
        return Err(InferenceError::NegativeMass(mass_sq));
    }
    let mass = mass_sq.sqrt();
    let mass_error = var_mass_sq.max(0.0).sqrt() / (2.0 * mass);
    let charge_error = var_charge.max(0.0).sqrt();
    let ratio = charge / mass;
    // q/m = q·(m²)^(−1/2): gradient (1/m, −q/(2m³)).
    let g_q = 1.0 / mass;
    let g_m2 = -charge / (2.0 * mass.powi(3));
    let ratio_var = g_q * g_q * var_charge + g_m2 * g_m2 * var_mass_sq + 2.0 * g_q * g_m2 * cov_mq;

    let charge_elementary = charge / ELEMENTARY_CHARGE;
    let quantized_charge = (charge_error / ELEMENTARY_CHARGE < 0.3).then(|| charge_elementary.round() as i64);

    let mut voltages: Vec<f64> = points.iter().map(|p| p.voltage).collect();
    voltages.sort_by(f64::total_cmp);
    voltages.dedup();
    let coulomb_force_at = voltages
        .into_iter()
        .map(|v| {
            let q_needle = needle.at_voltage(v).needle_charge;
            let force = static_force(charge, q_needle, needle.tip_distance);
            let force_error = static_force(charge_error, q_needle, needle.tip_distance).abs();
            ForceAtVoltage { voltage: v, force, force_error }
        })
        .collect();

    Ok(InferenceResult {
        mass,
        mass_error,
        charge,
        charge_error,
        charge_to_mass: ratio,
        charge_to_mass_error: ratio_var.max(0.0).sqrt(),
        charge_elementary,
        quantized_charge,
        coulomb_force_at,
        chi2_per_dof,
        n_points: points.len(),
        coefficients: coeffs,
        provenance: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::u_el;
    use approx::assert_relative_eq;
    use std::f64::consts::SQRT_2;

    const E0: f64 = ELEMENTARY_CHARGE;

    #[test]
    fn needle_charge_model() {
        assert_eq!(needle_charge(0.0, 1e-4), 0.0);
        assert_relative_eq!(needle_charge(2.0 * 731.0, 1e-4), 2.0 * needle_charge(731.0, 1e-4), epsilon = 0.0);
        // 4π · 8.8541878128e-12 F/m · 1e-4 m · 1e3 V
        assert_relative_eq!(needle_charge(1e3, 1e-4), 1.112_650_055_447_870_5e-11, epsilon = 0.0, max_relative = 1e-12);
    }

    #[test]
    fn fano_prediction_branches() {
        let unit = fano_parameter_prediction(E0, E0).unwrap();
        assert_relative_eq!(unit.magnitude(), 1.0, epsilon = 0.0, max_relative = 1e-15);
        assert_eq!(unit.minus, -unit.plus);
        let q = 48.0 * E0;
        let a = fano_parameter_prediction(q, 1e-11).unwrap();
        let b = fano_parameter_prediction(q, 2e-11).unwrap();
        assert_relative_eq!(b.magnitude(), a.magnitude() / 2.0, epsilon = 0.0, max_relative = 1e-15);
        assert!(fano_parameter_prediction(0.0, 1e-11).is_err());
        assert!(fano_parameter_prediction(q, 0.0).is_err());
        assert_eq!(a.branch(-1.0), -a.magnitude());
    }

    #[test]
    fn fano_prediction_for_48_e0_at_one_kilovolt() {
        // e₀/(48 · 4πε₀ · 1e-4 m · 1e3 V), evaluated independently in double precision.
        let q = 48.0 * E0;
        let f = fano_parameter_prediction(q, needle_charge(1e3, 1e-4)).unwrap();
        assert_relative_eq!(f.plus, 2.999_926_141e-10, epsilon = 0.0, max_relative = 1e-9);
    }

    #[test]
    fn static_force_scaling() {
        assert_eq!(static_force(0.0, 1e-11, 0.01), 0.0);
        let f1 = static_force(7.7e-18, 1.1e-11, 0.01);
        assert_relative_eq!(static_force(7.7e-18, 1.1e-11, 0.02), f1 / 4.0, epsilon = 0.0, max_relative = 1e-15);
        assert!(static_force(7.7e-18, -1.1e-11, 0.01) < 0.0);
    }

    #[test]
    fn force_is_root_two_times_coulomb_slope() {
        for (q, v, r) in [(48.0 * E0, 1e3, 0.0169), (-3.0 * E0, 2.5e3, 0.004), (7.0 * E0, -800.0, 0.05)] {
            let needle = NeedleConfig::from_voltage(v, r, 1e-4);
            let slope = u_el(1.0, &needle, q) - u_el(0.0, &needle, q);
            let force = static_force(q, needle.needle_charge, r);
            assert_relative_eq!(force, SQRT_2 * slope, epsilon = 0.0, max_relative = 1e-14);
        }
    }

    fn synthetic_points(trap: &TrapConfig, needle: &NeedleConfig, mass: f64, q: f64, volts: &[f64]) -> Vec<VoltageSweepPoint> {
        let coeffs = ShiftCoefficients::new(trap, needle);
        volts
            .iter()
            .map(|&v| {
                let qq = q * needle.at_voltage(v).needle_charge;
                VoltageSweepPoint::new(v, coeffs.frequency(mass, qq), 0.0)
            })
            .collect()
    }

    #[test]
    fn exact_recovery_from_noiseless_points() {
        let trap = TrapConfig::reference();
        let needle = NeedleConfig::from_voltage(0.0, 0.005, 1e-4);
        let q = 48.0 * E0;
        let mass = q / 2.8;
        let volts: Vec<f64> = (0..=10).map(|k| k as f64 * 1e3).collect();
        let res = fit_frequency_vs_voltage(&synthetic_points(&trap, &needle, mass, q, &volts), &trap, &needle).unwrap();
        assert_relative_eq!(res.charge, q, epsilon = 0.0, max_relative = 1e-8);
        assert_relative_eq!(res.mass, mass, epsilon = 0.0, max_relative = 1e-8);
        assert_eq!(res.quantized_charge, Some(48));
        assert_eq!(res.coulomb_force_at.len(), 11);
    }

    #[test]
    fn voltage_sign_flip_flips_charge_only() {
        let trap = TrapConfig::reference();
        let needle = NeedleConfig::from_voltage(0.0, 0.005, 1e-4);
        let q = -21.0 * E0;
        let mass = 2.9e-18;
        let volts: Vec<f64> = (0..=8).map(|k| k as f64 * 1.25e3).collect();
        let mut pts = synthetic_points(&trap, &needle, mass, q, &volts);
        for (i, p) in pts.iter_mut().enumerate() {
            p.omega_m += if i % 2 == 0 { 3.0 } else { -2.0 };
            p.omega_m_error = 2.5;
        }
        let flipped: Vec<VoltageSweepPoint> = pts.iter().map(|p| VoltageSweepPoint { voltage: -p.voltage, ..*p }).collect();
        let a = fit_frequency_vs_voltage(&pts, &trap, &needle).unwrap();
        let b = fit_frequency_vs_voltage(&flipped, &trap, &needle).unwrap();
        assert_relative_eq!(a.charge, -b.charge, epsilon = 0.0, max_relative = 1e-12);
        assert_relative_eq!(a.mass, b.mass, epsilon = 0.0, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_and_insufficient_designs() {
        let trap = TrapConfig::reference();
        let needle = NeedleConfig::from_voltage(0.0, 0.005, 1e-4);
        let same = vec![VoltageSweepPoint::new(1e3, 3.6e5, 1.0); 4];
        assert_eq!(fit_frequency_vs_voltage(&same, &trap, &needle), Err(InferenceError::DegenerateDesign));
        let two = vec![VoltageSweepPoint::new(0.0, 3.6e5, 1.0), VoltageSweepPoint::new(1e3, 3.6e5, 1.0)];
        assert!(matches!(fit_frequency_vs_voltage(&two, &trap, &needle), Err(InferenceError::InsufficientData(_))));
        let narrow: Vec<_> = [1e3, 1.5e3, 2e3].iter().map(|&v| VoltageSweepPoint::new(v, 3.6e5, 1.0)).collect();
        assert!(matches!(fit_frequency_vs_voltage(&narrow, &trap, &needle), Err(InferenceError::InsufficientData(_))));
    }

    #[test]
    fn frequencies_below_omega0_give_negative_mass() {
        let trap = TrapConfig::reference();
        let needle = NeedleConfig::from_voltage(0.0, 0.005, 1e-4);
        let w0 = trap.omega0();
        let pts: Vec<_> = [0.0, 5e3, 1e4].iter().map(|&v| VoltageSweepPoint::new(v, w0 - 500.0, 1.0)).collect();
        assert!(matches!(fit_frequency_vs_voltage(&pts, &trap, &needle), Err(InferenceError::NegativeMass(_))));
    }
}
