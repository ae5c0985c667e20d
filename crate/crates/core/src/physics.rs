//! Closed-form axial potentials, forces, equilibrium and frequency formulas
//! for a dielectric nanoparticle in a focused-beam optical trap with a
//! charged needle nearby.
//!
//! Coordinates: `z` is the displacement from the focus along the beam
//! propagation direction, pointing away from the mirror. The needle tip sits
//! at `(R/√2, 0, R/√2)`, so only the `1/√2` projection of the Coulomb field
//! acts along `z`.
//!
//! All quantities are SI. Angular frequencies are rad/s.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{
    COULOMB_CONSTANT, ELEMENTARY_CHARGE, HBAR, SPEED_OF_LIGHT, VACUUM_PERMITTIVITY,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("invalid configuration: {field} {constraint}")]
    InvalidConfig {
        field: &'static str,
        constraint: &'static str,
    },
    #[error("equilibrium search did not converge after {iterations} iterations (|F| = {residual:e} N)")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("potential is not confining at z = {z:e} m (curvature {curvature:e} N/m)")]
    NotConfining { z: f64, curvature: f64 },
    #[error("trap destabilised: squared harmonic frequency {radicand:e} rad²/s² is not positive")]
    ImaginaryFrequency { radicand: f64 },
}

fn require(ok: bool, field: &'static str, constraint: &'static str) -> Result<(), PhysicsError> {
    if ok {
        Ok(())
    } else {
        Err(PhysicsError::InvalidConfig { field, constraint })
    }
}

/// Laser, optics and particle parameters of the optical trap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapConfig {
    /// Trapping laser power `P` in W.
    pub laser_power: f64,
    /// Vacuum wavelength `λ` in m.
    pub wavelength: f64,
    /// Mean beam waist radius `w₀` in m.
    pub waist_radius: f64,
    /// Rayleigh length `z_R` in m.
    pub rayleigh_length: f64,
    /// Particle radius in m.
    pub particle_radius: f64,
    /// Particle density `ρ` in kg/m³.
    pub particle_density: f64,
    /// Dimensionless electric susceptibility `χ` entering the trap frequency.
    pub susceptibility: f64,
    /// Quartic trap non-linearity `η` in J/m⁴.
    pub nonlinearity: f64,
    /// Multiplies the effective scattering cross-section `σ_R = π²V₀²/λ⁴`.
    /// Leave at 1 unless calibrating against a cross-section that carries an
    /// explicit polarisability factor.
    pub scattering_correction: f64,
}

impl TrapConfig {
    /// 1550 nm, 0.5 W, w₀ = 1 µm, z_R = 2 µm trap holding a 75 nm silica
    /// sphere (ρ = 1800 kg/m³, χ = 0.9). Beam parameters are assumed, not
    /// measured; the particle matches the experiment's silica spheres.
    pub fn reference() -> Self {
        Self {
            laser_power: 0.5,
            wavelength: 1550e-9,
            waist_radius: 1e-6,
            rayleigh_length: 2e-6,
            particle_radius: 75e-9,
            particle_density: 1800.0,
            susceptibility: 0.9,
            nonlinearity: 0.0,
            scattering_correction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        require(pos(self.laser_power), "laser_power", "must be finite and > 0")?;
        require(pos(self.wavelength), "wavelength", "must be finite and > 0")?;
        require(pos(self.waist_radius), "waist_radius", "must be finite and > 0")?;
        require(pos(self.rayleigh_length), "rayleigh_length", "must be finite and > 0")?;
        require(pos(self.particle_radius), "particle_radius", "must be finite and > 0")?;
        require(pos(self.particle_density), "particle_density", "must be finite and > 0")?;
        require(pos(self.susceptibility), "susceptibility", "must be finite and > 0")?;
        require(
            self.nonlinearity.is_finite() && self.nonlinearity >= 0.0,
            "nonlinearity",
            "must be finite and >= 0",
        )?;
        require(
            self.scattering_correction.is_finite() && self.scattering_correction >= 0.0,
            "scattering_correction",
            "must be finite and >= 0",
        )
    }

    /// Particle volume `V₀ = (4/3)π r³`.
    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.particle_radius.powi(3)
    }

    pub fn mass(&self) -> f64 {
        self.volume() * self.particle_density
    }

    /// Effective beam cross-section `σ_L = π w₀²`.
    pub fn beam_area(&self) -> f64 {
        PI * self.waist_radius * self.waist_radius
    }

    /// `ω₀² = 2Pχ / (c σ_L ρ z_R²)`.
    pub fn omega0_squared(&self) -> f64 {
        2.0 * self.laser_power * self.susceptibility
            / (SPEED_OF_LIGHT
                * self.beam_area()
                * self.particle_density
                * self.rayleigh_length
                * self.rayleigh_length)
    }

    pub fn omega0(&self) -> f64 {
        self.omega0_squared().sqrt()
    }

    /// Laser angular frequency `ω_L = 2πc/λ`.
    pub fn laser_angular_frequency(&self) -> f64 {
        2.0 * PI * SPEED_OF_LIGHT / self.wavelength
    }

    /// `λ / (π w₀²)`, the inverse length inside the scattering arctangent.
    fn scattering_wavenumber(&self) -> f64 {
        self.wavelength / (PI * self.waist_radius * self.waist_radius)
    }

    /// Prefactor `32π³ħΓ_s w₀² / (3λ²)` of the scattering potential.
    fn scattering_prefactor(&self) -> f64 {
        32.0 * PI.powi(3) * HBAR * scattering_rate(self) * self.waist_radius.powi(2)
            / (3.0 * self.wavelength.powi(2))
    }

    /// Constant scattering force at the focus, `32π²ħΓ_s / (3λ)`.
    pub fn scattering_force_at_focus(&self) -> f64 {
        32.0 * PI * PI * HBAR * scattering_rate(self) / (3.0 * self.wavelength)
    }
}

/// Needle-tip geometry and charge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleConfig {
    /// Applied voltage in V.
    pub voltage: f64,
    /// Trap-to-tip separation `R` in m.
    pub tip_distance: f64,
    /// Tip radius in m, used by the tip-charge model.
    pub tip_radius: f64,
    /// Tip charge `Q` in C.
    pub needle_charge: f64,
}

impl NeedleConfig {
    /// Needle at `voltage` whose tip charge follows the isolated-sphere model
    /// with unit calibration.
    pub fn from_voltage(voltage: f64, tip_distance: f64, tip_radius: f64) -> Self {
        Self::calibrated(voltage, tip_distance, tip_radius, 1.0)
    }

    pub fn calibrated(voltage: f64, tip_distance: f64, tip_radius: f64, calibration: f64) -> Self {
        Self {
            voltage,
            tip_distance,
            tip_radius,
            needle_charge: crate::inference::needle_charge(voltage, tip_radius) * calibration,
        }
    }

    /// Same geometry, new voltage; the charge is rescaled linearly so any
    /// calibration already folded into `needle_charge` is kept.
    pub fn at_voltage(&self, voltage: f64) -> Self {
        let per_volt = if self.voltage != 0.0 {
            self.needle_charge / self.voltage
        } else {
            crate::inference::needle_charge(1.0, self.tip_radius)
        };
        Self {
            voltage,
            needle_charge: per_volt * voltage,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        require(
            self.tip_distance.is_finite() && self.tip_distance > 0.0,
            "tip_distance",
            "must be finite and > 0",
        )?;
        require(
            self.tip_radius.is_finite() && self.tip_radius > 0.0,
            "tip_radius",
            "must be finite and > 0",
        )?;
        require(
            self.voltage.is_finite() && self.needle_charge.is_finite(),
            "needle_charge",
            "must be finite",
        )?;
        let same_sign = (self.needle_charge == 0.0 && self.voltage == 0.0)
            || self.needle_charge.signum() == self.voltage.signum() && self.voltage != 0.0;
        require(same_sign, "needle_charge", "must carry the sign of voltage")
    }
}

/// Instantaneous axial state of a charged particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub z: f64,
    pub p_z: f64,
    pub charge: f64,
}

impl ParticleState {
    pub fn new(z: f64, p_z: f64, charge: f64) -> Result<Self, PhysicsError> {
        require(
            z.is_finite() && p_z.is_finite() && charge.is_finite(),
            "state",
            "must be finite",
        )?;
        let n = charge / ELEMENTARY_CHARGE;
        let quantized = (n - n.round()).abs() <= 1e-6 * n.abs().max(1.0);
        require(quantized, "charge", "must be an integer multiple of e0")?;
        Ok(Self { z, p_z, charge })
    }

    pub fn elementary_charges(&self) -> i64 {
        (self.charge / ELEMENTARY_CHARGE).round() as i64
    }
}

/// Optical gradient potential `(m/2)ω₀²z² − ηz⁴`.
pub fn u_opt(z: f64, cfg: &TrapConfig) -> f64 {
    0.5 * cfg.mass() * cfg.omega0_squared() * z * z - cfg.nonlinearity * z.powi(4)
}

/// Photon scattering rate `Γ_s = (σ_R/σ_L) · P/(ħω_L)` with
/// `σ_R = π²V₀²/λ⁴` (times the configured correction factor).
pub fn scattering_rate(cfg: &TrapConfig) -> f64 {
    let sigma_r = cfg.scattering_correction * PI * PI * cfg.volume().powi(2) / cfg.wavelength.powi(4);
    sigma_r / cfg.beam_area() * cfg.laser_power / (HBAR * cfg.laser_angular_frequency())
}

/// Effective potential of the scattering force,
/// `−(32π³ħΓ_s w₀² / 3λ²) · arctan(λz / πw₀²)`.
pub fn u_scatt(z: f64, cfg: &TrapConfig) -> f64 {
    -cfg.scattering_prefactor() * (cfg.scattering_wavenumber() * z).atan()
}

/// Coulomb coupling along `z`, `qQ / (4πε₀√2 R²)`, in N.
pub fn coulomb_gradient(needle: &NeedleConfig, q: f64) -> f64 {
    COULOMB_CONSTANT * q * needle.needle_charge / (SQRT_2 * needle.tip_distance.powi(2))
}

/// Coulomb potential linearised in `z`: `qQz / (4πε₀√2 R²)`.
pub fn u_el(z: f64, needle: &NeedleConfig, q: f64) -> f64 {
    coulomb_gradient(needle, q) * z
}

/// `U_eff = U_opt + U_scatt + U_el`.
pub fn effective_potential(z: f64, cfg: &TrapConfig, needle: &NeedleConfig, q: f64) -> f64 {
    u_opt(z, cfg) + u_scatt(z, cfg) + u_el(z, needle, q)
}

/// `∂_z(U_opt + U_scatt)`: the gradient modulated by the laser-power feedback.
pub fn optical_gradient(z: f64, cfg: &TrapConfig) -> f64 {
    let a = cfg.scattering_wavenumber();
    let az = a * z;
    cfg.mass() * cfg.omega0_squared() * z - 4.0 * cfg.nonlinearity * z.powi(3)
        - cfg.scattering_prefactor() * a / (1.0 + az * az)
}

/// `−∂_z U_eff`, analytic.
pub fn total_force(z: f64, cfg: &TrapConfig, needle: &NeedleConfig, q: f64) -> f64 {
    -optical_gradient(z, cfg) - coulomb_gradient(needle, q)
}

/// `∂²_z U_eff` (the Coulomb term is linear and drops out).
pub fn potential_curvature(z: f64, cfg: &TrapConfig) -> f64 {
    let a = cfg.scattering_wavenumber();
    let az = a * z;
    cfg.mass() * cfg.omega0_squared() - 12.0 * cfg.nonlinearity * z * z
        + cfg.scattering_prefactor() * 2.0 * a.powi(3) * z / (1.0 + az * az).powi(2)
}

/// Absolute force tolerance of the equilibrium search, in N.
pub const EQUILIBRIUM_FORCE_TOLERANCE: f64 = 1e-24;
const EQUILIBRIUM_MAX_ITERATIONS: usize = 100;

/// Minimum of `U_eff` by damped Newton iteration from the focus.
///
/// The step is halved while it increases `|F|`. Fails with
/// [`PhysicsError::NotConfining`] if the curvature at the root is not
/// positive.
pub fn find_equilibrium(cfg: &TrapConfig, needle: &NeedleConfig, q: f64) -> Result<f64, PhysicsError> {
    let mut z = 0.0;
    let mut force = total_force(z, cfg, needle, q);
    for _ in 0..EQUILIBRIUM_MAX_ITERATIONS {
        if force.abs() < EQUILIBRIUM_FORCE_TOLERANCE {
            let curvature = potential_curvature(z, cfg);
            if curvature <= 0.0 {
                return Err(PhysicsError::NotConfining { z, curvature });
            }
            return Ok(z);
        }
        let curvature = potential_curvature(z, cfg);
        if curvature <= 0.0 || !curvature.is_finite() {
            return Err(PhysicsError::NotConfining { z, curvature });
        }
        let mut step = force / curvature;
        let mut next = z + step;
        let mut next_force = total_force(next, cfg, needle, q);
        let mut halvings = 0;
        while next_force.abs() > force.abs() && halvings < 60 {
            step *= 0.5;
            next = z + step;
            next_force = total_force(next, cfg, needle, q);
            halvings += 1;
        }
        if next == z {
            break;
        }
        z = next;
        force = next_force;
    }
    if force.abs() < EQUILIBRIUM_FORCE_TOLERANCE {
        let curvature = potential_curvature(z, cfg);
        if curvature > 0.0 {
            return Ok(z);
        }
        return Err(PhysicsError::NotConfining { z, curvature });
    }
    Err(PhysicsError::NoConvergence {
        iterations: EQUILIBRIUM_MAX_ITERATIONS,
        residual: force.abs(),
    })
}

/// First-order equilibrium estimate
/// `z₀ ≈ −(1/mω₀²)(qQ/(4πε₀√2R²) − 32π²Γ_sħ/(3λ))`.
pub fn linearized_equilibrium(cfg: &TrapConfig, needle: &NeedleConfig, q: f64) -> f64 {
    -(coulomb_gradient(needle, q) - cfg.scattering_force_at_focus()) / (cfg.mass() * cfg.omega0_squared())
}

/// Small-oscillation frequency about `z0`:
/// `√(ω₀² − 12ηz₀²/m + 64π⁴λw₀⁴ħz₀Γ_s / (3m(π²w₀⁴ + λ²z₀²)²))`.
pub fn harmonic_frequency(z0: f64, cfg: &TrapConfig) -> Result<f64, PhysicsError> {
    let m = cfg.mass();
    let w4 = cfg.waist_radius.powi(4);
    let lambda = cfg.wavelength;
    let scatter = 64.0 * PI.powi(4) * lambda * w4 * HBAR * z0 * scattering_rate(cfg)
        / (3.0 * m * (PI * PI * w4 + lambda * lambda * z0 * z0).powi(2));
    let radicand = cfg.omega0_squared() - 12.0 * cfg.nonlinearity * z0 * z0 / m + scatter;
    if radicand > 0.0 && radicand.is_finite() {
        Ok(radicand.sqrt())
    } else {
        Err(PhysicsError::ImaginaryFrequency { radicand })
    }
}

/// Coefficients of the linearised frequency model `ω_m = ω₀ + 𝓑m² + 𝓒qQ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftCoefficients {
    pub omega0: f64,
    /// `𝓑` in rad s⁻¹ kg⁻².
    pub mass: f64,
    /// Signed `𝓒` in rad s⁻¹ C⁻². Negative for this needle geometry: a
    /// repulsive needle pushes the particle toward the mirror, where the
    /// scattering contribution to the curvature is smaller.
    pub charge: f64,
}

impl ShiftCoefficients {
    pub fn new(cfg: &TrapConfig, needle: &NeedleConfig) -> Self {
        let p = cfg.laser_power;
        let w0 = cfg.waist_radius;
        let lambda = cfg.wavelength;
        let rho = cfg.particle_density;
        let omega0 = cfg.omega0();
        let kappa = cfg.scattering_correction;
        let b_root = 16.0 * PI / 3.0 * p
            / (omega0.powf(1.5) * w0.powi(4) * SPEED_OF_LIGHT * lambda.powi(3) * rho * rho);
        let c_magnitude = 2.0 * SQRT_2 * p
            / (3.0
                * PI
                * VACUUM_PERMITTIVITY
                * needle.tip_distance.powi(2)
                * lambda.powi(2)
                * w0.powi(6)
                * omega0.powi(3)
                * rho
                * rho
                * SPEED_OF_LIGHT);
        Self {
            omega0,
            mass: kappa * kappa * b_root * b_root,
            charge: -kappa * c_magnitude,
        }
    }

    pub fn frequency(&self, mass: f64, charge_product: f64) -> f64 {
        self.omega0 + self.mass * mass * mass + self.charge * charge_product
    }
}

/// Linearised mechanical frequency `ω₀ + 𝓑m² + 𝓒qQ` for a particle of mass
/// `m` and charge product `qQ`.
pub fn frequency_shift_model(m: f64, q_times_q: f64, cfg: &TrapConfig, needle: &NeedleConfig) -> f64 {
    ShiftCoefficients::new(cfg, needle).frequency(m, q_times_q)
}

/// Full-model mechanical frequency: equilibrium search followed by the
/// curvature formula.
pub fn mechanical_frequency(cfg: &TrapConfig, needle: &NeedleConfig, q: f64) -> Result<f64, PhysicsError> {
    let z0 = find_equilibrium(cfg, needle, q)?;
    harmonic_frequency(z0, cfg)
}
