//! Time-domain integration of the feedback-cooled, gas-damped axial motion
//!
//! ```text
//! dz   = (p/m) dt
//! dp   = [−∂_z U_eff − f_fb − 2γ_coll p] dt + √(4γ_coll m k_B T) dW
//! f_fb = β ∂_z(U_opt + U_scatt) · z · p
//! ```
//!
//! Each step is a BAOAB splitting: conservative half-kick with the feedback
//! applied as an exact exponential in `p`, half drift, exact
//! Ornstein–Uhlenbeck update for gas damping and noise, half drift,
//! half-kick. With no gas and no feedback it reduces to velocity Verlet.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{BOLTZMANN, NITROGEN_MOLECULAR_MASS};
use crate::physics::{self, NeedleConfig, PhysicsError, TrapConfig};
use crate::CODE_VERSION;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {field} {constraint}")]
    InvalidConfig {
        field: &'static str,
        constraint: &'static str,
    },
    #[error("timestep too coarse: ω_m·dt = {omega_dt:.4} (must be < 0.1)")]
    ResolutionGuard { omega_dt: f64 },
    #[error("particle lost at t = {time:e} s: |z| = {z:e} m exceeds 10 w0")]
    Unstable { time: f64, z: f64 },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("trajectory i/o: {0}")]
    Io(String),
}

/// Accommodation factor `1 + π/8` for diffuse reflection with full thermal
/// accommodation.
const EPSTEIN_DIFFUSE_FACTOR: f64 = 1.0 + std::f64::consts::PI / 8.0;

/// Gas collision rate `γ_coll` (the coefficient of `−2γ_coll p`) for a sphere
/// in the free-molecular regime.
///
/// Epstein drag (P. S. Epstein, Phys. Rev. 23, 710 (1924)) on a sphere of
/// radius r is `F = −(4π/3) δ r² n m_g v̄ · v` with mean molecular speed
/// `v̄ = √(8k_BT/πm_g)`, `n = p/k_BT` and `δ = 1 + π/8`. Dividing by the
/// particle mass gives the momentum damping rate
/// `Γ_gas = δ · p · √(8m_g/(πk_BT)) / (r ρ)`, and `γ_coll = Γ_gas / 2`.
pub fn gas_damping(pressure: f64, temperature: f64, particle_radius: f64, particle_density: f64, gas_molecular_mass: f64) -> f64 {
    let mean_speed_inverse = (8.0 * gas_molecular_mass / (std::f64::consts::PI * BOLTZMANN * temperature)).sqrt();
    0.5 * EPSTEIN_DIFFUSE_FACTOR * pressure * mean_speed_inverse / (particle_radius * particle_density)
}

/// Parametric feedback force `β ∂_z(U_opt + U_scatt) z p_z`.
pub fn feedback_force(z: f64, p_z: f64, beta: f64, cfg: &TrapConfig) -> f64 {
    beta * physics::optical_gradient(z, cfg) * z * p_z
}

/// Starting point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// At rest at the equilibrium position.
    Equilibrium,
    /// Offset from equilibrium with a given momentum.
    Displaced { offset: f64, momentum: f64 },
    /// Position and momentum drawn from the harmonic Boltzmann distribution
    /// at the gas temperature.
    Thermal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub timestep: f64,
    pub duration: f64,
    pub seed: u64,
    /// Pa.
    pub gas_pressure: f64,
    /// K.
    pub gas_temperature: f64,
    /// kg.
    pub gas_molecular_mass: f64,
    /// β in kg⁻¹ m⁻² s. Positive values cool.
    pub feedback_strength: f64,
    pub record_stride: usize,
    pub initial_state: InitialState,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            timestep: 1e-7,
            duration: 1.0,
            seed: 0,
            gas_pressure: 8e-3,
            gas_temperature: 295.0,
            gas_molecular_mass: NITROGEN_MOLECULAR_MASS,
            feedback_strength: 0.0,
            record_stride: 8,
            initial_state: InitialState::Thermal,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |field, constraint| Err(SimulationError::InvalidConfig { field, constraint });
        if !(self.timestep > 0.0 && self.timestep.is_finite()) {
            return bad("timestep", "must be finite and > 0");
        }
        if !(self.duration >= 1000.0 * self.timestep) || !self.duration.is_finite() {
            return bad("duration", "must cover at least 1000 timesteps");
        }
        if !(self.gas_pressure >= 0.0 && self.gas_pressure.is_finite()) {
            return bad("gas_pressure", "must be finite and >= 0");
        }
        if !(self.gas_temperature > 0.0 && self.gas_temperature.is_finite()) {
            return bad("gas_temperature", "must be finite and > 0");
        }
        if !(self.gas_molecular_mass > 0.0 && self.gas_molecular_mass.is_finite()) {
            return bad("gas_molecular_mass", "must be finite and > 0");
        }
        if !self.feedback_strength.is_finite() {
            return bad("feedback_strength", "must be finite");
        }
        if self.record_stride < 1 {
            return bad("record_stride", "must be >= 1");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.timestep).round() as usize
    }

    pub fn sample_interval(&self) -> f64 {
        self.timestep * self.record_stride as f64
    }
}

/// Everything needed to reproduce a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetadata {
    pub trap: TrapConfig,
    pub needle: NeedleConfig,
    pub charge: f64,
    pub simulation: SimulationConfig,
    pub equilibrium: f64,
    pub omega_m: f64,
    pub gamma_coll: f64,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_interval: f64,
    pub z_series: Vec<f64>,
    pub p_series: Vec<f64>,
    pub metadata: TrajectoryMetadata,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.z_series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_series.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |k| k as f64 * self.sample_interval)
    }

    /// `p²/2m + U_eff(z) − U_eff(z₀)` for every sample.
    pub fn oscillation_energy(&self) -> Vec<f64> {
        let md = &self.metadata;
        let m = md.trap.mass();
        let u0 = physics::effective_potential(md.equilibrium, &md.trap, &md.needle, md.charge);
        self.z_series
            .iter()
            .zip(&self.p_series)
            .map(|(&z, &p)| p * p / (2.0 * m) + physics::effective_potential(z, &md.trap, &md.needle, md.charge) - u0)
            .collect()
    }

    /// Writes `<stem>.csv` (`t,z,p`) and the `<stem>.json` metadata sidecar.
    pub fn write(&self, csv_path: &Path) -> Result<(), SimulationError> {
        let io = |e: std::io::Error| SimulationError::Io(e.to_string());
        let mut out = String::with_capacity(self.len() * 48 + 8);
        out.push_str("t,z,p\n");
        for (k, (z, p)) in self.z_series.iter().zip(&self.p_series).enumerate() {
            out.push_str(&format!("{:e},{:e},{:e}\n", k as f64 * self.sample_interval, z, p));
        }
        let mut file = fs::File::create(csv_path).map_err(io)?;
        file.write_all(out.as_bytes()).map_err(io)?;
        let json = serde_json::to_string_pretty(&self.metadata).map_err(|e| SimulationError::Io(e.to_string()))?;
        fs::write(csv_path.with_extension("json"), json + "\n").map_err(io)
    }

    pub fn read(csv_path: &Path) -> Result<Self, SimulationError> {
        let err = |e: &dyn std::fmt::Display| SimulationError::Io(format!("{}: {e}", csv_path.display()));
        let meta_text = fs::read_to_string(csv_path.with_extension("json")).map_err(|e| err(&e))?;
        let metadata: TrajectoryMetadata = serde_json::from_str(&meta_text).map_err(|e| err(&e))?;
        let mut reader = csv::Reader::from_path(csv_path).map_err(|e| err(&e))?;
        let header = reader.headers().map_err(|e| err(&e))?.clone();
        if header.iter().collect::<Vec<_>>() != ["t", "z", "p"] {
            return Err(err(&"expected header t,z,p"));
        }
        let mut times = Vec::new();
        let mut z_series = Vec::new();
        let mut p_series = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| err(&e))?;
            let parse = |i: usize| record[i].trim().parse::<f64>().map_err(|e| err(&e));
            times.push(parse(0)?);
            z_series.push(parse(1)?);
            p_series.push(parse(2)?);
        }
        let sample_interval = if times.len() > 1 {
            (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64
        } else {
            metadata.simulation.sample_interval()
        };
        Ok(Self { sample_interval, z_series, p_series, metadata })
    }
}

/// Integrates the axial equations of motion.
///
/// Bit-reproducible for a given `(seed, configs)`. Fails before stepping if
/// `ω_m·dt ≥ 0.1`, and during the run if `|z| > 10 w₀`.
pub fn simulate(trap: &TrapConfig, needle: &NeedleConfig, q: f64, sim: &SimulationConfig) -> Result<Trajectory, SimulationError> {
    trap.validate()?;
    needle.validate()?;
    sim.validate()?;

    let z0 = physics::find_equilibrium(trap, needle, q)?;
    let omega_m = physics::harmonic_frequency(z0, trap)?;
    let omega_dt = omega_m * sim.timestep;
    if omega_dt >= 0.1 {
        return Err(SimulationError::ResolutionGuard { omega_dt });
    }

    let m = trap.mass();
    let dt = sim.timestep;
    let kt = BOLTZMANN * sim.gas_temperature;
    let gamma_coll = gas_damping(sim.gas_pressure, sim.gas_temperature, trap.particle_radius, trap.particle_density, sim.gas_molecular_mass);
    let ou_decay = (-2.0 * gamma_coll * dt).exp();
    let ou_kick = ((1.0 - ou_decay * ou_decay) * m * kt).sqrt();
    let beta = sim.feedback_strength;
    let loss_radius = 10.0 * trap.waist_radius;

    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let (mut z, mut p) = match sim.initial_state {
        InitialState::Equilibrium => (z0, 0.0),
        InitialState::Displaced { offset, momentum } => (z0 + offset, momentum),
        InitialState::Thermal => {
            let gz: f64 = StandardNormal.sample(&mut rng);
            let gp: f64 = StandardNormal.sample(&mut rng);
            (z0 + gz * (kt / (m * omega_m * omega_m)).sqrt(), gp * (m * kt).sqrt())
        }
    };

    let kick = |z: f64, p: f64| -> f64 {
        let mut p = p + 0.5 * dt * physics::total_force(z, trap, needle, q);
        if beta != 0.0 {
            p *= (-0.5 * dt * beta * physics::optical_gradient(z, trap) * z).exp();
        }
        p
    };

    let steps = sim.steps();
    let stride = sim.record_stride;
    let samples = steps / stride;
    let mut z_series = Vec::with_capacity(samples);
    let mut p_series = Vec::with_capacity(samples);
    let half_drift = 0.5 * dt / m;
    for block in 0..samples {
        z_series.push(z);
        p_series.push(p);
        for _ in 0..stride {
            p = kick(z, p);
            z += half_drift * p;
            if gamma_coll > 0.0 {
                let xi: f64 = StandardNormal.sample(&mut rng);
                p = ou_decay * p + ou_kick * xi;
            }
            z += half_drift * p;
            p = kick(z, p);
        }
        if !(z.abs() <= loss_radius) || !p.is_finite() {
            return Err(SimulationError::Unstable {
                time: ((block + 1) * stride) as f64 * dt,
                z,
            });
        }
    }

    Ok(Trajectory {
        sample_interval: sim.sample_interval(),
        z_series,
        p_series,
        metadata: TrajectoryMetadata {
            trap: *trap,
            needle: *needle,
            charge: q,
            simulation: sim.clone(),
            equilibrium: z0,
            omega_m,
            gamma_coll,
            code_version: CODE_VERSION.to_string(),
        },
    })
}
