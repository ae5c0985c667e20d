use std::f64::consts::PI;

use approx::assert_relative_eq;

use fanosense::constants::{BOLTZMANN, ELEMENTARY_CHARGE, MBAR};
use fanosense::fit::{fit_lorentzian, FitOptions, FrequencyBand};
use fanosense::langevin::*;
use fanosense::physics::*;
use fanosense::spectral::welch_psd;

fn needle(voltage: f64) -> NeedleConfig {
    NeedleConfig::from_voltage(voltage, 16.877e-3, 100e-6)
}

fn omega_m(trap: &TrapConfig, n: &NeedleConfig, q: f64) -> f64 {
    mechanical_frequency(trap, n, q).unwrap()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

#[test]
fn conservative_dynamics_conserve_energy() {
    let trap = TrapConfig::reference();
    let n = needle(0.0);
    let w = omega_m(&trap, &n, 0.0);
    let sim = SimulationConfig {
        timestep: 1e-3 / w,
        duration: 1000.0 * 2.0 * PI / w,
        gas_pressure: 0.0,
        record_stride: 64,
        initial_state: InitialState::Displaced { offset: 50e-9, momentum: 0.0 },
        ..Default::default()
    };
    let e = simulate(&trap, &n, 0.0, &sim).unwrap().oscillation_energy();
    let drift = e.iter().map(|v| ((v - e[0]) / e[0]).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-6, "max relative energy deviation {drift:e}");
}

#[test]
fn period_from_zero_crossings() {
    let trap = TrapConfig::reference();
    let n = needle(0.0);
    let w = omega_m(&trap, &n, 0.0);
    let sim = SimulationConfig {
        timestep: 2e-3 / w,
        duration: 200.0 * 2.0 * PI / w,
        gas_pressure: 0.0,
        record_stride: 1,
        initial_state: InitialState::Displaced { offset: 10e-9, momentum: 0.0 },
        ..Default::default()
    };
    let traj = simulate(&trap, &n, 0.0, &sim).unwrap();
    let z0 = traj.metadata.equilibrium;
    let dt = traj.sample_interval;
    // Upward crossings of the equilibrium, linearly interpolated.
    let mut crossings = Vec::new();
    for (k, pair) in traj.z_series.windows(2).enumerate() {
        let (a, b) = (pair[0] - z0, pair[1] - z0);
        if a < 0.0 && b >= 0.0 {
            crossings.push((k as f64 + a / (a - b)) * dt);
        }
    }
    assert!(crossings.len() > 150);
    let period = (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
    assert_relative_eq!(period, 2.0 * PI / w, epsilon = 0.0, max_relative = 1e-3);
}

#[test]
fn thermal_variance_obeys_equipartition() {
    let trap = TrapConfig::reference();
    let n = needle(0.0);
    let w = omega_m(&trap, &n, 0.0);
    let sim = SimulationConfig { timestep: 0.05 / w, duration: 0.5, gas_pressure: 10.0 * MBAR, seed: 1, ..Default::default() };
    let traj = simulate(&trap, &n, 0.0, &sim).unwrap();
    let expected = BOLTZMANN * sim.gas_temperature / (trap.mass() * w * w);
    assert_relative_eq!(variance(&traj.z_series), expected, epsilon = 0.0, max_relative = 0.05);
}

#[test]
fn stationary_spectrum_is_the_damped_oscillator_lorentzian() {
    let trap = TrapConfig::reference();
    let n = needle(0.0);
    let w = omega_m(&trap, &n, 0.0);
    let sim = SimulationConfig { timestep: 0.05 / w, duration: 1.0, gas_pressure: MBAR, seed: 7, ..Default::default() };
    let traj = simulate(&trap, &n, 0.0, &sim).unwrap();
    let spec = welch_psd(&traj, 1 << 14, 0.5).unwrap();
    assert!(spec.n_averages >= 50);
    let fit = fit_lorentzian(&spec, &FrequencyBand::around(w / (2.0 * PI), 1e4), &FitOptions::default()).unwrap();
    assert!((0.8..=1.2).contains(&fit.chi2_per_dof), "χ²/dof = {}", fit.chi2_per_dof);
    assert_relative_eq!(fit.params.omega_m, w, epsilon = 0.0, max_relative = 1e-3);
    // The linewidth parameter is the full momentum damping rate 2γ_coll.
    assert_relative_eq!(fit.params.gamma, 2.0 * traj.metadata.gamma_coll, epsilon = 0.0, max_relative = 0.1);
}

#[test]
fn feedback_cools_the_motion() {
    let trap = TrapConfig::reference();
    let n = needle(0.0);
    let w = omega_m(&trap, &n, 0.0);
    let run = |beta: f64| {
        let sim = SimulationConfig { timestep: 0.05 / w, duration: 0.5, gas_pressure: MBAR, seed: 3, feedback_strength: beta, ..Default::default() };
        let traj = simulate(&trap, &n, 0.0, &sim).unwrap();
        // Skip the approach to the cooled steady state.
        variance(&traj.z_series[traj.len() / 5..])
    };
    let free = run(0.0);
    let cooled = run(1e25);
    assert!(cooled < free / 2.0, "⟨z²⟩ {cooled:e} vs {free:e}");
}

#[test]
fn mean_position_is_the_static_equilibrium() {
    let trap = TrapConfig::reference();
    let q = 48.0 * ELEMENTARY_CHARGE;
    let n = needle(5000.0);
    let w = omega_m(&trap, &n, q);
    let sim = SimulationConfig { timestep: 0.05 / w, duration: 1.0, gas_pressure: MBAR, seed: 5, ..Default::default() };
    let traj = simulate(&trap, &n, q, &sim).unwrap();
    let z0 = find_equilibrium(&trap, &n, q).unwrap();
    // Batch means: 50 blocks, each far longer than the 1/γ_coll correlation time.
    let blocks: Vec<f64> = traj.z_series.chunks(traj.len() / 50).take(50).map(mean).collect();
    let se = (variance(&blocks) / (blocks.len() - 1) as f64).sqrt();
    let observed = mean(&blocks);
    // The cubic part of the scattering potential shifts the thermal mean
    // by about −0.26 nm, far more than the standard error of a 1 s run, so
    // the oracle is the Boltzmann mean by quadrature rather than z0 itself.
    let kt = BOLTZMANN * sim.gas_temperature;
    let sigma = (kt / (trap.mass() * w * w)).sqrt();
    let u0 = effective_potential(z0, &trap, &n, q);
    let (mut norm, mut first) = (0.0, 0.0);
    let steps = 20_000;
    let h = 24.0 * sigma / steps as f64;
    for k in 0..=steps {
        let z = z0 - 12.0 * sigma + k as f64 * h;
        let wgt = if k == 0 || k == steps { 0.5 } else { 1.0 };
        let b = wgt * (-(effective_potential(z, &trap, &n, q) - u0) / kt).exp();
        norm += b;
        first += b * (z - z0);
    }
    let boltzmann = z0 + first / norm;
    assert!((observed - boltzmann).abs() < 3.0 * se, "mean {observed:e}, Boltzmann {boltzmann:e}, SE {se:e}");
    assert!((observed - z0).abs() < 0.01 * z0.abs());
    // The needle-induced displacement is resolved.
    let z0_off = find_equilibrium(&trap, &needle(0.0), q).unwrap();
    assert!((z0 - z0_off).abs() > 100.0 * se);
}
