use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fanosense::constants::ELEMENTARY_CHARGE;
use fanosense::numerics::linear_regression;
use fanosense::physics::*;

fn needle(voltage: f64) -> NeedleConfig {
    NeedleConfig::from_voltage(voltage, 16.877e-3, 100e-6)
}

// Golden values evaluated independently at 30 significant digits.
#[test]
fn golden_reference_trap() {
    let cfg = TrapConfig::reference();
    assert_relative_eq!(u_opt(50e-9, &cfg), 5.277_088_224_814_515e-22, epsilon = 0.0, max_relative = 1e-12);
    assert_relative_eq!(scattering_rate(&cfg), 6.631_211_035_636_652e12, epsilon = 0.0, max_relative = 1e-12);
    assert_relative_eq!(u_scatt(50e-9, &cfg), -2.374_366_249_937_192e-21, epsilon = 0.0, max_relative = 1e-12);
    assert_relative_eq!(cfg.omega0(), 364_308.847_644_280_55, epsilon = 0.0, max_relative = 1e-12);
}

#[test]
fn force_matches_finite_difference_of_potentials() {
    let cfg = TrapConfig { nonlinearity: 1e-3, ..TrapConfig::reference() };
    let n = needle(1500.0);
    let q = 48.0 * ELEMENTARY_CHARGE;
    let h = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let z: f64 = rng.random_range(-200e-9..200e-9);
        let fd = -(effective_potential(z + h, &cfg, &n, q) - effective_potential(z - h, &cfg, &n, q)) / (2.0 * h);
        let f = total_force(z, &cfg, &n, q);
        assert_relative_eq!(f, fd, epsilon = 0.0, max_relative = 1e-6);
    }
}

#[test]
fn coulomb_slope_by_finite_difference() {
    let n = needle(-3000.0);
    let q = 20.0 * ELEMENTARY_CHARGE;
    let h = 1e-9;
    let fd = (u_el(h, &n, q) - u_el(-h, &n, q)) / (2.0 * h);
    assert_relative_eq!(fd, coulomb_gradient(&n, q), epsilon = 0.0, max_relative = 1e-9);
}

#[test]
fn equilibrium_matches_linearization() {
    let q = 48.0 * ELEMENTARY_CHARGE;
    // The reference trap at 1 kV sits near 0.11 w0, outside the nominal
    // validity range, and still agrees to well under 5%.
    let reference = TrapConfig::reference();
    let weak = TrapConfig { scattering_correction: 0.1, ..reference };
    for (cfg, v) in [(reference, 1000.0), (weak, 0.0), (weak, 1000.0), (weak, -1000.0), (weak, 5000.0)] {
        let n = needle(v);
        let z0 = find_equilibrium(&cfg, &n, q).unwrap();
        assert!(total_force(z0, &cfg, &n, q).abs() < EQUILIBRIUM_FORCE_TOLERANCE);
        assert!(potential_curvature(z0, &cfg) > 0.0);
        let lin = linearized_equilibrium(&cfg, &n, q);
        assert_relative_eq!(z0, lin, epsilon = 0.0, max_relative = 0.05);
    }
}

#[test]
fn frequency_matches_curvature_oracle() {
    let cfg = TrapConfig { nonlinearity: 1e-4, ..TrapConfig::reference() };
    let q = 48.0 * ELEMENTARY_CHARGE;
    let n = needle(2000.0);
    let z0 = find_equilibrium(&cfg, &n, q).unwrap();
    let m = cfg.mass();
    // The η and scattering terms stay well under 10% of ω₀².
    assert!(12.0 * cfg.nonlinearity * z0 * z0 / m < 0.1 * cfg.omega0_squared());
    let h = 1e-9;
    let curv = (effective_potential(z0 + h, &cfg, &n, q) - 2.0 * effective_potential(z0, &cfg, &n, q)
        + effective_potential(z0 - h, &cfg, &n, q))
        / (h * h);
    let oracle = (curv / m).sqrt();
    assert_relative_eq!(harmonic_frequency(z0, &cfg).unwrap(), oracle, epsilon = 0.0, max_relative = 1e-4);
}

#[test]
fn shift_model_tracks_full_model_at_small_displacement() {
    let cfg = TrapConfig { scattering_correction: 0.1, ..TrapConfig::reference() };
    let m = cfg.mass();
    let q = 48.0 * ELEMENTARY_CHARGE;
    for v in [-1000.0, 0.0, 1000.0, 2000.0] {
        let n = needle(v);
        let z0 = find_equilibrium(&cfg, &n, q).unwrap();
        assert!(z0.abs() <= 0.02 * cfg.waist_radius);
        let full = harmonic_frequency(z0, &cfg).unwrap();
        let model = frequency_shift_model(m, q * n.needle_charge, &cfg, &n);
        assert_relative_eq!(model, full, epsilon = 0.0, max_relative = 0.01);
        // The shifts themselves, not just the totals, agree at this level.
        let w0 = cfg.omega0();
        assert_relative_eq!(model - w0, full - w0, epsilon = 0.0, max_relative = 0.01);
    }
}

#[test]
fn shift_model_is_linear_in_charge_product() {
    let cfg = TrapConfig::reference();
    let n = needle(1000.0);
    let m = cfg.mass();
    let qq: Vec<f64> = (-20..=20).map(|k| k as f64 * 1e-29).collect();
    let w: Vec<f64> = qq.iter().map(|&x| frequency_shift_model(m, x, &cfg, &n)).collect();
    let (slope, _, r2) = linear_regression(&qq, &w);
    assert!(r2 > 0.9999, "R² = {r2}");
    let c = ShiftCoefficients::new(&cfg, &n).charge;
    assert!(c < 0.0);
    assert_relative_eq!(slope, c, epsilon = 0.0, max_relative = 1e-6);
    for pair in w.windows(2) {
        assert!(pair[1] < pair[0]);
    }
}

#[test]
fn operations_are_pure() {
    let cfg = TrapConfig { nonlinearity: 2e-4, ..TrapConfig::reference() };
    let n = needle(700.0);
    let q = -5.0 * ELEMENTARY_CHARGE;
    let a = (total_force(3e-8, &cfg, &n, q), find_equilibrium(&cfg, &n, q).unwrap(), mechanical_frequency(&cfg, &n, q).unwrap());
    let b = (total_force(3e-8, &cfg, &n, q), find_equilibrium(&cfg, &n, q).unwrap(), mechanical_frequency(&cfg, &n, q).unwrap());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1.to_bits(), b.1.to_bits());
    assert_eq!(a.2.to_bits(), b.2.to_bits());
}
