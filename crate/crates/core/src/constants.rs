//! CODATA 2018 physical constants in SI units.

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const HBAR: f64 = 1.054_571_817e-34;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

/// 1 / (4π ε₀), the Coulomb constant.
pub const COULOMB_CONSTANT: f64 = 1.0 / (4.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY);

/// Molecular mass of N₂ (28.0134 u).
pub const NITROGEN_MOLECULAR_MASS: f64 = 28.0134 * ATOMIC_MASS_UNIT;

/// One millibar in pascal.
pub const MBAR: f64 = 100.0;
