//! Force sensing with an optically levitated, charged nanoparticle.
//!
//! The crate is organised bottom-up: trap physics, a Langevin integrator,
//! spectral estimation, line-shape models and fits, and inversion of
//! voltage sweeps for charge and mass. [`experiment`] ties them together.

pub mod constants;
pub mod experiment;
pub mod fit;
pub mod inference;
pub mod langevin;
pub mod lineshape;
pub mod lm;
pub mod numerics;
pub mod physics;
pub mod spectral;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
