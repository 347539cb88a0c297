//! Single-photon spectroscopy of a force-loaded optomechanical cavity.
//!
//! A constant force on the moving mirror shifts every line of the cavity's
//! single-photon emission and scattering spectra by `2 g0 eta / omega_M`,
//! so the force can be read back from measured spectra. This crate
//! provides:
//!
//! - closed-form long-time emission and scattering spectra
//!   ([`emission`], [`scattering`]) built on displaced-number-state
//!   overlaps ([`franck_condon`]) for number, coherent, and thermal
//!   mirror states ([`states`]);
//! - a brute-force cross-check that integrates the coupled amplitude
//!   equations against explicitly discretized baths ([`oracle`]);
//! - spectrum-to-force inversion: peak detection, zero-phonon-line
//!   readout with sideband-branch disambiguation, and the spectral-height
//!   method ([`inference`]);
//! - an oscillating-force mapping and SI conversions ([`params`]), plus
//!   JSON/CSV interchange ([`config`], [`grid`]).

pub mod config;
pub mod emission;
pub mod error;
pub mod franck_condon;
pub mod grid;
pub mod inference;
pub mod oracle;
pub mod params;
pub mod scattering;
pub mod states;

pub use error::{Error, Result};
pub use params::{min_measurable_force, DerivedParams, PhysicalParams, SystemParams, HBAR};

/// Hard cap on every level truncation in the crate.
pub const TRUNCATION_CAP: usize = 512;
