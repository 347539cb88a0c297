//! System parameters, derived quantities, eigen-energies, resonance
//! conditions, SI force conversion, and the periodic-drive mapping.
//!
//! All frequencies in [`SystemParams`] share one unit. The conventional
//! choice is the mechanical frequency (`omega_m = 1`), matching the
//! dimensionless detuning axes used everywhere else in the crate, but
//! nothing requires it: [`SystemParams::periodic_map`] deliberately
//! returns parameters whose `omega_m` differs from 1 and every formula
//! divides through by `omega_m` explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant (J·s).
pub const HBAR: f64 = 1.054_571_817e-34;

/// Cavity, mechanics, coupling, force, and decay parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    /// Absolute cavity frequency. Only used when reporting absolute
    /// eigen-energies; spectra live on detuning axes and never need it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_c: Option<f64>,
    /// Mechanical frequency (> 0).
    #[serde(rename = "omega_M")]
    pub omega_m: f64,
    /// Single-photon optomechanical coupling (>= 0).
    pub g0: f64,
    /// Force coupling eta = f * x0 / hbar. Sign carries the force direction.
    pub eta: f64,
    /// Decay rate into the detected channel (> 0).
    pub gamma_c: f64,
    /// Decay rate into undetected channels (>= 0).
    pub gamma_d: f64,
}

/// Quantities derived from [`SystemParams`].
///
/// `beta0` and `beta1` are the mirror displacements conditioned on zero
/// and one cavity photon, `beta` their difference, `lambda` the
/// difference of the two ground-state energy shifts, and `zeta` the
/// zero-photon shift itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedParams {
    pub beta0: f64,
    pub beta1: f64,
    pub beta: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub gamma: f64,
}

/// SI-unit quantities needed to convert the dimensionless force coupling
/// into newtons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalParams {
    /// Mechanical frequency in rad/s.
    #[serde(rename = "omega_M_si")]
    pub omega_m_si: f64,
    /// Zero-point fluctuation of the mirror in meters.
    pub x0: f64,
    /// Reduced Planck constant; fixed, overridable only for testing.
    #[serde(default = "default_hbar")]
    pub hbar: f64,
}

fn default_hbar() -> f64 {
    HBAR
}

impl SystemParams {
    pub fn new(omega_m: f64, g0: f64, eta: f64, gamma_c: f64, gamma_d: f64) -> Result<Self> {
        let p = SystemParams {
            omega_c: None,
            omega_m,
            g0,
            eta,
            gamma_c,
            gamma_d,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.omega_m, self.g0, self.eta, self.gamma_c, self.gamma_d]
            .iter()
            .all(|v| v.is_finite())
            && self.omega_c.map_or(true, |v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidParams("non-finite parameter".into()));
        }
        if self.omega_m <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "omega_M must be > 0, got {}",
                self.omega_m
            )));
        }
        if self.g0 < 0.0 {
            return Err(Error::InvalidParams(format!("g0 must be >= 0, got {}", self.g0)));
        }
        if self.gamma_c <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "gamma_c must be > 0, got {}",
                self.gamma_c
            )));
        }
        if self.gamma_d < 0.0 {
            return Err(Error::InvalidParams(format!(
                "gamma_d must be >= 0, got {}",
                self.gamma_d
            )));
        }
        if !self.sideband_resolved() {
            log::warn!(
                "(gamma_c+gamma_d)/omega_M = {:.3} >= 1: outside the resolved-sideband regime, spectra will not show separated peaks",
                (self.gamma_c + self.gamma_d) / self.omega_m
            );
        }
        Ok(())
    }

    /// Sanity flag: total linewidth below the mechanical frequency.
    /// Violation degrades the spectra but is not an error.
    pub fn sideband_resolved(&self) -> bool {
        (self.gamma_c + self.gamma_d) / self.omega_m < 1.0
    }

    pub fn derived(&self) -> DerivedParams {
        DerivedParams {
            beta0: self.eta / self.omega_m,
            beta1: (self.g0 + self.eta) / self.omega_m,
            beta: self.g0 / self.omega_m,
            lambda: (self.g0 * self.g0 + 2.0 * self.g0 * self.eta) / self.omega_m,
            zeta: self.eta * self.eta / self.omega_m,
            gamma: self.gamma_c + self.gamma_d,
        }
    }

    /// Eigen-energy of the photon-number/phonon-number eigenstate `(m, j)`:
    /// `m*omega_c + j*omega_M - (g0*m + eta)^2 / omega_M`.
    ///
    /// When `omega_c` is not set the `m*omega_c` offset is omitted, i.e. the
    /// energy is reported in the frame rotating at the cavity frequency.
    pub fn eigen_energy(&self, m: u32, j: u32) -> f64 {
        let omega_c = self.omega_c.unwrap_or(0.0);
        let shift = self.g0 * f64::from(m) + self.eta;
        f64::from(m) * omega_c + f64::from(j) * self.omega_m - shift * shift / self.omega_m
    }

    /// Detuning of the emission line for the phonon transition `n -> m`:
    /// `(n - m)*omega_M - (g0^2 + 2 g0 eta)/omega_M`.
    ///
    /// `n = m` gives the zero-phonon line.
    pub fn resonance_detuning(&self, n: u32, m: u32) -> f64 {
        (f64::from(n) - f64::from(m)) * self.omega_m - self.derived().lambda
    }

    /// Map a drive-modulated system (coupling and force both oscillating at
    /// `omega_f`) onto an equivalent static one: `omega_M - omega_f`,
    /// `g0 / 2`, `eta / 2`, decay rates unchanged.
    ///
    /// Only valid for `omega_f < omega_M`. A rotating-wave factor below 10
    /// (see [`SystemParams::rwa_margin`]) logs a warning.
    pub fn periodic_map(&self, omega_f: f64) -> Result<SystemParams> {
        if !(omega_f > 0.0) {
            return Err(Error::InvalidParams(format!(
                "omega_f must be > 0, got {omega_f}"
            )));
        }
        if omega_f >= self.omega_m {
            return Err(Error::InvalidParams(format!(
                "periodic mapping requires omega_f < omega_M, got omega_f = {omega_f}, omega_M = {}",
                self.omega_m
            )));
        }
        let margin = self.rwa_margin(omega_f);
        if margin < 10.0 {
            log::warn!(
                "rotating-wave margin (omega_M+omega_f)/((g0+eta)/2) = {margin:.2} < 10; mapped model may be inaccurate"
            );
        }
        Ok(SystemParams {
            omega_c: self.omega_c,
            omega_m: self.omega_m - omega_f,
            g0: self.g0 / 2.0,
            eta: self.eta / 2.0,
            gamma_c: self.gamma_c,
            gamma_d: self.gamma_d,
        })
    }

    /// Ratio `(omega_M + omega_f) / ((g0*1 + eta)/2)` quantifying how well
    /// the counter-rotating terms separate from the retained ones at the
    /// single-photon level.
    pub fn rwa_margin(&self, omega_f: f64) -> f64 {
        let dropped = (self.g0 + self.eta).abs() / 2.0;
        if dropped == 0.0 {
            f64::INFINITY
        } else {
            (self.omega_m + omega_f) / dropped
        }
    }
}

impl PhysicalParams {
    pub fn new(omega_m_si: f64, x0: f64) -> Result<Self> {
        let p = PhysicalParams {
            omega_m_si,
            x0,
            hbar: HBAR,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_m_si > 0.0 && self.x0 > 0.0 && self.hbar > 0.0)
            || !self.omega_m_si.is_finite()
            || !self.x0.is_finite()
        {
            return Err(Error::InvalidParams(
                "physical parameters must all be strictly positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Convert a force coupling in mechanical-frequency units into newtons:
    /// `f = hbar * eta * omega_M_si / x0`.
    pub fn force_newtons(&self, eta_units: f64) -> f64 {
        self.hbar * eta_units * self.omega_m_si / self.x0
    }
}

/// Smallest force resolvable by the peak-shift criterion,
/// `hbar * gamma * omega_M / (2 g0 x0)` in newtons.
///
/// `p.gamma_c`, `p.gamma_d`, and `p.g0` are read in units of `p.omega_m`;
/// `phys.omega_m_si` supplies the absolute scale.
pub fn min_measurable_force(phys: &PhysicalParams, p: &SystemParams) -> f64 {
    let gamma_units = (p.gamma_c + p.gamma_d) / p.omega_m;
    let g0_units = p.g0 / p.omega_m;
    phys.hbar * gamma_units * phys.omega_m_si / (2.0 * g0_units * phys.x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn fig_params(eta: f64) -> SystemParams {
        SystemParams::new(1.0, 0.8, eta, 0.01, 0.01).unwrap()
    }

    #[test]
    fn derived_values_match_definitions() {
        let d = fig_params(0.02).derived();
        assert_abs_diff_eq!(d.beta, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(d.lambda, 0.672, epsilon = 1e-15);
        assert_abs_diff_eq!(d.zeta, 0.0004, epsilon = 1e-18);
        assert_abs_diff_eq!(d.beta0, 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(d.beta1, 0.82, epsilon = 1e-15);
        assert_abs_diff_eq!(d.gamma, 0.02, epsilon = 1e-15);
    }

    #[test]
    fn derived_values_uncoupled_unforced() {
        let d = SystemParams::new(1.0, 0.0, 0.0, 0.01, 0.0).unwrap().derived();
        assert_eq!(d.beta0, 0.0);
        assert_eq!(d.beta1, 0.0);
        assert_eq!(d.beta, 0.0);
        assert_eq!(d.lambda, 0.0);
        assert_eq!(d.zeta, 0.0);
        assert_eq!(d.gamma, 0.01);
    }

    #[test]
    fn derived_values_unforced_coupling() {
        let d = fig_params(0.0).derived();
        assert_abs_diff_eq!(d.lambda, 0.64, epsilon = 1e-15);
        assert_eq!(d.zeta, 0.0);
    }

    #[test]
    fn eigen_energy_vacuum_is_zero_without_force() {
        let p = fig_params(0.0);
        assert_eq!(p.eigen_energy(0, 0), 0.0);
    }

    #[test]
    fn eigen_energy_single_photon_with_cavity_frequency() {
        let mut p = fig_params(0.0);
        p.omega_c = Some(1000.0);
        assert_abs_diff_eq!(p.eigen_energy(1, 0), 1000.0 - 0.64, epsilon = 1e-12);
    }

    #[test]
    fn eigen_energy_forced_vacuum_shift() {
        let p = fig_params(0.02);
        assert_abs_diff_eq!(p.eigen_energy(0, 0), -0.0004, epsilon = 1e-18);
    }

    #[test]
    fn eigen_energy_monotone_in_phonon_number() {
        let p = fig_params(0.02);
        for m in 0..3 {
            for j in 0..10 {
                assert!(p.eigen_energy(m, j + 1) > p.eigen_energy(m, j));
            }
        }
    }

    #[test]
    fn resonance_detuning_zero_phonon_line() {
        let p = fig_params(0.02);
        assert_abs_diff_eq!(p.resonance_detuning(3, 3), -0.672, epsilon = 1e-15);
    }

    #[test]
    fn resonance_detuning_bare_sideband() {
        let p = SystemParams::new(1.0, 0.0, 0.0, 0.01, 0.01).unwrap();
        assert_abs_diff_eq!(p.resonance_detuning(1, 0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn zpl_shift_with_force_step() {
        let before = fig_params(0.0).resonance_detuning(0, 0);
        let after = fig_params(0.04).resonance_detuning(0, 0);
        assert_abs_diff_eq!(after - before, -0.064, epsilon = 1e-15);
    }

    #[test]
    fn min_force_reference_value() {
        let phys = PhysicalParams::new(2.0 * std::f64::consts::PI * 1e8, 0.4e-14).unwrap();
        let p = SystemParams::new(1.0, 1.0, 0.0, 0.005, 0.005).unwrap();
        let f = min_measurable_force(&phys, &p);
        assert_relative_eq!(f, 8.25e-14, max_relative = 0.01);
    }

    #[test]
    fn min_force_halves_when_coupling_doubles() {
        let phys = PhysicalParams::new(2.0 * std::f64::consts::PI * 1e8, 0.4e-14).unwrap();
        let p1 = SystemParams::new(1.0, 1.0, 0.0, 0.005, 0.005).unwrap();
        let p2 = SystemParams::new(1.0, 2.0, 0.0, 0.005, 0.005).unwrap();
        assert_relative_eq!(
            min_measurable_force(&phys, &p2),
            min_measurable_force(&phys, &p1) / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn min_force_vanishes_with_linewidth() {
        let phys = PhysicalParams::new(2.0 * std::f64::consts::PI * 1e8, 0.4e-14).unwrap();
        let mut f_prev = f64::INFINITY;
        for gamma_c in [1e-2, 1e-4, 1e-8, 1e-12] {
            let p = SystemParams::new(1.0, 1.0, 0.0, gamma_c, 0.0).unwrap();
            let f = min_measurable_force(&phys, &p);
            assert!(f < f_prev);
            f_prev = f;
        }
        assert!(f_prev < 1e-22);
    }

    #[test]
    fn periodic_map_divides_couplings() {
        let p = SystemParams::new(1.0, 0.8, 0.04, 0.01, 0.01).unwrap();
        let mapped = p.periodic_map(0.5).unwrap();
        assert_eq!(mapped.omega_m, 0.5);
        assert_eq!(mapped.g0, 0.4);
        assert_eq!(mapped.eta, 0.02);
        assert_eq!(mapped.gamma_c, 0.01);
        assert_eq!(mapped.gamma_d, 0.01);
    }

    #[test]
    fn periodic_map_small_drive_limit() {
        let p = SystemParams::new(1.0, 0.8, 0.04, 0.01, 0.01).unwrap();
        let mapped = p.periodic_map(1e-12).unwrap();
        assert_abs_diff_eq!(mapped.omega_m, 1.0, epsilon = 1e-9);
        assert_eq!(mapped.g0, 0.4);
        assert_eq!(mapped.eta, 0.02);
    }

    #[test]
    fn periodic_map_rejects_drive_at_mechanical_frequency() {
        let p = SystemParams::new(1.0, 0.8, 0.04, 0.01, 0.01).unwrap();
        assert!(p.periodic_map(1.0).is_err());
        assert!(p.periodic_map(1.5).is_err());
        assert!(p.periodic_map(0.0).is_err());
    }

    #[test]
    fn periodic_map_keeps_lambda_consistent() {
        let p = SystemParams::new(1.0, 0.8, 0.04, 0.01, 0.01).unwrap();
        let mapped = p.periodic_map(0.5).unwrap();
        let d = mapped.derived();
        assert_eq!(
            d.lambda,
            (mapped.g0 * mapped.g0 + 2.0 * mapped.g0 * mapped.eta) / mapped.omega_m
        );
    }

    #[test]
    fn validation_rejects_bad_fields() {
        assert!(SystemParams::new(0.0, 0.8, 0.0, 0.01, 0.01).is_err());
        assert!(SystemParams::new(1.0, -0.1, 0.0, 0.01, 0.01).is_err());
        assert!(SystemParams::new(1.0, 0.8, 0.0, 0.0, 0.01).is_err());
        assert!(SystemParams::new(1.0, 0.8, 0.0, 0.01, -0.01).is_err());
        assert!(SystemParams::new(1.0, 0.8, f64::NAN, 0.01, 0.01).is_err());
        assert!(PhysicalParams::new(0.0, 1e-15).is_err());
        assert!(PhysicalParams::new(1e8, -1e-15).is_err());
    }

    #[test]
    fn sideband_resolution_flag() {
        assert!(fig_params(0.0).sideband_resolved());
        let coarse = SystemParams::new(1.0, 0.8, 0.0, 0.6, 0.5).unwrap();
        assert!(!coarse.sideband_resolved());
    }

    proptest! {
        #[test]
        fn beta_is_difference_of_conditioned_displacements(
            g0 in 0.0..3.0f64, eta in -1.0..1.0f64, om in 0.1..4.0f64
        ) {
            let p = SystemParams::new(om, g0, eta, 0.01, 0.0).unwrap();
            let d = p.derived();
            prop_assert!((d.beta - (d.beta1 - d.beta0)).abs() < 1e-14);
            prop_assert!((d.lambda - ((g0 + eta).powi(2) / om - d.zeta)).abs() < 1e-12);
        }

        #[test]
        fn resonance_detuning_differences_are_integer_sidebands(
            g0 in 0.0..3.0f64, eta in -1.0..1.0f64,
            n in 0u32..20, m in 0u32..20, np in 0u32..20, mp in 0u32..20
        ) {
            let p = SystemParams::new(1.0, g0, eta, 0.01, 0.0).unwrap();
            let diff = p.resonance_detuning(n, m) - p.resonance_detuning(np, mp);
            let expected = (f64::from(n) - f64::from(m)) - (f64::from(np) - f64::from(mp));
            prop_assert!((diff - expected).abs() < 1e-12);
        }

        #[test]
        fn min_force_scales_linearly(
            scale in 0.1..10.0f64, gamma_c in 1e-4..0.1f64, g0 in 0.1..3.0f64
        ) {
            let phys = PhysicalParams::new(1e8, 1e-15).unwrap();
            let p1 = SystemParams::new(1.0, g0, 0.0, gamma_c, 0.0).unwrap();
            let p2 = SystemParams::new(1.0, g0, 0.0, gamma_c * scale, 0.0).unwrap();
            let r = min_measurable_force(&phys, &p2) / min_measurable_force(&phys, &p1);
            prop_assert!((r - scale).abs() < 1e-9 * scale);

            let p3 = SystemParams::new(1.0, g0 * scale, 0.0, gamma_c, 0.0).unwrap();
            let r = min_measurable_force(&phys, &p1) / min_measurable_force(&phys, &p3);
            prop_assert!((r - scale).abs() < 1e-9 * scale);
        }
    }
}
