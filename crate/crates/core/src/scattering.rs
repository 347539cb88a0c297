//! Long-time scattering of a Lorentzian single-photon wavepacket and the
//! detected/undetected scattering spectra.
//!
//! For the mirror starting on the displaced level `l`, the detected
//! amplitude carries a direct-reflection term plus the cavity-mediated
//! term:
//!
//! ```text
//! B^l(m, delta_k) = sqrt(eps/pi) [ delta_{m,l} / (delta_k - delta_0 + i eps)
//!   - sum_n <m|D(beta)|n><n|D(-beta)|l> i gamma_c
//!       / ((delta_k + lambda - (n-m) omega_M + i gamma/2)
//!          (delta_k - delta_0 - (l-m) omega_M + i eps)) ]
//! ```
//!
//! The undetected amplitude has the same second-term structure with
//! `i sqrt(gamma_c gamma_d)` and no direct term. Unit-modulus phases are
//! omitted as in the emission module.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emission::{Source, GUARD_LEVELS, WEIGHT_TOL};
use crate::error::{Error, Result};
use crate::franck_condon::{adaptive_truncation, FranckCondonTable};
use crate::grid::{SpectralGrid, Spectrum, SpectrumKind, SpectrumMeta};
use crate::params::{DerivedParams, SystemParams};
use crate::states::{FockExpansion, MechanicalState};
use crate::TRUNCATION_CAP;

/// Lorentzian single-photon wavepacket: spectral density
/// `(eps/pi) / ((delta - delta_0)^2 + eps^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavePacket {
    pub delta0: f64,
    pub epsilon: f64,
}

impl WavePacket {
    pub fn new(delta0: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() || !delta0.is_finite() {
            return Err(Error::InvalidParams(format!(
                "wavepacket requires finite delta0 and epsilon > 0, got ({delta0}, {epsilon})"
            )));
        }
        Ok(WavePacket { delta0, epsilon })
    }

    /// Center the packet on the cavity resonance `delta_0 = -lambda`, so the
    /// photon drives the zero-phonon transition.
    pub fn resonant(p: &SystemParams, epsilon: f64) -> Result<Self> {
        WavePacket::new(-p.derived().lambda, epsilon)
    }

    /// Default grid: hull of `[delta_0 - 4 eps, delta_0 + 4 eps]` and
    /// `[-3 omega_M, omega_M]`, with step `min(gamma, 2 eps)/20`.
    pub fn default_grid(&self, p: &SystemParams) -> Result<SpectralGrid> {
        let gamma = p.gamma_c + p.gamma_d;
        let lo = (self.delta0 - 4.0 * self.epsilon).min(-3.0 * p.omega_m);
        let hi = (self.delta0 + 4.0 * self.epsilon).max(p.omega_m);
        SpectralGrid::new(lo, hi, gamma.min(2.0 * self.epsilon) / 20.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Detected,
    Undetected,
}

/// Detected-channel amplitude `B^l(m, delta_k)`.
///
/// `fc_beta` is the table for displacement `beta`; the factor
/// `<n|D(-beta)|l>` is its transposed entry `fc_beta[l][n]`.
pub fn scattering_amplitude_detected(
    p: &SystemParams,
    dp: &DerivedParams,
    fc_beta: &FranckCondonTable,
    l: usize,
    m: usize,
    delta_k: f64,
    wp: &WavePacket,
) -> Result<Complex64> {
    let second = second_term(p, dp, fc_beta, l, m, delta_k, wp)?;
    let mut amp = -Complex64::new(0.0, p.gamma_c) * second;
    if m == l {
        amp += Complex64::new(1.0, 0.0)
            / Complex64::new(delta_k - wp.delta0, wp.epsilon);
    }
    Ok((wp.epsilon / std::f64::consts::PI).sqrt() * amp)
}

/// Undetected-channel amplitude `C^l(m, delta_q)`; identically zero when
/// `gamma_d = 0`.
pub fn scattering_amplitude_undetected(
    p: &SystemParams,
    dp: &DerivedParams,
    fc_beta: &FranckCondonTable,
    l: usize,
    m: usize,
    delta_q: f64,
    wp: &WavePacket,
) -> Result<Complex64> {
    let second = second_term(p, dp, fc_beta, l, m, delta_q, wp)?;
    let amp = -Complex64::new(0.0, (p.gamma_c * p.gamma_d).sqrt()) * second;
    Ok((wp.epsilon / std::f64::consts::PI).sqrt() * amp)
}

/// `sum_n <m|D(beta)|n><n|D(-beta)|l> / (pole_n * packet_l)`, the shared
/// cavity-mediated factor without its channel prefactor.
fn second_term(
    p: &SystemParams,
    dp: &DerivedParams,
    fc_beta: &FranckCondonTable,
    l: usize,
    m: usize,
    delta: f64,
    wp: &WavePacket,
) -> Result<Complex64> {
    if m >= fc_beta.size() || l >= fc_beta.size() {
        return Err(Error::DimensionMismatch(format!(
            "table of size {} does not cover l={l}, m={m}",
            fc_beta.size()
        )));
    }
    let packet = Complex64::new(
        delta - wp.delta0 - (l as f64 - m as f64) * p.omega_m,
        wp.epsilon,
    );
    let half_gamma = 0.5 * dp.gamma;
    let mut acc = Complex64::new(0.0, 0.0);
    for n in 0..fc_beta.size() {
        let w = fc_beta.get(m, n) * fc_beta.get(l, n);
        if w == 0.0 {
            continue;
        }
        let pole = Complex64::new(
            delta + dp.lambda - (n as f64 - m as f64) * p.omega_m,
            half_gamma,
        );
        acc += w / pole;
    }
    Ok(acc / packet)
}

/// Reusable scattering forward model for one `(system, state, wavepacket)`.
#[derive(Debug, Clone)]
pub struct ScatteringModel {
    pub(crate) system: SystemParams,
    pub(crate) dp: DerivedParams,
    pub(crate) wp: WavePacket,
    pub(crate) fc_beta: FranckCondonTable,
    pub(crate) fc_init: FranckCondonTable,
    /// Initial displaced levels with support.
    pub(crate) l_levels: usize,
    /// Intermediate displaced levels in the amplitude sum.
    pub(crate) n_levels: usize,
    /// Final mirror levels in the spectrum sum.
    pub(crate) m_levels: usize,
    pub(crate) source: Source,
    state: MechanicalState,
}

impl ScatteringModel {
    pub fn new(p: &SystemParams, state: &MechanicalState, wp: &WavePacket) -> Result<Self> {
        p.validate()?;
        let dp = p.derived();
        let l_adapt = adaptive_truncation(-dp.beta0, state, WEIGHT_TOL)?;

        let mut size = (l_adapt + state.truncation() + 2 * GUARD_LEVELS).min(TRUNCATION_CAP);
        loop {
            let fc_init = FranckCondonTable::new(-dp.beta0, size);
            let fc_beta = FranckCondonTable::new(dp.beta, size);
            let l_levels = l_adapt.min(size);

            let (source, q) = initial_populations(state, &fc_init, l_levels)?;
            let total_q: f64 = q.iter().sum();

            // intermediate levels reached from the populated l's
            let mut v = vec![0.0; size];
            for (l, ql) in q.iter().enumerate() {
                if *ql == 0.0 {
                    continue;
                }
                for (n, vn) in v.iter_mut().enumerate() {
                    let f = fc_beta.get(l, n);
                    *vn += ql * f * f;
                }
            }
            let n_cut = cumulative_cut(&v, total_q * (1.0 - WEIGHT_TOL));
            let Some(n_cut) = n_cut else {
                if size == TRUNCATION_CAP {
                    return Err(Error::TruncationCap {
                        required: size + 1,
                        cap: TRUNCATION_CAP,
                    });
                }
                size = (size * 3 / 2 + 8).min(TRUNCATION_CAP);
                continue;
            };
            let n_levels = (n_cut + GUARD_LEVELS).min(size);

            // final levels fed by the intermediate populations
            let total_v: f64 = v[..n_levels].iter().sum();
            let mut w = vec![0.0; size];
            for (m, wm) in w.iter_mut().enumerate() {
                *wm = (0..n_levels)
                    .map(|n| {
                        let f = fc_beta.get(m, n);
                        f * f * v[n]
                    })
                    .sum();
            }
            let m_cut = cumulative_cut(&w, total_v * (1.0 - WEIGHT_TOL));
            let Some(m_cut) = m_cut else {
                if size == TRUNCATION_CAP {
                    return Err(Error::TruncationCap {
                        required: size + 1,
                        cap: TRUNCATION_CAP,
                    });
                }
                size = (size * 3 / 2 + 8).min(TRUNCATION_CAP);
                continue;
            };
            let m_levels = m_cut.max(l_levels);

            return Ok(ScatteringModel {
                system: *p,
                dp,
                wp: *wp,
                fc_beta,
                fc_init,
                l_levels,
                n_levels,
                m_levels,
                source,
                state: state.clone(),
            });
        }
    }

    pub fn state(&self) -> &MechanicalState {
        &self.state
    }

    pub fn wavepacket(&self) -> &WavePacket {
        &self.wp
    }

    /// Spectral density of one output channel at a single detuning.
    pub fn value_at(&self, delta: f64, channel: Channel) -> f64 {
        if channel == Channel::Undetected && self.system.gamma_d == 0.0 {
            return 0.0;
        }
        let (m_levels, n_levels, l_levels) = (self.m_levels, self.n_levels, self.l_levels);
        let half_gamma = 0.5 * self.dp.gamma;
        let omega = self.system.omega_m;

        // pole and packet denominators indexed by level differences
        let inv_pole: Vec<Complex64> = (0..m_levels + n_levels - 1)
            .map(|i| {
                let s = i as f64 - (m_levels as f64 - 1.0);
                Complex64::new(1.0, 0.0)
                    / Complex64::new(delta + self.dp.lambda - s * omega, half_gamma)
            })
            .collect();
        let inv_packet: Vec<Complex64> = (0..m_levels + l_levels - 1)
            .map(|i| {
                let t = i as f64 - (m_levels as f64 - 1.0);
                Complex64::new(1.0, 0.0)
                    / Complex64::new(delta - self.wp.delta0 - t * omega, self.wp.epsilon)
            })
            .collect();
        let inv_refl = Complex64::new(1.0, 0.0)
            / Complex64::new(delta - self.wp.delta0, self.wp.epsilon);

        // g[m][l] = sum_n <m|D(b)|n><n|D(-b)|l> / pole(n - m)
        let mut g = vec![Complex64::new(0.0, 0.0); m_levels * l_levels];
        for m in 0..m_levels {
            let row_m = self.fc_beta.row(m);
            let base = m_levels - 1 - m;
            for l in 0..l_levels {
                let row_l = self.fc_beta.row(l);
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..n_levels {
                    let w = row_m[n] * row_l[n];
                    if w != 0.0 {
                        acc += w * inv_pole[base + n];
                    }
                }
                g[m * l_levels + l] = acc;
            }
        }

        let per_component = |coeffs: &dyn Fn(usize) -> f64| -> f64 {
            let mut total = 0.0;
            for m in 0..m_levels {
                let base = m_levels - 1 - m;
                let mut scattered = Complex64::new(0.0, 0.0);
                for l in 0..l_levels {
                    let c = coeffs(l);
                    if c != 0.0 {
                        scattered += c * inv_packet[base + l] * g[m * l_levels + l];
                    }
                }
                let amp = match channel {
                    Channel::Detected => {
                        let mut a = -Complex64::new(0.0, self.system.gamma_c) * scattered;
                        if m < l_levels {
                            let c = coeffs(m);
                            if c != 0.0 {
                                a += c * inv_refl;
                            }
                        }
                        a
                    }
                    Channel::Undetected => {
                        -Complex64::new(0.0, (self.system.gamma_c * self.system.gamma_d).sqrt())
                            * scattered
                    }
                };
                total += amp.norm_sqr();
            }
            total
        };

        let norm = self.wp.epsilon / std::f64::consts::PI;
        match &self.source {
            Source::Pure(c) => {
                let c = c.clone();
                norm * per_component(&move |l| c[l])
            }
            Source::Mixed(weights) => {
                let mut total = 0.0;
                for (m0, w) in weights.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    total += w * per_component(&|l| self.fc_init.get(l, m0));
                }
                norm * total
            }
        }
    }

    pub fn spectrum(&self, grid: &SpectralGrid, channel: Channel) -> Result<Spectrum> {
        let fine = self.dp.gamma.min(2.0 * self.wp.epsilon);
        if grid.is_coarse_for(fine) {
            log::warn!(
                "grid step {} is coarser than min(gamma, 2 eps)/10 = {}; features will be undersampled",
                grid.step,
                fine / 10.0
            );
        }
        let points = grid.points();
        let values: Vec<f64> = points
            .par_iter()
            .map(|d| self.value_at(*d, channel))
            .collect();
        Spectrum::new(
            *grid,
            values,
            SpectrumMeta {
                kind: match channel {
                    Channel::Detected => SpectrumKind::ScatteringDetected,
                    Channel::Undetected => SpectrumKind::ScatteringUndetected,
                },
                system: Some(self.system),
                state: Some(self.state.descriptor()),
                wavepacket: Some(self.wp),
            },
        )
    }

    /// Total weight of the stored initial decomposition (1 up to truncation).
    fn source_norm(&self) -> f64 {
        match &self.source {
            Source::Pure(c) => c.iter().map(|v| v * v).sum(),
            Source::Mixed(weights) => weights
                .iter()
                .enumerate()
                .map(|(m0, w)| {
                    w * (0..self.fc_init.size())
                        .map(|l| {
                            let f = self.fc_init.get(l, m0);
                            f * f
                        })
                        .sum::<f64>()
                })
                .sum(),
        }
    }
}

fn cumulative_cut(weights: &[f64], target: f64) -> Option<usize> {
    let mut cum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        cum += w;
        if cum >= target {
            return Some(i + 1);
        }
    }
    None
}

fn initial_populations(
    state: &MechanicalState,
    fc_init: &FranckCondonTable,
    l_levels: usize,
) -> Result<(Source, Vec<f64>)> {
    match state.fock_expansion() {
        FockExpansion::Pure(_) => {
            let c = state.displaced_projection(fc_init.displacement(), fc_init)?;
            let q = c[..l_levels].iter().map(|v| v * v).collect();
            Ok((Source::Pure(c), q))
        }
        FockExpansion::Mixed(weights) => {
            let mut q = vec![0.0; l_levels];
            for (m0, w) in weights.iter().enumerate() {
                for (l, ql) in q.iter_mut().enumerate() {
                    let f = fc_init.get(l, m0);
                    *ql += w * f * f;
                }
            }
            Ok((Source::Mixed(weights.to_vec()), q))
        }
    }
}

/// Detected-channel scattering spectrum.
pub fn scattering_spectrum(
    p: &SystemParams,
    state: &MechanicalState,
    wp: &WavePacket,
    grid: &SpectralGrid,
) -> Result<Spectrum> {
    ScatteringModel::new(p, state, wp)?.spectrum(grid, Channel::Detected)
}

/// Undetected-channel scattering spectrum.
pub fn scattering_spectrum_undetected(
    p: &SystemParams,
    state: &MechanicalState,
    wp: &WavePacket,
    grid: &SpectralGrid,
) -> Result<Spectrum> {
    ScatteringModel::new(p, state, wp)?.spectrum(grid, Channel::Undetected)
}

/// Both output channels on one grid.
pub fn scattering_spectra(
    p: &SystemParams,
    state: &MechanicalState,
    wp: &WavePacket,
    grid: &SpectralGrid,
) -> Result<(Spectrum, Spectrum)> {
    let model = ScatteringModel::new(p, state, wp)?;
    Ok((
        model.spectrum(grid, Channel::Detected)?,
        model.spectrum(grid, Channel::Undetected)?,
    ))
}

/// Integrated probabilities `(detected, undetected)`.
///
/// The core window is integrated on the default grid; dyadic extension
/// windows carry the quadrature out to where only the directly reflected
/// Lorentzian survives, whose remaining tail is added in closed form.
pub fn scattering_probabilities(
    p: &SystemParams,
    state: &MechanicalState,
    wp: &WavePacket,
) -> Result<(f64, f64)> {
    let model = ScatteringModel::new(p, state, wp)?;
    let core = wp.default_grid(p)?;
    let det_core = model.spectrum(&core, Channel::Detected)?;
    let und_core = model.spectrum(&core, Channel::Undetected)?;
    let mut det = det_core.integral();
    let mut und = und_core.integral();

    let gamma = p.gamma_c + p.gamma_d;
    let x_target = wp.delta0.abs() + 200.0 * wp.epsilon.max(gamma).max(p.omega_m);
    for dir in [-1.0, 1.0] {
        // continue exactly where the core samples stop
        let mut edge = if dir < 0.0 {
            core.point(0)
        } else {
            core.point(core.len() - 1)
        };
        while edge.abs() < x_target {
            let next = dir * edge.abs().max(p.omega_m) * 2.0;
            let n = 257usize;
            let (lo, hi) = if dir < 0.0 { (next, edge) } else { (edge, next) };
            let step = (hi - lo) / (n - 1) as f64;
            let pts: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
            let dv: Vec<f64> = pts
                .par_iter()
                .map(|d| model.value_at(*d, Channel::Detected))
                .collect();
            let uv: Vec<f64> = pts
                .par_iter()
                .map(|d| model.value_at(*d, Channel::Undetected))
                .collect();
            det += crate::grid::trapezoid(step, &dv);
            und += crate::grid::trapezoid(step, &uv);
            edge = next;
        }
        // closed-form tail of the reflected packet beyond the last window
        let weight = model.source_norm();
        let tail = if dir < 0.0 {
            0.5 + std::f64::consts::FRAC_1_PI * ((edge - wp.delta0) / wp.epsilon).atan()
        } else {
            0.5 - std::f64::consts::FRAC_1_PI * ((edge - wp.delta0) / wp.epsilon).atan()
        };
        det += weight * tail;
    }
    Ok((det, und))
}

/// `integral(detected) + integral(undetected)`; equals 1 for a unitary
/// scattering process.
pub fn total_scattering_probability(
    p: &SystemParams,
    state: &MechanicalState,
    wp: &WavePacket,
) -> Result<f64> {
    let (det, und) = scattering_probabilities(p, state, wp)?;
    Ok(det + und)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};

    fn bare(gamma_c: f64, gamma_d: f64) -> SystemParams {
        SystemParams::new(1.0, 0.0, 0.0, gamma_c, gamma_d).unwrap()
    }

    fn fig_params(eta: f64) -> SystemParams {
        SystemParams::new(1.0, 0.8, eta, 0.01, 0.01).unwrap()
    }

    /// Residue evaluation of the two closed-form integrals for g0 = 0:
    /// detected |1 - i gamma_c/(D + i gamma/2)|^2 and undetected
    /// gamma_c gamma_d / |D + i gamma/2|^2, each filtered by the input
    /// Lorentzian and integrated over the upper half plane.
    fn residue_split(p: &SystemParams, wp: &WavePacket) -> (f64, f64) {
        let a = (p.gamma_d - p.gamma_c) / 2.0;
        let b = (p.gamma_c + p.gamma_d) / 2.0;
        let eps = wp.epsilon;
        let i = Complex64::i();
        let z1 = i * b;
        let z2 = Complex64::new(wp.delta0, eps);
        // shared denominators of the residues at the two upper poles
        let d1 = (2.0 * z1) * ((z1 - wp.delta0) * (z1 - wp.delta0) + eps * eps);
        let d2 = (z2 * z2 + b * b) * (2.0 * i * eps);
        let det = {
            let val = 2.0 * i * eps * ((z1 * z1 + a * a) / d1 + (z2 * z2 + a * a) / d2);
            assert!(val.im.abs() < 1e-10);
            val.re
        };
        let und = {
            let val = 2.0 * i * eps * p.gamma_c * p.gamma_d * (1.0 / d1 + 1.0 / d2);
            assert!(val.im.abs() < 1e-10);
            val.re
        };
        (det, und)
    }

    #[test]
    fn resonant_absorption_kills_detected_amplitude() {
        let p = bare(0.01, 0.01);
        let dp = p.derived();
        let fc = FranckCondonTable::new(0.0, 2);
        let wp = WavePacket::new(0.0, 0.5).unwrap();
        let amp = scattering_amplitude_detected(&p, &dp, &fc, 0, 0, 0.0, &wp).unwrap();
        assert!(amp.norm() < 1e-14, "|B(0)| = {}", amp.norm());
    }

    #[test]
    fn bare_cavity_spectrum_is_filtered_lorentzian() {
        let p = bare(0.012, 0.008);
        let state = MechanicalState::number(0).unwrap();
        let wp = WavePacket::new(0.3, 0.7).unwrap();
        let grid = SpectralGrid::new(-3.0, 3.0, 0.002).unwrap();
        let sp = scattering_spectrum(&p, &state, &wp, &grid).unwrap();
        for (i, v) in sp.values.iter().enumerate() {
            let d = grid.point(i);
            let transmission = Complex64::new(1.0, 0.0)
                - Complex64::new(0.0, p.gamma_c) / Complex64::new(d, 0.01);
            let expected = wp.epsilon / std::f64::consts::PI
                / ((d - wp.delta0).powi(2) + wp.epsilon.powi(2))
                * transmission.norm_sqr();
            assert_relative_eq!(*v, expected, max_relative = 1e-10, epsilon = 1e-300);
        }
    }

    #[test]
    fn direct_term_only_on_diagonal() {
        let p = fig_params(0.02);
        let dp = p.derived();
        let fc = FranckCondonTable::new(dp.beta, 30);
        let wp = WavePacket::new(0.0, 2.0).unwrap();
        // off-diagonal amplitude equals the bare second term
        let amp = scattering_amplitude_detected(&p, &dp, &fc, 0, 1, 0.4, &wp).unwrap();
        let second = second_term(&p, &dp, &fc, 0, 1, 0.4, &wp).unwrap();
        let expected = (wp.epsilon / std::f64::consts::PI).sqrt()
            * (-Complex64::new(0.0, p.gamma_c))
            * second;
        assert_abs_diff_eq!(amp.re, expected.re, epsilon = 1e-15);
        assert_abs_diff_eq!(amp.im, expected.im, epsilon = 1e-15);
    }

    #[test]
    fn undetected_vanishes_without_loss_channel() {
        let p = SystemParams::new(1.0, 0.8, 0.02, 0.02, 0.0).unwrap();
        let dp = p.derived();
        let fc = FranckCondonTable::new(dp.beta, 30);
        let wp = WavePacket::new(0.0, 2.0).unwrap();
        let amp = scattering_amplitude_undetected(&p, &dp, &fc, 0, 1, 0.4, &wp).unwrap();
        assert_eq!(amp, Complex64::new(0.0, 0.0));
        let state = MechanicalState::number(0).unwrap();
        let grid = SpectralGrid::new(-1.0, 1.0, 0.01).unwrap();
        let sp = scattering_spectrum_undetected(&p, &state, &wp, &grid).unwrap();
        assert!(sp.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_amplitudes_share_pole_structure() {
        let p = fig_params(0.02);
        let dp = p.derived();
        let fc = FranckCondonTable::new(dp.beta, 30);
        let wp = WavePacket::new(0.0, 2.0).unwrap();
        // for m != l both channels are pure second-term: fixed ratio
        let b = scattering_amplitude_detected(&p, &dp, &fc, 0, 2, -0.9, &wp).unwrap();
        let c = scattering_amplitude_undetected(&p, &dp, &fc, 0, 2, -0.9, &wp).unwrap();
        let ratio = (p.gamma_d / p.gamma_c).sqrt();
        assert_abs_diff_eq!(c.re, ratio * b.re, epsilon = 1e-14);
        assert_abs_diff_eq!(c.im, ratio * b.im, epsilon = 1e-14);
    }

    #[test]
    fn closed_form_split_reproduced_for_bare_cavity() {
        let p = bare(0.012, 0.008);
        let wp = WavePacket::new(0.3, 0.7).unwrap();
        let state = MechanicalState::number(0).unwrap();
        let (det, und) = scattering_probabilities(&p, &state, &wp).unwrap();
        let (det_exact, und_exact) = residue_split(&p, &wp);
        assert_abs_diff_eq!(det_exact + und_exact, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(det, det_exact, epsilon = 1e-6);
        assert_abs_diff_eq!(und, und_exact, epsilon = 1e-6);
    }

    #[test]
    fn narrow_resonant_packet_is_mostly_absorbed() {
        let p = bare(0.01, 0.01);
        let wp = WavePacket::new(0.0, 2e-4).unwrap();
        let state = MechanicalState::number(0).unwrap();
        let (det, und) = scattering_probabilities(&p, &state, &wp).unwrap();
        let (det_exact, und_exact) = residue_split(&p, &wp);
        assert!(und > 0.97, "undetected fraction {und}");
        assert_abs_diff_eq!(und, und_exact, epsilon = 1e-6);
        assert_abs_diff_eq!(det, det_exact, epsilon = 1e-6);
        assert_abs_diff_eq!(det + und, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn unitarity_over_randomized_parameters() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0x5eed);
        for trial in 0..5 {
            let g0 = rng.random_range(0.3..1.2);
            let eta = rng.random_range(-0.05..0.05);
            let gamma_c = rng.random_range(0.005..0.02);
            let gamma_d = rng.random_range(0.005..0.02);
            let eps = rng.random_range(0.05..2.0);
            let delta0 = rng.random_range(-1.0..1.0);
            let p = SystemParams::new(1.0, g0, eta, gamma_c, gamma_d).unwrap();
            let wp = WavePacket::new(delta0, eps).unwrap();
            let state = MechanicalState::number(0).unwrap();
            let total = total_scattering_probability(&p, &state, &wp).unwrap();
            assert!(
                (total - 1.0).abs() < 1e-3,
                "trial {trial}: total probability {total}"
            );
        }
    }

    #[test]
    fn narrow_resonant_main_peak_tracks_the_force() {
        let state = MechanicalState::number(0).unwrap();
        let mut positions = Vec::new();
        for eta in [0.0, 0.04] {
            let p = fig_params(eta);
            let wp = WavePacket::resonant(&p, 0.01).unwrap();
            let grid = SpectralGrid::new(-1.2, -0.2, 0.0005).unwrap();
            let sp = scattering_spectrum(&p, &state, &wp, &grid).unwrap();
            let (imax, _) = sp
                .values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            positions.push(grid.point(imax));
        }
        // main peak sits at -lambda(eta); the shift is 2 g0 eta / omega_M
        assert_abs_diff_eq!(positions[1] - positions[0], -0.064, epsilon = 2.0 * 0.0005);
    }

    #[test]
    fn resonant_helper_centers_on_zero_phonon_line() {
        let p = fig_params(0.02);
        let wp = WavePacket::resonant(&p, 0.01).unwrap();
        assert_abs_diff_eq!(wp.delta0, -0.672, epsilon = 1e-14);
    }

    #[test]
    fn wavepacket_validation() {
        assert!(WavePacket::new(0.0, 0.0).is_err());
        assert!(WavePacket::new(0.0, -0.5).is_err());
        assert!(WavePacket::new(f64::NAN, 0.5).is_err());
    }
}
