//! Long-time single-photon emission amplitudes and spectra.
//!
//! The emitted photon's amplitude into the detected bath mode at detuning
//! `delta_k`, with the mirror ending on level `m`, is a sum over the
//! displaced levels `n` the initial state populates:
//!
//! ```text
//! B(m0, m, delta_k) = sqrt(gamma_c / 2 pi)
//!     * sum_n <m|D(beta)|n> <n|D(-beta1)|m0>
//!           / (delta_k + lambda - (n - m) omega_M + i gamma / 2)
//! ```
//!
//! The overall time-dependent phase has unit modulus for fixed `(m, k)`
//! and cancels in the spectrum, so it is omitted throughout.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::franck_condon::{adaptive_truncation, FranckCondonTable};
use crate::grid::{SpectralGrid, Spectrum, SpectrumKind, SpectrumMeta};
use crate::params::{DerivedParams, SystemParams};
use crate::states::{FockExpansion, MechanicalState};
use crate::TRUNCATION_CAP;

/// Extra displaced levels kept beyond the adaptive truncation.
pub(crate) const GUARD_LEVELS: usize = 10;
/// Cumulative weight kept when cutting level sums.
pub(crate) const WEIGHT_TOL: f64 = 1e-8;

/// Initial-state data entering a spectrum: amplitudes on the relevant
/// displaced basis for pure states, number-state weights for mixed ones.
#[derive(Debug, Clone)]
pub(crate) enum Source {
    Pure(Vec<f64>),
    Mixed(Vec<f64>),
}

/// Single emission amplitude for the mirror transition `m0 -> m`.
///
/// `fc_beta` must hold `<m|D(beta)|n>` and `fc_init` must hold
/// `<n|D(-beta1)|m0>`, i.e. tables for displacements `beta` and `-beta1`.
pub fn emission_amplitude(
    p: &SystemParams,
    dp: &DerivedParams,
    fc_beta: &FranckCondonTable,
    fc_init: &FranckCondonTable,
    m0: usize,
    m: usize,
    delta_k: f64,
) -> Result<Complex64> {
    if m >= fc_beta.size() || m0 >= fc_init.size() {
        return Err(Error::DimensionMismatch(format!(
            "tables of size {}x{} do not cover m={m}, m0={m0}",
            fc_beta.size(),
            fc_init.size()
        )));
    }
    let n_sum = fc_beta.size().min(fc_init.size());
    let half_gamma = 0.5 * dp.gamma;
    let mut acc = Complex64::new(0.0, 0.0);
    for n in 0..n_sum {
        let weight = fc_beta.get(m, n) * fc_init.get(n, m0);
        if weight == 0.0 {
            continue;
        }
        let denom = Complex64::new(
            delta_k + dp.lambda - (n as f64 - m as f64) * p.omega_m,
            half_gamma,
        );
        acc += weight / denom;
    }
    Ok((p.gamma_c / (2.0 * std::f64::consts::PI)).sqrt() * acc)
}

/// Reusable emission forward model: truncations and overlap tables for one
/// `(system, state)` pair.
#[derive(Debug, Clone)]
pub struct EmissionModel {
    pub(crate) system: SystemParams,
    pub(crate) dp: DerivedParams,
    pub(crate) fc_beta: FranckCondonTable,
    pub(crate) fc_init: FranckCondonTable,
    /// Displaced levels summed inside the amplitude.
    pub(crate) n_levels: usize,
    /// Final mirror levels summed in the spectrum.
    pub(crate) m_levels: usize,
    pub(crate) source: Source,
    state: MechanicalState,
}

impl EmissionModel {
    pub fn new(p: &SystemParams, state: &MechanicalState) -> Result<Self> {
        p.validate()?;
        let dp = p.derived();
        let n_adapt = adaptive_truncation(-dp.beta1, state, WEIGHT_TOL)?;
        let n_levels = (n_adapt + GUARD_LEVELS).min(TRUNCATION_CAP);

        let mut size = (n_levels + state.truncation() + GUARD_LEVELS).min(TRUNCATION_CAP);
        loop {
            let fc_init = FranckCondonTable::new(-dp.beta1, size);
            let fc_beta = FranckCondonTable::new(dp.beta, size);

            // population of the displaced levels feeding the amplitude sum
            let (source, q) = source_populations(state, &fc_init, n_levels)?;
            let total_q: f64 = q.iter().sum();

            // cut the final-level sum where cumulative weight saturates
            let target = total_q * (1.0 - WEIGHT_TOL);
            let mut cum = 0.0;
            let mut m_levels = None;
            for m in 0..size {
                let w: f64 = (0..n_levels.min(size))
                    .map(|n| {
                        let f = fc_beta.get(m, n);
                        f * f * q[n]
                    })
                    .sum();
                cum += w;
                if cum >= target {
                    m_levels = Some(m + 1);
                    break;
                }
            }
            if let Some(m_levels) = m_levels {
                return Ok(EmissionModel {
                    system: *p,
                    dp,
                    fc_beta,
                    fc_init,
                    n_levels: n_levels.min(size),
                    m_levels,
                    source,
                    state: state.clone(),
                });
            }
            if size == TRUNCATION_CAP {
                return Err(Error::TruncationCap {
                    required: size + 1,
                    cap: TRUNCATION_CAP,
                });
            }
            size = (size * 3 / 2 + 8).min(TRUNCATION_CAP);
        }
    }

    pub fn state(&self) -> &MechanicalState {
        &self.state
    }

    /// Spectral density at a single detuning.
    pub fn value_at(&self, delta_k: f64) -> f64 {
        let inv = self.inverse_denominators(delta_k);
        let norm = self.system.gamma_c / (2.0 * std::f64::consts::PI);
        match &self.source {
            Source::Pure(c) => norm * self.pure_point(c, &inv),
            Source::Mixed(weights) => {
                let mut total = 0.0;
                for (m0, w) in weights.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    let col: Vec<f64> = (0..self.n_levels)
                        .map(|n| self.fc_init.get(n, m0))
                        .collect();
                    total += w * self.pure_point(&col, &inv);
                }
                norm * total
            }
        }
    }

    /// `1 / (delta_k + lambda - s omega_M + i gamma/2)` for each sideband
    /// index `s = n - m`, offset by `m_levels - 1`.
    fn inverse_denominators(&self, delta_k: f64) -> Vec<Complex64> {
        let half_gamma = 0.5 * self.dp.gamma;
        (0..self.m_levels + self.n_levels - 1)
            .map(|i| {
                let s = i as f64 - (self.m_levels as f64 - 1.0);
                Complex64::new(1.0, 0.0)
                    / Complex64::new(
                        delta_k + self.dp.lambda - s * self.system.omega_m,
                        half_gamma,
                    )
            })
            .collect()
    }

    fn pure_point(&self, c: &[f64], inv: &[Complex64]) -> f64 {
        let n_sum = self.n_levels.min(c.len());
        let mut total = 0.0;
        for m in 0..self.m_levels {
            let row = self.fc_beta.row(m);
            let mut amp = Complex64::new(0.0, 0.0);
            let base = self.m_levels - 1 - m;
            for n in 0..n_sum {
                let w = row[n] * c[n];
                if w != 0.0 {
                    amp += w * inv[base + n];
                }
            }
            total += amp.norm_sqr();
        }
        total
    }

    pub fn spectrum(&self, grid: &SpectralGrid) -> Result<Spectrum> {
        if grid.is_coarse_for(self.dp.gamma) {
            log::warn!(
                "grid step {} is coarser than gamma/10 = {}; peaks will be undersampled",
                grid.step,
                self.dp.gamma / 10.0
            );
        }
        let points = grid.points();
        let values: Vec<f64> = points.par_iter().map(|d| self.value_at(*d)).collect();
        Spectrum::new(
            *grid,
            values,
            SpectrumMeta {
                kind: SpectrumKind::Emission,
                system: Some(self.system),
                state: Some(self.state.descriptor()),
                wavepacket: None,
            },
        )
    }
}

/// Populations `q[n]` of the displaced levels, together with the source
/// data reused at every grid point.
fn source_populations(
    state: &MechanicalState,
    fc_init: &FranckCondonTable,
    n_levels: usize,
) -> Result<(Source, Vec<f64>)> {
    let n_levels = n_levels.min(fc_init.size());
    match state.fock_expansion() {
        FockExpansion::Pure(_) => {
            let c = state.displaced_projection(fc_init.displacement(), fc_init)?;
            let q = c[..n_levels].iter().map(|v| v * v).collect();
            Ok((Source::Pure(c), q))
        }
        FockExpansion::Mixed(weights) => {
            let mut q = vec![0.0; n_levels];
            for (m0, w) in weights.iter().enumerate() {
                for (n, qn) in q.iter_mut().enumerate() {
                    let f = fc_init.get(n, m0);
                    *qn += w * f * f;
                }
            }
            Ok((Source::Mixed(weights.to_vec()), q))
        }
    }
}

/// Emission spectrum of `state` on `grid`.
pub fn emission_spectrum(
    p: &SystemParams,
    state: &MechanicalState,
    grid: &SpectralGrid,
) -> Result<Spectrum> {
    EmissionModel::new(p, state)?.spectrum(grid)
}

/// Trapezoidal integral of a sampled spectrum, with a coverage warning when
/// the window visibly clips populated structure.
pub fn integrate_spectrum(sp: &Spectrum) -> f64 {
    if !sp.covers_support() {
        log::warn!(
            "spectrum is not negligible at the grid edges; the integral will undercount tails"
        );
    }
    sp.integral()
}
