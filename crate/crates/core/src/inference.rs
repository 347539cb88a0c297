//! Spectrum-to-force inversion.
//!
//! Every emission line sits at `(n - m) omega_M - (g0^2 + 2 g0 eta)/omega_M`,
//! so a measured line position determines `eta` only up to an integer number
//! of sidebands. The estimators here read the zero-phonon line, enumerate
//! the sideband branches admitted by a prior interval, resolve the branch
//! by forward-model comparison, and alternatively fit `eta` to the spectral
//! height at a single reference detuning.

use serde::Serialize;

use crate::emission::EmissionModel;
use crate::error::{Error, Result};
use crate::grid::{rel_l2, resample_linear, Spectrum};
use crate::params::{PhysicalParams, SystemParams};
use crate::scattering::{Channel, ScatteringModel, WavePacket};
use crate::states::MechanicalState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Peak {
    pub position: f64,
    pub height: f64,
    pub prominence: f64,
}

/// Local maxima and minima of a sampled spectrum, positions refined by
/// quadratic interpolation.
#[derive(Debug, Clone, Serialize)]
pub struct PeakSet {
    pub peaks: Vec<Peak>,
    pub dips: Vec<Peak>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Zpl,
    Height,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Candidate {
    /// Sideband-branch index relative to the read-out anchor.
    pub l: i64,
    pub eta: f64,
    /// Relative L2 distance of the candidate's forward model from the
    /// measurement; zero until a forward model has been evaluated.
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForceEstimate {
    /// Force coupling in mechanical-frequency units.
    pub eta_hat: f64,
    /// Force in newtons, when SI parameters were supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_hat_newtons: Option<f64>,
    pub candidates: Vec<Candidate>,
    /// Whether the estimated shift clears the linewidth criterion
    /// `2 g0 |eta| / omega_M > gamma`.
    pub resolvable: bool,
    pub method: Method,
}

/// True when the force-induced line shift exceeds the total linewidth,
/// `2 g0 |eta| > gamma omega_M` (strict).
pub fn resolvability(p: &SystemParams) -> bool {
    2.0 * p.g0 * p.eta.abs() > (p.gamma_c + p.gamma_d) * p.omega_m
}

/// Find local maxima (and minima) with prominence at least
/// `rel_prominence * max(values)`, refining positions on a parabola through
/// each extremum and its neighbors.
pub fn find_peaks(sp: &Spectrum, rel_prominence: f64) -> Result<PeakSet> {
    if !(rel_prominence > 0.0 && rel_prominence < 1.0) {
        return Err(Error::InvalidParams(format!(
            "rel_prominence must lie in (0, 1), got {rel_prominence}"
        )));
    }
    if sp.values.len() < 3 {
        return Err(Error::EmptySpectrum);
    }
    let max = sp.values.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return Err(Error::EmptySpectrum);
    }
    let threshold = rel_prominence * max;
    let peaks = extrema(&sp.values, sp.grid.delta_min, sp.grid.step, threshold, 1.0);
    let negated: Vec<f64> = sp.values.iter().map(|v| -v).collect();
    let dips = extrema(&negated, sp.grid.delta_min, sp.grid.step, threshold, -1.0);
    Ok(PeakSet { peaks, dips })
}

/// Scan for strict local maxima of `values`, compute topographic prominence
/// (height above the higher of the two bounding valleys), and keep those
/// above `threshold`. `sign` restores dip heights after negation.
fn extrema(values: &[f64], x0: f64, step: f64, threshold: f64, sign: f64) -> Vec<Peak> {
    let n = values.len();
    let mut out = Vec::new();
    for i in 1..n - 1 {
        if !(values[i] > values[i - 1] && values[i] > values[i + 1]) {
            continue;
        }
        // walk outward to the nearest higher ground on both sides,
        // tracking the deepest valley on the way
        let mut left_min = values[i];
        let mut j = i;
        while j > 0 && values[j - 1] <= values[i] {
            j -= 1;
            left_min = left_min.min(values[j]);
        }
        let mut right_min = values[i];
        let mut j = i;
        while j + 1 < n && values[j + 1] <= values[i] {
            j += 1;
            right_min = right_min.min(values[j]);
        }
        let prominence = values[i] - left_min.max(right_min);
        if prominence < threshold {
            continue;
        }
        // parabola through the three samples around the extremum
        let (ym, y0, yp) = (values[i - 1], values[i], values[i + 1]);
        let a = 0.5 * (ym + yp) - y0;
        let b = 0.5 * (yp - ym);
        let (offset, refined) = if a.abs() > 1e-300 {
            let d = (-b / (2.0 * a)).clamp(-1.0, 1.0);
            (d, y0 - b * b / (4.0 * a))
        } else {
            (0.0, y0)
        };
        out.push(Peak {
            position: x0 + (i as f64 + offset) * step,
            height: sign * refined,
            prominence,
        });
    }
    out
}

/// Read the force from the zero-phonon-line position.
///
/// The anchor is the highest detected peak; every peak shares the same
/// position modulo `omega_M`, so the anchor choice only selects the branch
/// labelling. All branches `eta_l = eta_0 + l * omega_M^2 / (2 g0)` inside
/// `prior = (lo, hi)` are returned; `eta_hat` is the branch closest to the
/// prior midpoint. `p.eta` is ignored.
pub fn estimate_force_zpl(
    pk: &PeakSet,
    p: &SystemParams,
    prior: (f64, f64),
    phys: Option<&PhysicalParams>,
) -> Result<ForceEstimate> {
    let (lo, hi) = prior;
    if !(lo < hi) {
        return Err(Error::InvalidParams(format!(
            "prior interval must satisfy lo < hi, got [{lo}, {hi}]"
        )));
    }
    if p.g0 <= 0.0 {
        return Err(Error::InvalidParams(
            "zero-phonon-line readout requires g0 > 0".into(),
        ));
    }
    let anchor = pk
        .peaks
        .iter()
        .max_by(|a, b| a.height.partial_cmp(&b.height).unwrap())
        .ok_or(Error::NoZplCandidate)?;

    let eta0 = -(anchor.position * p.omega_m + p.g0 * p.g0) / (2.0 * p.g0);
    let spacing = p.omega_m * p.omega_m / (2.0 * p.g0);
    let l_min = ((lo - eta0) / spacing).ceil() as i64;
    let l_max = ((hi - eta0) / spacing).floor() as i64;
    if l_min > l_max {
        return Err(Error::EmptyPriorIntersection { lo, hi });
    }
    let candidates: Vec<Candidate> = (l_min..=l_max)
        .map(|l| Candidate {
            l,
            eta: eta0 + l as f64 * spacing,
            residual: 0.0,
        })
        .collect();
    let mid = 0.5 * (lo + hi);
    let best = candidates
        .iter()
        .min_by(|a, b| {
            (a.eta - mid)
                .abs()
                .partial_cmp(&(b.eta - mid).abs())
                .unwrap()
        })
        .copied()
        .expect("candidate list is non-empty");

    Ok(finish_estimate(best.eta, candidates, Method::Zpl, p, phys))
}

fn finish_estimate(
    eta_hat: f64,
    candidates: Vec<Candidate>,
    method: Method,
    p: &SystemParams,
    phys: Option<&PhysicalParams>,
) -> ForceEstimate {
    let mut with_eta = *p;
    with_eta.eta = eta_hat;
    ForceEstimate {
        eta_hat,
        f_hat_newtons: phys.map(|ph| ph.force_newtons(eta_hat / p.omega_m)),
        candidates,
        resolvable: resolvability(&with_eta),
        method,
    }
}

/// Forward model used to synthesize candidate spectra during
/// disambiguation and height fitting. Holds everything about the
/// measurement except the force coupling.
#[derive(Debug, Clone)]
pub enum ForwardModel {
    Emission {
        state: MechanicalState,
    },
    Scattering {
        state: MechanicalState,
        wavepacket: WavePacket,
    },
}

impl ForwardModel {
    fn spectrum_on(&self, p: &SystemParams, measured: &Spectrum) -> Result<Vec<f64>> {
        match self {
            ForwardModel::Emission { state } => {
                Ok(EmissionModel::new(p, state)?.spectrum(&measured.grid)?.values)
            }
            ForwardModel::Scattering { state, wavepacket } => Ok(ScatteringModel::new(
                p, state, wavepacket,
            )?
            .spectrum(&measured.grid, Channel::Detected)?
            .values),
        }
    }

    fn value_at(&self, p: &SystemParams, delta: f64) -> Result<f64> {
        match self {
            ForwardModel::Emission { state } => {
                Ok(EmissionModel::new(p, state)?.value_at(delta))
            }
            ForwardModel::Scattering { state, wavepacket } => {
                Ok(ScatteringModel::new(p, state, wavepacket)?.value_at(delta, Channel::Detected))
            }
        }
    }
}

/// Select among branch candidates by synthesizing each candidate's spectrum
/// and comparing it with the measurement in relative L2. Heights break the
/// positional degeneracy: the overlap weights depend on `eta` itself, so
/// wrong branches reproduce the line positions but not the line strengths.
///
/// Fails with [`Error::ResidualTie`] when the two best candidates agree
/// within 1%.
pub fn disambiguate(
    measured: &Spectrum,
    candidates: &[Candidate],
    p: &SystemParams,
    model: &ForwardModel,
    phys: Option<&PhysicalParams>,
) -> Result<ForceEstimate> {
    if candidates.is_empty() {
        return Err(Error::NoZplCandidate);
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut trial = *p;
        trial.eta = c.eta;
        let model_values = model.spectrum_on(&trial, measured)?;
        let residual = rel_l2(&measured.values, &model_values);
        scored.push(Candidate {
            residual,
            ..*c
        });
    }
    scored.sort_by(|a, b| a.residual.partial_cmp(&b.residual).unwrap());
    if scored.len() > 1 {
        let (best, second) = (&scored[0], &scored[1]);
        if second.residual <= best.residual * 1.01 + 1e-12 {
            return Err(Error::ResidualTie {
                best_l: best.l,
                second_l: second.l,
                best: best.residual,
                second: second.residual,
            });
        }
    }
    let best = scored[0];
    Ok(finish_estimate(best.eta, scored, Method::Zpl, p, phys))
}

/// Infer the force from the spectral height at one reference detuning.
///
/// Scans the prior, refines every local minimum of the squared height
/// mismatch by golden-section search, and reports all minima within 10% of
/// the best residual as candidates (`l` is meaningless here and set to 0).
pub fn estimate_force_height(
    measured: &Spectrum,
    reference_point: f64,
    p: &SystemParams,
    model: &ForwardModel,
    prior: (f64, f64),
    phys: Option<&PhysicalParams>,
) -> Result<ForceEstimate> {
    let (lo, hi) = prior;
    if !(lo < hi) {
        return Err(Error::InvalidParams(format!(
            "prior interval must satisfy lo < hi, got [{lo}, {hi}]"
        )));
    }
    let grid = &measured.grid;
    let last = grid.point(grid.len() - 1);
    if reference_point < grid.delta_min || reference_point > last {
        return Err(Error::InvalidParams(format!(
            "reference point {reference_point} lies outside the measured grid [{}, {last}]",
            grid.delta_min
        )));
    }
    let xs = grid.points();
    let target = resample_linear(&xs, &measured.values, &[reference_point])[0];

    let objective = |eta: f64| -> Result<f64> {
        let mut trial = *p;
        trial.eta = eta;
        let h = model.value_at(&trial, reference_point)?;
        Ok((h - target) * (h - target))
    };

    const SCAN: usize = 401;
    let step = (hi - lo) / (SCAN - 1) as f64;
    let mut obj = Vec::with_capacity(SCAN);
    for i in 0..SCAN {
        obj.push(objective(lo + i as f64 * step)?);
    }
    let fmax = obj.iter().cloned().fold(f64::MIN, f64::max);
    let fmin = obj.iter().cloned().fold(f64::MAX, f64::min);
    let scale = target * target;
    // the height carries no force information when the mismatch either
    // does not move across the prior or never rises above rounding noise
    if fmax - fmin <= 1e-15 * fmax.max(1e-300) || fmax <= 1e-18 * scale.max(1e-300) {
        return Err(Error::FlatObjective);
    }

    // refine every interior local minimum plus falling/rising edges
    let mut minima = Vec::new();
    for i in 0..SCAN {
        let left_higher = i == 0 || obj[i - 1] > obj[i];
        let right_higher = i == SCAN - 1 || obj[i + 1] > obj[i];
        if left_higher && right_higher {
            let a = lo + (i.saturating_sub(1)) as f64 * step;
            let b = lo + ((i + 1).min(SCAN - 1)) as f64 * step;
            let (eta, res) = golden_section(&objective, a, b, 1e-10 * (hi - lo))?;
            minima.push(Candidate {
                l: 0,
                eta,
                residual: res,
            });
        }
    }
    minima.sort_by(|a, b| a.residual.partial_cmp(&b.residual).unwrap());
    minima.dedup_by(|a, b| (a.eta - b.eta).abs() < 10.0 * step.max(1e-12));
    let best = minima[0];
    let keep = best.residual * 1.1 + 1e-18 * scale.max(1e-300);
    let candidates: Vec<Candidate> = minima.into_iter().filter(|c| c.residual <= keep).collect();

    let mut est = finish_estimate(best.eta, candidates, Method::Height, p, phys);
    est.method = Method::Height;
    Ok(est)
}

fn golden_section(
    f: &dyn Fn(f64) -> Result<f64>,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    let x = 0.5 * (a + b);
    Ok((x, f(x)?))
}
