//! Detuning grids, sampled spectra, and the CSV interchange format.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::SystemParams;
use crate::scattering::WavePacket;
use crate::states::StateDescriptor;

pub const CSV_HEADER: &str = "delta_over_omegaM,S_times_omegaM";

/// Uniform detuning grid, in the same frequency unit as the system
/// parameters it is used with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralGrid {
    pub delta_min: f64,
    pub delta_max: f64,
    pub step: f64,
}

impl SpectralGrid {
    pub fn new(delta_min: f64, delta_max: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidParams(format!("grid step must be > 0, got {step}")));
        }
        if !(delta_min < delta_max) {
            return Err(Error::InvalidParams(format!(
                "grid requires delta_min < delta_max, got [{delta_min}, {delta_max}]"
            )));
        }
        Ok(SpectralGrid {
            delta_min,
            delta_max,
            step,
        })
    }

    /// Number of sample points. The last point may overshoot `delta_max`
    /// by a rounding error but never by a full step.
    pub fn len(&self) -> usize {
        ((self.delta_max - self.delta_min) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn point(&self, i: usize) -> f64 {
        self.delta_min + i as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// True when the step undersamples a linewidth `gamma` (step > gamma/10).
    pub fn is_coarse_for(&self, gamma: f64) -> bool {
        self.step > gamma / 10.0
    }

    /// Default emission window `[-4 omega_M, 2 omega_M]` with step
    /// `gamma / 20`.
    pub fn default_emission(p: &SystemParams) -> Self {
        let gamma = p.gamma_c + p.gamma_d;
        SpectralGrid {
            delta_min: -4.0 * p.omega_m,
            delta_max: 2.0 * p.omega_m,
            step: gamma / 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SpectrumKind {
    #[serde(rename = "emission")]
    Emission,
    #[serde(rename = "scattering-detected")]
    ScatteringDetected,
    #[serde(rename = "scattering-undetected")]
    ScatteringUndetected,
}

/// Parameter snapshot carried alongside sampled values.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumMeta {
    pub kind: SpectrumKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<StateDescriptor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wavepacket: Option<WavePacket>,
}

impl SpectrumMeta {
    pub fn bare(kind: SpectrumKind) -> Self {
        SpectrumMeta {
            kind,
            system: None,
            state: None,
            wavepacket: None,
        }
    }
}

/// Spectral density sampled on a uniform grid. With `omega_M = 1` the
/// values are the dimensionless `S(Delta_k) * omega_M`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub grid: SpectralGrid,
    pub values: Vec<f64>,
    pub meta: SpectrumMeta,
}

impl Spectrum {
    pub fn new(grid: SpectralGrid, values: Vec<f64>, meta: SpectrumMeta) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParams(
                "spectrum values must be finite and non-negative".into(),
            ));
        }
        Ok(Spectrum { grid, values, meta })
    }

    pub fn kind(&self) -> SpectrumKind {
        self.meta.kind
    }

    /// Trapezoidal integral over the sampled window.
    pub fn integral(&self) -> f64 {
        trapezoid(self.grid.step, &self.values)
    }

    /// True when the values at the window edges are negligible against the
    /// peak, i.e. the grid plausibly covers all populated structure.
    pub fn covers_support(&self) -> bool {
        let max = self.values.iter().cloned().fold(0.0f64, f64::max);
        if max == 0.0 {
            return true;
        }
        let first = self.values.first().copied().unwrap_or(0.0);
        let last = self.values.last().copied().unwrap_or(0.0);
        first <= 1e-4 * max && last <= 1e-4 * max
    }

    /// Serialize to the two-column CSV interchange format, 12 significant
    /// digits per value.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 32 + 64);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{:.11e},{:.11e}", self.grid.point(i), v);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// Read a spectrum back from the CSV interchange format. The grid is
    /// reconstructed from the first column and must be uniform.
    pub fn from_csv(path: &Path, kind: SpectrumKind) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Spectrum::from_csv_str(&text, kind)
    }

    pub fn from_csv_str(text: &str, kind: SpectrumKind) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            Some(h) => {
                return Err(Error::SpectrumFile(format!(
                    "unexpected header {h:?}, expected {CSV_HEADER:?}"
                )))
            }
            None => return Err(Error::SpectrumFile("file is empty".into())),
        }
        let mut deltas = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (a, b) = line.split_once(',').ok_or_else(|| {
                Error::SpectrumFile(format!("row {}: expected two comma-separated fields", i + 2))
            })?;
            let d: f64 = a.trim().parse().map_err(|_| {
                Error::SpectrumFile(format!("row {}: bad detuning {a:?}", i + 2))
            })?;
            let v: f64 = b.trim().parse().map_err(|_| {
                Error::SpectrumFile(format!("row {}: bad value {b:?}", i + 2))
            })?;
            deltas.push(d);
            values.push(v);
        }
        if deltas.len() < 2 {
            return Err(Error::SpectrumFile(
                "spectrum needs at least two data rows".into(),
            ));
        }
        let step = (deltas[deltas.len() - 1] - deltas[0]) / (deltas.len() - 1) as f64;
        if !(step > 0.0) {
            return Err(Error::SpectrumFile("detunings must increase".into()));
        }
        for (i, d) in deltas.iter().enumerate() {
            let expected = deltas[0] + i as f64 * step;
            if (d - expected).abs() > 1e-6 * step.max(1e-300) {
                return Err(Error::SpectrumFile(format!(
                    "grid is not uniform near row {}",
                    i + 2
                )));
            }
        }
        let grid = SpectralGrid::new(deltas[0], deltas[deltas.len() - 1], step)?;
        Spectrum::new(grid, values, SpectrumMeta::bare(kind))
    }
}

/// Trapezoidal rule on uniformly spaced samples.
pub fn trapezoid(step: f64, values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    step * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

/// Linear interpolation of `(x_src, y_src)` onto `x_dst`; extrapolates with
/// the edge values.
pub fn resample_linear(x_src: &[f64], y_src: &[f64], x_dst: &[f64]) -> Vec<f64> {
    assert_eq!(x_src.len(), y_src.len());
    assert!(x_src.len() >= 2);
    x_dst
        .iter()
        .map(|&x| {
            if x <= x_src[0] {
                return y_src[0];
            }
            if x >= x_src[x_src.len() - 1] {
                return y_src[y_src.len() - 1];
            }
            let j = match x_src.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
                Ok(j) => return y_src[j],
                Err(j) => j,
            };
            let t = (x - x_src[j - 1]) / (x_src[j] - x_src[j - 1]);
            y_src[j - 1] + t * (y_src[j] - y_src[j - 1])
        })
        .collect()
}

/// Relative L2 distance `||a - b|| / ||b||`.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}
