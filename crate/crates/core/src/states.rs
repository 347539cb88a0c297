//! Initial states of the mirror: number, coherent (real amplitude), and
//! thermal, with truncated expansions in the bare and displaced bases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::franck_condon::FranckCondonTable;
use crate::TRUNCATION_CAP;

/// Cumulative-weight tolerance used when truncating state expansions.
pub const STATE_WEIGHT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateKind {
    Number(u32),
    Coherent(f64),
    Thermal(f64),
}

/// Serializable `{kind, value}` descriptor matching the configuration
/// schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDescriptor {
    pub kind: String,
    pub value: f64,
}

/// Either the amplitude coefficients of a pure state or the diagonal
/// weights of a mixed one, truncated at cumulative weight
/// `1 - STATE_WEIGHT_TOL`.
#[derive(Debug, Clone, Copy)]
pub enum FockExpansion<'a> {
    Pure(&'a [f64]),
    Mixed(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanicalState {
    kind: StateKind,
    truncation: usize,
    pure_coeffs: Option<Vec<f64>>,
    mixed_weights: Option<Vec<f64>>,
}

impl MechanicalState {
    /// Number state `|m0>`.
    pub fn number(m0: u32) -> Result<Self> {
        let n = m0 as usize + 1;
        if n > TRUNCATION_CAP {
            return Err(Error::TruncationCap {
                required: n,
                cap: TRUNCATION_CAP,
            });
        }
        let mut coeffs = vec![0.0; n];
        coeffs[m0 as usize] = 1.0;
        Ok(MechanicalState {
            kind: StateKind::Number(m0),
            truncation: n,
            pure_coeffs: Some(coeffs),
            mixed_weights: None,
        })
    }

    /// Coherent state with real amplitude `alpha`.
    pub fn coherent(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::InvalidParams("coherent amplitude must be finite".into()));
        }
        let mut coeffs = Vec::new();
        let mut c = (-alpha * alpha / 2.0).exp();
        let mut cum = 0.0;
        let mut n = 0usize;
        loop {
            coeffs.push(c);
            cum += c * c;
            if cum >= 1.0 - STATE_WEIGHT_TOL {
                break;
            }
            n += 1;
            if n >= TRUNCATION_CAP {
                return Err(Error::TruncationCap {
                    required: n + 1,
                    cap: TRUNCATION_CAP,
                });
            }
            c *= alpha / (n as f64).sqrt();
        }
        Ok(MechanicalState {
            kind: StateKind::Coherent(alpha),
            truncation: coeffs.len(),
            pure_coeffs: Some(coeffs),
            mixed_weights: None,
        })
    }

    /// Thermal state with mean occupation `nbar`.
    pub fn thermal(nbar: f64) -> Result<Self> {
        if !(nbar >= 0.0) || !nbar.is_finite() {
            return Err(Error::InvalidParams(format!(
                "thermal occupation must be >= 0, got {nbar}"
            )));
        }
        let ratio = nbar / (nbar + 1.0);
        let mut weights = Vec::new();
        let mut p = 1.0 / (nbar + 1.0);
        let mut cum = 0.0;
        loop {
            weights.push(p);
            cum += p;
            if cum >= 1.0 - STATE_WEIGHT_TOL {
                break;
            }
            if weights.len() >= TRUNCATION_CAP {
                return Err(Error::TruncationCap {
                    required: weights.len() + 1,
                    cap: TRUNCATION_CAP,
                });
            }
            p *= ratio;
        }
        Ok(MechanicalState {
            kind: StateKind::Thermal(nbar),
            truncation: weights.len(),
            pure_coeffs: None,
            mixed_weights: Some(weights),
        })
    }

    pub fn from_descriptor(desc: &StateDescriptor) -> Result<Self> {
        match desc.kind.as_str() {
            "number" => {
                if desc.value < 0.0 || desc.value.fract() != 0.0 || desc.value > u32::MAX as f64 {
                    return Err(Error::Config(format!(
                        "number state requires a non-negative integer value, got {}",
                        desc.value
                    )));
                }
                MechanicalState::number(desc.value as u32)
            }
            "coherent" => MechanicalState::coherent(desc.value),
            "thermal" => MechanicalState::thermal(desc.value),
            other => Err(Error::Config(format!(
                "unknown state kind {other:?}; expected number, coherent, or thermal"
            ))),
        }
    }

    pub fn descriptor(&self) -> StateDescriptor {
        let (kind, value) = match self.kind {
            StateKind::Number(m0) => ("number", f64::from(m0)),
            StateKind::Coherent(a) => ("coherent", a),
            StateKind::Thermal(n) => ("thermal", n),
        };
        StateDescriptor {
            kind: kind.to_string(),
            value,
        }
    }

    pub fn kind(&self) -> StateKind {
        self.kind
    }

    pub fn is_pure(&self) -> bool {
        self.pure_coeffs.is_some()
    }

    /// Number of stored Fock components.
    pub fn truncation(&self) -> usize {
        self.truncation
    }

    /// Truncated expansion: amplitudes for pure states, weights for mixed.
    pub fn fock_expansion(&self) -> FockExpansion<'_> {
        match (&self.pure_coeffs, &self.mixed_weights) {
            (Some(c), _) => FockExpansion::Pure(c),
            (_, Some(w)) => FockExpansion::Mixed(w),
            _ => unreachable!("state holds either coefficients or weights"),
        }
    }

    /// Indices of the stored Fock components.
    pub fn occupied_levels(&self) -> impl Iterator<Item = usize> + '_ {
        let coeffs: &[f64] = match self.fock_expansion() {
            FockExpansion::Pure(c) => c,
            FockExpansion::Mixed(w) => w,
        };
        coeffs
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
    }

    /// Weighted mixture components `(weight, m0)`; a pure number state is a
    /// single component, other pure states have none.
    pub fn mixture_components(&self) -> Option<impl Iterator<Item = (f64, usize)> + '_> {
        self.mixed_weights
            .as_ref()
            .map(|w| w.iter().copied().enumerate().map(|(i, p)| (p, i)))
    }

    /// Coefficients of a pure state in the displaced basis attached to `d`:
    /// component `j` is `<j|D(d)|psi>`, i.e. the amplitude on the basis
    /// state `D(-d)|j>`.
    ///
    /// `fc` must be the table for the same displacement and at least as
    /// large as the state's truncation. Mixed states have no single
    /// amplitude vector; decompose each number component instead.
    pub fn displaced_projection(&self, d: f64, fc: &FranckCondonTable) -> Result<Vec<f64>> {
        if fc.displacement() != d {
            return Err(Error::DimensionMismatch(format!(
                "table displacement {} does not match requested {}",
                fc.displacement(),
                d
            )));
        }
        if fc.size() < self.truncation {
            return Err(Error::DimensionMismatch(format!(
                "table size {} is smaller than state truncation {}",
                fc.size(),
                self.truncation
            )));
        }
        let coeffs = match self.fock_expansion() {
            FockExpansion::Pure(c) => c,
            FockExpansion::Mixed(_) => {
                return Err(Error::InvalidParams(
                    "displaced projection of a mixed state is not defined; project its number components".into(),
                ))
            }
        };
        let size = fc.size();
        let mut out = vec![0.0; size];
        for (j, o) in out.iter_mut().enumerate() {
            let row = fc.row(j);
            *o = coeffs.iter().zip(row).map(|(r, f)| r * f).sum();
        }
        Ok(out)
    }
}
