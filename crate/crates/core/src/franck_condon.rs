//! Overlaps between number states and displaced number states.
//!
//! `displaced_overlap(m, n, d)` evaluates `<m|D(d)|n>` for the real
//! displacement operator `D(d) = exp(d (b^† - b))` through the associated
//! Laguerre closed form. The prefactor `sqrt(m!/n!) |d|^{n-m} e^{-d^2/2}`
//! is assembled in log space and the Laguerre recurrence carries a running
//! rescale, so entries stay finite up to the truncation cap.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::states::MechanicalState;
use crate::TRUNCATION_CAP;

/// Overlap `<m|D(d)|n>` of a number state with a displaced number state.
///
/// The result is real (`d` is real) and bounded by 1 in magnitude.
pub fn displaced_overlap(m: usize, n: usize, d: f64) -> f64 {
    assert!(d.is_finite(), "displacement must be finite");
    if d == 0.0 {
        return if m == n { 1.0 } else { 0.0 };
    }
    let (lo, hi) = (m.min(n), m.max(n));
    let k = hi - lo;
    let x = d * d;

    // ln sqrt(lo!/hi!) = -0.5 * ln(hi!/lo!)
    let mut ln_ratio = 0.0;
    for i in (lo + 1)..=hi {
        ln_ratio += (i as f64).ln();
    }
    let ln_pre = -0.5 * ln_ratio + (k as f64) * d.abs().ln() - 0.5 * x;

    // (-d)^{n-m} for n >= m, d^{m-n} for m > n; magnitude folded into ln_pre.
    let signed_base = if n >= m { -d } else { d };
    let sign = if signed_base < 0.0 && k % 2 == 1 { -1.0 } else { 1.0 };

    let (lag, ln_scale) = scaled_laguerre(lo, k as f64, x);
    if lag == 0.0 {
        return 0.0;
    }
    sign * lag.signum() * (ln_pre + ln_scale + lag.abs().ln()).exp()
}

/// Associated Laguerre polynomial `L_deg^a(x)` by the three-term recurrence
/// in the degree, returned as `(v, e)` with `L = v * exp(e)` to dodge
/// overflow at large degree.
fn scaled_laguerre(deg: usize, a: f64, x: f64) -> (f64, f64) {
    if deg == 0 {
        return (1.0, 0.0);
    }
    let mut prev = 1.0;
    let mut cur = 1.0 + a - x;
    let mut exponent = 0.0;
    for j in 2..=deg {
        let jf = j as f64;
        let next = ((2.0 * jf - 1.0 + a - x) * cur - (jf - 1.0 + a) * prev) / jf;
        prev = cur;
        cur = next;
        if cur.abs() > 1e250 {
            prev *= 1e-250;
            cur *= 1e-250;
            exponent += 250.0 * std::f64::consts::LN_10;
        }
    }
    (cur, exponent)
}

/// Dense table of displaced-number-state overlaps for one displacement.
#[derive(Debug, Clone)]
pub struct FranckCondonTable {
    displacement: f64,
    entries: Array2<f64>,
}

impl FranckCondonTable {
    /// Build the `size x size` table with `entries[m][n] = <m|D(d)|n>`.
    ///
    /// The lower triangle is mirrored from the upper through the signed
    /// symmetry `<n|D(d)|m> = (-1)^{n-m} <m|D(d)|n>`, which the closed form
    /// obeys exactly in floating point.
    pub fn new(d: f64, size: usize) -> Self {
        assert!(size >= 1, "table size must be at least 1");
        let mut entries = Array2::zeros((size, size));
        for m in 0..size {
            for n in m..size {
                let v = displaced_overlap(m, n, d);
                entries[[m, n]] = v;
                let sign = if (n - m) % 2 == 1 { -1.0 } else { 1.0 };
                entries[[n, m]] = sign * v;
            }
        }
        FranckCondonTable { displacement: d, entries }
    }

    pub fn displacement(&self) -> f64 {
        self.displacement
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    /// `<m|D(d)|n>`.
    #[inline]
    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.entries[[m, n]]
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Row `m` as a slice, `entries[m][..]`.
    #[inline]
    pub fn row(&self, m: usize) -> &[f64] {
        self.entries
            .row(m)
            .to_slice()
            .expect("table rows are contiguous")
    }
}

/// Convenience alias for [`FranckCondonTable::new`].
pub fn fc_table(d: f64, size: usize) -> FranckCondonTable {
    FranckCondonTable::new(d, size)
}

/// Smallest number of displaced-basis levels capturing at least
/// `1 - weight_tol` of the norm of every stored component of `state`
/// under the displacement `d`.
///
/// Fails with [`Error::TruncationCap`] once more than [`TRUNCATION_CAP`]
/// levels would be required.
pub fn adaptive_truncation(d: f64, state: &MechanicalState, weight_tol: f64) -> Result<usize> {
    if !(weight_tol > 0.0 && weight_tol < 1.0) {
        return Err(Error::InvalidParams(format!(
            "weight_tol must lie in (0, 1), got {weight_tol}"
        )));
    }
    let target = 1.0 - weight_tol;
    let mut needed = 1usize;
    for m0 in state.occupied_levels() {
        let mut acc = 0.0;
        let mut j = 0usize;
        loop {
            let c = displaced_overlap(j, m0, d);
            acc += c * c;
            j += 1;
            if acc >= target {
                break;
            }
            if j > TRUNCATION_CAP {
                return Err(Error::TruncationCap {
                    required: j,
                    cap: TRUNCATION_CAP,
                });
            }
        }
        needed = needed.max(j);
    }
    Ok(needed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;

    /// Independent oracle: D(d) as the matrix exponential of d(b^† - b) on a
    /// truncated Fock space, via scaling-and-squaring Taylor summation.
    fn displacement_expm(d: f64, dim: usize) -> Array2<f64> {
        let mut g: Array2<f64> = Array2::zeros((dim, dim));
        for i in 0..dim - 1 {
            let v = d * ((i + 1) as f64).sqrt();
            g[[i + 1, i]] = v;
            g[[i, i + 1]] = -v;
        }
        // 1-norm upper bound 2|d|sqrt(dim)
        let norm = 2.0 * d.abs() * (dim as f64).sqrt();
        let s = norm.max(0.25).log2().ceil().max(0.0) as i32 + 1;
        g.mapv_inplace(|x| x / f64::powi(2.0, s));
        let mut result = Array2::eye(dim);
        let mut term = Array2::eye(dim);
        for j in 1..=24 {
            term = term.dot(&g) / j as f64;
            result = result + &term;
        }
        for _ in 0..s {
            result = result.dot(&result);
        }
        result
    }

    /// Independent oracle: smallest N with upper Poisson(mean) tail < tol.
    fn poisson_truncation(mean: f64, tol: f64) -> usize {
        let mut p = (-mean).exp();
        let mut cum = p;
        let mut n = 1;
        while 1.0 - cum >= tol {
            p *= mean / n as f64;
            cum += p;
            n += 1;
        }
        n
    }

    #[test]
    fn vacuum_overlap_closed_form() {
        let v = displaced_overlap(0, 0, 0.8);
        assert_abs_diff_eq!(v, (-0.32f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn identity_displacement() {
        for m in 0..6 {
            for n in 0..6 {
                let expected = if m == n { 1.0 } else { 0.0 };
                assert_eq!(displaced_overlap(m, n, 0.0), expected);
            }
        }
    }

    #[test]
    fn sign_flips_under_displacement_reflection() {
        let plus = displaced_overlap(0, 1, 0.7);
        let minus = displaced_overlap(0, 1, -0.7);
        assert_abs_diff_eq!(plus, -minus, epsilon = 1e-15);
        assert!(plus != 0.0);
    }

    #[test]
    fn matches_matrix_exponential_oracle() {
        for &d in &[0.8, -0.82, 0.02, 1.7] {
            let n = 20;
            let exact = displacement_expm(d, n + 20);
            for m in 0..n {
                for j in 0..n {
                    assert_abs_diff_eq!(
                        displaced_overlap(m, j, d),
                        exact[[m, j]],
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn table_identity_at_zero() {
        let t = fc_table(0.0, 5);
        for m in 0..5 {
            for n in 0..5 {
                assert_eq!(t.get(m, n), if m == n { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn table_row_weight_nearly_complete() {
        let t = fc_table(0.8, 30);
        let sq: f64 = (0..30).map(|n| t.get(0, n) * t.get(0, n)).sum();
        assert!(sq >= 1.0 - 1e-10, "row-0 squared sum {sq}");
        // brute-force tail bound: row 0 weights are Poisson(d^2)
        assert!(poisson_truncation(0.64, 1e-10) <= 30);
    }

    #[test]
    fn table_matches_pointwise_function() {
        let t = fc_table(-0.82, 25);
        for m in 0..25 {
            for n in 0..25 {
                assert_eq!(t.get(m, n), displaced_overlap(m, n, -0.82));
            }
        }
    }

    #[test]
    fn adaptive_truncation_identity_needs_support_only() {
        let s = MechanicalState::number(3).unwrap();
        assert_eq!(adaptive_truncation(0.0, &s, 1e-10).unwrap(), 4);
    }

    #[test]
    fn adaptive_truncation_ground_state_matches_poisson_tail() {
        let s = MechanicalState::number(0).unwrap();
        let n = adaptive_truncation(0.8, &s, 1e-10).unwrap();
        assert_eq!(n, poisson_truncation(0.64, 1e-10));
    }

    #[test]
    fn adaptive_truncation_thermal_is_finite() {
        let s = MechanicalState::thermal(1.0).unwrap();
        let n = adaptive_truncation(0.82, &s, 1e-8).unwrap();
        assert!(n < TRUNCATION_CAP, "n = {n}");
        // must at least cover the stored thermal components
        assert!(n >= s.truncation());
    }

    #[test]
    fn adaptive_truncation_rejects_extreme_displacement() {
        let s = MechanicalState::number(0).unwrap();
        let err = adaptive_truncation(30.0, &s, 1e-10).unwrap_err();
        assert!(matches!(err, Error::TruncationCap { .. }));
    }

    #[test]
    fn adaptive_truncation_rejects_bad_tolerance() {
        let s = MechanicalState::number(0).unwrap();
        assert!(adaptive_truncation(0.5, &s, 0.0).is_err());
        assert!(adaptive_truncation(0.5, &s, 1.0).is_err());
    }

    #[test]
    fn completeness_at_adaptive_truncation() {
        for &d in &[0.8, -0.82, 0.02] {
            let s = MechanicalState::number(2).unwrap();
            let n = adaptive_truncation(d, &s, 1e-10).unwrap();
            let fwd = fc_table(d, n);
            let bwd = fc_table(-d, n);
            for m in 0..3 {
                for mp in 0..3 {
                    let sum: f64 = (0..n).map(|j| fwd.get(m, j) * bwd.get(j, mp)).sum();
                    let expected = if m == mp { 1.0 } else { 0.0 };
                    assert!(
                        (sum - expected).abs() < 1e-8,
                        "d={d} completeness deviation {}",
                        (sum - expected).abs()
                    );
                }
            }
        }
    }

    #[test]
    fn row_orthonormality_at_adaptive_truncation() {
        for &d in &[0.8, -0.82, 0.02] {
            let s = MechanicalState::number(2).unwrap();
            let n = adaptive_truncation(d, &s, 1e-10).unwrap();
            let t = fc_table(d, n);
            for m in 0..3 {
                for mp in 0..3 {
                    let sum: f64 = (0..n).map(|j| t.get(m, j) * t.get(mp, j)).sum();
                    let expected = if m == mp { 1.0 } else { 0.0 };
                    assert!(
                        (sum - expected).abs() < 1e-8,
                        "d={d} orthonormality deviation {}",
                        (sum - expected).abs()
                    );
                }
            }
        }
    }

    #[test]
    fn deep_truncation_stays_finite() {
        // stress the rescaled recurrence near the cap
        let t = displaced_overlap(500, 380, 3.0);
        assert!(t.is_finite());
        assert!(t.abs() <= 1.0);
    }

    proptest! {
        #[test]
        fn signed_symmetry_holds(d in -2.0..2.0f64, m in 0usize..30, n in 0usize..30) {
            let a = displaced_overlap(m, n, d);
            let b = displaced_overlap(n, m, d);
            let sign = if (m as i64 - n as i64).rem_euclid(2) == 1 { -1.0 } else { 1.0 };
            prop_assert!((a - sign * b).abs() < 1e-12);
        }

        #[test]
        fn entries_bounded_by_unity(d in -3.0..3.0f64, m in 0usize..40, n in 0usize..40) {
            let v = displaced_overlap(m, n, d);
            prop_assert!(v.is_finite());
            prop_assert!(v.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn row_weights_never_exceed_unity(d in -2.0..2.0f64, size in 2usize..40) {
            let t = fc_table(d, size);
            for m in 0..size {
                let sq: f64 = (0..size).map(|n| t.get(m, n) * t.get(m, n)).sum();
                prop_assert!(sq <= 1.0 + 1e-10);
            }
        }
    }
}
