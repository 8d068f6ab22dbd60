use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FlmmError, Result};

/// Knot placement of a [`SplineBasis`]. Both layouts are equidistant inside
/// the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnotLayout {
    /// Knots continue at the same spacing beyond the domain (P-spline layout).
    /// Difference penalties of order `d` then annihilate polynomials of degree
    /// below `d`.
    #[default]
    Extended,
    /// Boundary knots repeated `degree + 1` times.
    Clamped,
}

/// B-spline basis on a closed interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    degree: usize,
    n_basis: usize,
    domain: (f64, f64),
    layout: KnotLayout,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// `n_basis` functions of the given degree on `domain` with uniform
    /// extended knots.
    pub fn new(domain: (f64, f64), n_basis: usize, degree: usize) -> Result<SplineBasis> {
        Self::with_layout(domain, n_basis, degree, KnotLayout::Extended)
    }

    /// Clamped variant: boundary knots have multiplicity `degree + 1`.
    pub fn clamped(domain: (f64, f64), n_basis: usize, degree: usize) -> Result<SplineBasis> {
        Self::with_layout(domain, n_basis, degree, KnotLayout::Clamped)
    }

    pub fn with_layout(domain: (f64, f64), n_basis: usize, degree: usize, layout: KnotLayout) -> Result<SplineBasis> {
        if n_basis < degree + 1 {
            return Err(FlmmError::Config(format!(
                "a degree-{degree} spline basis needs at least {} functions, got {n_basis}",
                degree + 1
            )));
        }
        if !(domain.0 < domain.1) {
            return Err(FlmmError::Config(format!("invalid domain [{}, {}]", domain.0, domain.1)));
        }
        let (a, b) = domain;
        let intervals = n_basis - degree;
        let h = (b - a) / intervals as f64;
        let knots: Vec<f64> = match layout {
            KnotLayout::Extended => (0..=n_basis + degree)
                .map(|i| {
                    let offset = i as isize - degree as isize;
                    // pin the domain ends exactly
                    if offset == 0 {
                        a
                    } else if offset == intervals as isize {
                        b
                    } else {
                        a + offset as f64 * h
                    }
                })
                .collect(),
            KnotLayout::Clamped => {
                let mut knots = Vec::with_capacity(n_basis + degree + 1);
                knots.extend(std::iter::repeat_n(a, degree + 1));
                for i in 1..intervals {
                    knots.push(a + i as f64 * h);
                }
                knots.extend(std::iter::repeat_n(b, degree + 1));
                knots
            }
        };
        Ok(SplineBasis {
            degree,
            n_basis,
            domain,
            layout,
            knots,
        })
    }

    pub fn cubic(domain: (f64, f64), n_basis: usize) -> Result<SplineBasis> {
        Self::new(domain, n_basis, 3)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn layout(&self) -> KnotLayout {
        self.layout
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check(&self, t: f64) -> Result<()> {
        if t.is_nan() || t < self.domain.0 || t > self.domain.1 {
            return Err(FlmmError::OutOfDomain {
                name: "t",
                value: t,
                domain: format!("[{}, {}]", self.domain.0, self.domain.1),
            });
        }
        Ok(())
    }

    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.n_basis - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // knots[span] <= t < knots[span + 1], span in [p, n_basis - 1]
        let mut lo = p;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Index of the first nonzero function at `t` and the `degree + 1` values
    /// starting there.
    pub fn eval_local(&self, t: f64) -> Result<(usize, Vec<f64>)> {
        self.check(t)?;
        let p = self.degree;
        let span = self.span(t);
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let tmp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        Ok((span - p, n))
    }

    /// Dense row of all `n_basis` values at `t`.
    pub fn eval_row(&self, t: f64) -> Result<Vec<f64>> {
        let (first, vals) = self.eval_local(t)?;
        let mut row = vec![0.0; self.n_basis];
        for (k, v) in vals.into_iter().enumerate() {
            row[first + k] = v;
        }
        Ok(row)
    }

    /// Design matrix with one row per evaluation point.
    pub fn eval(&self, ts: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(ts.len(), self.n_basis);
        for (i, &t) in ts.iter().enumerate() {
            let (first, vals) = self.eval_local(t)?;
            for (k, v) in vals.into_iter().enumerate() {
                m[(i, first + k)] = v;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook Cox-de Boor recursion, evaluated independently of the
    /// triangular scheme used by `eval_local`.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, t: f64, end: f64) -> f64 {
        if p == 0 {
            let inside = knots[i] <= t && t < knots[i + 1] && knots[i] < end;
            // the last interval ending at the domain end is closed
            let at_end = t == end && knots[i + 1] == end && knots[i] < end;
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, t, end);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - t) / d2 * cox_de_boor(knots, i + 1, p - 1, t, end);
        }
        v
    }

    #[test]
    fn clamped_left_boundary_is_first_function() {
        let b = SplineBasis::clamped((0.0, 1.0), 8, 3).unwrap();
        let row = b.eval_row(0.0).unwrap();
        assert_eq!(row[0], 1.0);
        assert!(row[1..].iter().all(|v| *v == 0.0));
        let row = b.eval_row(1.0).unwrap();
        assert_eq!(row[7], 1.0);
    }

    #[test]
    fn extended_left_boundary_values() {
        let b = SplineBasis::cubic((0.0, 1.0), 8).unwrap();
        let row = b.eval_row(0.0).unwrap();
        assert!((row[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((row[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((row[2] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn matches_cox_de_boor_oracle() {
        for layout in [KnotLayout::Extended, KnotLayout::Clamped] {
            for &k in &[4usize, 5, 8, 11] {
                let b = SplineBasis::with_layout((-0.3, 2.1), k, 3, layout).unwrap();
                for s in 0..=97 {
                    let t = -0.3 + 2.4 * s as f64 / 97.0;
                    let t = t.min(2.1);
                    let row = b.eval_row(t).unwrap();
                    for (i, v) in row.iter().enumerate() {
                        let oracle = cox_de_boor(b.knots(), i, 3, t, 2.1);
                        assert!((v - oracle).abs() < 1e-12, "{layout:?} k={k} t={t} i={i}: {v} vs {oracle}");
                    }
                }
            }
        }
    }

    #[test]
    fn outside_domain_rejected() {
        let b = SplineBasis::cubic((0.0, 1.0), 5).unwrap();
        assert!(b.eval(&[0.5, 1.0000001]).is_err());
    }

    #[test]
    fn too_few_functions_rejected() {
        assert!(SplineBasis::cubic((0.0, 1.0), 3).is_err());
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_local_support(t in 0.0f64..=1.0, k in 4usize..15, deg in 1usize..4, clamped: bool) {
            prop_assume!(k > deg);
            let layout = if clamped { KnotLayout::Clamped } else { KnotLayout::Extended };
            let b = SplineBasis::with_layout((0.0, 1.0), k, deg, layout).unwrap();
            let row = b.eval_row(t).unwrap();
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0 + 1e-15).contains(v)));
            prop_assert!(row.iter().filter(|v| **v != 0.0).count() <= deg + 1);
        }
    }
}
