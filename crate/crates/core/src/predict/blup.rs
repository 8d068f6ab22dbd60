use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::arrow::Arrow;
use crate::eigen::EigenSystem;
use crate::error::{FlmmError, Result};
use crate::fdata::{fmt_f64, CurveSet, GroupingDesign, Process};
use crate::linalg::{pinv_sym, SolveMethod, SymFactor};

/// Above this many weights the σ² = 0 case is regularized with a tiny
/// jitter instead of a dense generalized inverse.
const DENSE_PINV_LIMIT: usize = 2000;
const ZERO_SIGMA_JITTER: f64 = 1e-10;

/// Random-effect design `Φ = [Φ^B | Φ^C | Φ^E]` in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct BlupSystem {
    /// Number of levels `L^X` (0 when the process is absent).
    pub levels: [usize; 3],
    /// Truncation lags `N^X`.
    pub counts: [usize; 3],
    pub nu: [Vec<f64>; 3],
    pub sigma2: f64,
    /// Level of every observation point for each present process.
    pub point_levels: [Vec<usize>; 3],
    /// Eigenfunctions at the observation points (`𝔇 x N^X`).
    pub phi: [DMatrix<f64>; 3],
}

impl BlupSystem {
    pub fn new(
        levels: [usize; 3],
        nu: [Vec<f64>; 3],
        sigma2: f64,
        point_levels: [Vec<usize>; 3],
        phi: [DMatrix<f64>; 3],
    ) -> Result<BlupSystem> {
        let counts = [nu[0].len(), nu[1].len(), nu[2].len()];
        if counts.iter().sum::<usize>() == 0 {
            return Err(FlmmError::NoComponents);
        }
        let n = phi.iter().zip(&counts).find(|(_, c)| **c > 0).map(|(m, _)| m.nrows()).unwrap_or(0);
        for x in 0..3 {
            if counts[x] == 0 {
                continue;
            }
            if phi[x].ncols() != counts[x] || phi[x].nrows() != n || point_levels[x].len() != n {
                return Err(FlmmError::Dimension(format!("inconsistent blocks for process {}", Process::ALL[x])));
            }
            if point_levels[x].iter().any(|&l| l >= levels[x]) {
                return Err(FlmmError::Dimension(format!("level out of range for process {}", Process::ALL[x])));
            }
            if nu[x].iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(FlmmError::InvalidData("prior variances must be positive and finite".into()));
            }
        }
        if !(sigma2 >= 0.0) || !sigma2.is_finite() || phi.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(FlmmError::InvalidData("non-finite inputs to the prediction system".into()));
        }
        Ok(BlupSystem {
            levels,
            counts,
            nu,
            sigma2,
            point_levels,
            phi,
        })
    }

    pub fn n_points(&self) -> usize {
        (0..3).find(|&x| self.counts[x] > 0).map_or(0, |x| self.phi[x].nrows())
    }

    /// `𝔑 = I N^B + J N^C + n N^E`.
    pub fn n_weights(&self) -> usize {
        (0..3).map(|x| self.levels[x] * self.counts[x]).sum()
    }

    /// Column of weight `(process, level, k)` in `Φ`.
    pub fn column(&self, x: usize, level: usize, k: usize) -> usize {
        (0..x).map(|y| self.levels[y] * self.counts[y]).sum::<usize>() + level * self.counts[x] + k
    }

    /// Dense `Φ` (for small problems and tests).
    pub fn dense_phi(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_points(), self.n_weights());
        for x in 0..3 {
            for a in 0..self.n_points() {
                for k in 0..self.counts[x] {
                    m[(a, self.column(x, self.point_levels[x][a], k))] = self.phi[x][(a, k)];
                }
            }
        }
        m
    }

    /// Diagonal of `G`.
    pub fn g_diag(&self) -> DVector<f64> {
        let mut g = Vec::with_capacity(self.n_weights());
        for x in 0..3 {
            for _ in 0..self.levels[x] {
                g.extend_from_slice(&self.nu[x]);
            }
        }
        DVector::from_vec(g)
    }
}

/// Assembles `Φ` by interpolating the retained eigenfunctions at every
/// observation point.
pub fn build_blup_system(cs: &CurveSet, es: &EigenSystem, design: &GroupingDesign) -> Result<BlupSystem> {
    let mut levels = [0; 3];
    let mut nu: [Vec<f64>; 3] = Default::default();
    let mut point_levels: [Vec<usize>; 3] = Default::default();
    let mut phi: [DMatrix<f64>; 3] = [DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)];
    let curves = cs.point_curves();
    for &p in design.processes() {
        let x = p.index();
        let Some(e) = es.get(p) else { continue };
        levels[x] = design.levels(p);
        nu[x] = e.retained_values().to_vec();
        phi[x] = es.interpolate(p, cs.t())?;
        point_levels[x] = curves.iter().map(|&c| cs.level(c, p)).collect();
    }
    BlupSystem::new(levels, nu, es.sigma2, point_levels, phi)
}

/// Predicted weights per process, `L^X x N^X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub weights: [DMatrix<f64>; 3],
}

impl Weights {
    pub fn from_stacked(sys: &BlupSystem, xi: &DVector<f64>) -> Weights {
        let mut weights: [DMatrix<f64>; 3] = Default::default();
        for x in 0..3 {
            weights[x] = DMatrix::from_fn(sys.levels[x], sys.counts[x], |l, k| xi[sys.column(x, l, k)]);
        }
        Weights { weights }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut v = Vec::new();
        for w in &self.weights {
            for l in 0..w.nrows() {
                v.extend(w.row(l).iter());
            }
        }
        DVector::from_vec(v)
    }

    pub fn get(&self, p: Process) -> &DMatrix<f64> {
        &self.weights[p.index()]
    }

    /// `Φ^X ξ^X` at the observation points.
    pub fn contribution(&self, sys: &BlupSystem, p: Process) -> Vec<f64> {
        let x = p.index();
        (0..sys.n_points())
            .map(|a| {
                if sys.counts[x] == 0 {
                    return 0.0;
                }
                let l = sys.point_levels[x][a];
                (0..sys.counts[x]).map(|k| sys.phi[x][(a, k)] * self.weights[x][(l, k)]).sum()
            })
            .collect()
    }

    /// Predicted curves `X_l(t)` on the eigen grid, `L^X x D`.
    pub fn curves_on_grid(&self, es: &EigenSystem, p: Process) -> DMatrix<f64> {
        let w = &self.weights[p.index()];
        match es.get(p) {
            Some(e) if w.ncols() > 0 => w * e.retained_functions().transpose(),
            _ => DMatrix::zeros(w.nrows(), es.grid.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMethod {
    Eblup,
    Famm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub method: PredictMethod,
    pub weights: Weights,
    /// `Φ^X ξ^X` per process at observation points.
    pub random_points: [Vec<f64>; 3],
    /// `μ̂ + Σ_X Φ^X ξ^X`.
    pub fitted: Vec<f64>,
    pub solve_method: SolveMethod,
}

impl PredictionResult {
    pub fn assemble(method: PredictMethod, sys: &BlupSystem, weights: Weights, mean_points: &[f64], solve_method: SolveMethod) -> PredictionResult {
        let random_points = [
            weights.contribution(sys, Process::B),
            weights.contribution(sys, Process::C),
            weights.contribution(sys, Process::E),
        ];
        let fitted = (0..sys.n_points())
            .map(|a| mean_points[a] + random_points.iter().map(|r| r[a]).sum::<f64>())
            .collect();
        PredictionResult {
            method,
            weights,
            random_points,
            fitted,
            solve_method,
        }
    }

    /// `process,level,component,value` rows with level labels from `cs`.
    pub fn write_weights_csv(&self, path: impl AsRef<Path>, cs: &CurveSet) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["process", "level", "component", "value"])?;
        for p in Process::ALL {
            let m = self.weights.get(p);
            for l in 0..m.nrows() {
                let label = match p {
                    Process::B => cs.g1_label(l),
                    Process::C => cs.g2_label(l),
                    Process::E => cs.curve_label(l),
                };
                for k in 0..m.ncols() {
                    w.write_record([p.name().to_string(), label.clone(), (k + 1).to_string(), fmt_f64(m[(l, k)])])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per observation: curve, t, y, fitted value and its parts.
    pub fn write_fitted_csv(&self, path: impl AsRef<Path>, cs: &CurveSet) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["curve_id", "t", "y", "fitted", "mean", "B", "C", "E"])?;
        let curves = cs.point_curves();
        for a in 0..cs.n_points() {
            let random: f64 = self.random_points.iter().map(|r| r[a]).sum();
            w.write_record([
                cs.curve_label(curves[a]),
                fmt_f64(cs.t()[a]),
                fmt_f64(cs.y()[a]),
                fmt_f64(self.fitted[a]),
                fmt_f64(self.fitted[a] - random),
                fmt_f64(self.random_points[0][a]),
                fmt_f64(self.random_points[1][a]),
                fmt_f64(self.random_points[2][a]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `ξ = (σ² G⁻¹ + ΦᵀΦ)⁻¹ Φᵀ ỹ`, with the per-curve blocks eliminated first.
///
/// The rewritten form has `G⁻¹`; the variant with `G` in place of `G⁻¹`
/// does not agree with `G Φᵀ (σ² I + Φ G Φᵀ)⁻¹ ỹ` and is not used.
pub fn predict_eblup(sys: &BlupSystem, ytilde: &[f64]) -> Result<(Weights, SolveMethod)> {
    if ytilde.len() != sys.n_points() {
        return Err(FlmmError::Dimension(format!(
            "{} responses for {} observation points",
            ytilde.len(),
            sys.n_points()
        )));
    }
    if ytilde.iter().any(|v| !v.is_finite()) {
        return Err(FlmmError::InvalidData("non-finite centered response".into()));
    }
    let mut sigma2 = sys.sigma2;
    if sigma2 == 0.0 {
        if sys.n_weights() <= DENSE_PINV_LIMIT {
            // least squares, minimum-norm solution
            let phi = sys.dense_phi();
            let xi = pinv_sym(&(phi.transpose() * &phi)) * (phi.transpose() * DVector::from_column_slice(ytilde));
            return Ok((Weights::from_stacked(sys, &xi), SolveMethod::PseudoInverse));
        }
        let phi_scale = sys.phi.iter().flat_map(|m| m.iter()).map(|v| v * v).sum::<f64>() / sys.n_points().max(1) as f64;
        sigma2 = ZERO_SIGMA_JITTER * phi_scale.max(1.0);
        log::warn!("σ² = 0 with {} weights: regularizing with σ² = {sigma2:e}", sys.n_weights());
    }
    let (xi, method) = solve_structured(sys, ytilde, sigma2);
    Ok((Weights::from_stacked(sys, &xi), method))
}

fn solve_structured(sys: &BlupSystem, y: &[f64], sigma2: f64) -> (DVector<f64>, SolveMethod) {
    let r = sys.levels[0] * sys.counts[0] + sys.levels[1] * sys.counts[1];
    let q = sys.counts[2];
    let e_pen: Vec<f64> = sys.nu[2].iter().map(|v| sigma2 / v).collect();
    let arrow = Arrow::build(
        r,
        q,
        sys.levels[2],
        y,
        |a, row| {
            for x in 0..2 {
                for k in 0..sys.counts[x] {
                    row.push(sys.column(x, sys.point_levels[x][a], k), sys.phi[x][(a, k)]);
                }
            }
        },
        if q > 0 { &sys.point_levels[2] } else { &[] },
        |a| (0..q).map(|k| sys.phi[2][(a, k)]).collect(),
        &e_pen,
    );
    let red = arrow.reduce();
    let mut a = red.ne.xtx.clone();
    for x in 0..2 {
        for l in 0..sys.levels[x] {
            for k in 0..sys.counts[x] {
                let c = sys.column(x, l, k);
                a[(c, c)] += sigma2 / sys.nu[x][k];
            }
        }
    }
    let f = SymFactor::new(&a);
    let x_r = f.solve(&red.ne.xty);
    let x_e = arrow.back_substitute(&red, &x_r, None);
    let mut xi = DVector::zeros(sys.n_weights());
    xi.rows_mut(0, r).copy_from(&x_r);
    for (l, v) in x_e.iter().enumerate() {
        xi.rows_mut(r + l * q, q).copy_from(v);
    }
    let degraded = std::iter::once(f.method())
        .chain(red.factors.iter().map(|f| f.method()))
        .find(|m| m.is_degraded())
        .unwrap_or(SolveMethod::Cholesky);
    (xi, degraded)
}

/// Direct form `G Φᵀ (σ² I + Φ G Φᵀ)⁻¹ ỹ` on dense matrices (reference).
pub fn predict_eblup_direct(sys: &BlupSystem, ytilde: &[f64]) -> DVector<f64> {
    let phi = sys.dense_phi();
    let g = DMatrix::from_diagonal(&sys.g_diag());
    let n = sys.n_points();
    let v = DMatrix::identity(n, n) * sys.sigma2 + &phi * &g * phi.transpose();
    let alpha = SymFactor::new(&v).solve(&DVector::from_column_slice(ytilde));
    g * phi.transpose() * alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdata::{CurveKey, CurveSetBuilder, DesignKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random crossed instance with `n_b, n_c, n_e` components.
    pub(crate) fn random_system(rng: &mut ChaCha8Rng, counts: [usize; 3], sigma2: f64) -> BlupSystem {
        let i = rng.random_range(1..=3);
        let j = rng.random_range(1..=3);
        let mut curve_keys = Vec::new();
        for ii in 0..i {
            for jj in 0..j {
                for _ in 0..rng.random_range(1..=2) {
                    curve_keys.push((ii, jj));
                }
            }
        }
        let mut pl: [Vec<usize>; 3] = Default::default();
        for (c, &(ii, jj)) in curve_keys.iter().enumerate() {
            for _ in 0..rng.random_range(1..=4) {
                pl[0].push(ii);
                pl[1].push(jj);
                pl[2].push(c);
            }
        }
        let n = pl[0].len();
        let levels = [i, j, curve_keys.len()];
        let mut nu: [Vec<f64>; 3] = Default::default();
        let mut phi: [DMatrix<f64>; 3] = Default::default();
        for x in 0..3 {
            let mut v: Vec<f64> = (0..counts[x]).map(|_| rng.random_range(0.1..2.0)).collect();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            nu[x] = v;
            phi[x] = DMatrix::from_fn(n, counts[x], |_, _| rng.random_range(-1.5..1.5));
        }
        BlupSystem::new(levels, nu, sigma2, pl, phi).unwrap()
    }

    #[test]
    fn woodbury_matches_direct_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s2 in [0.01, 0.3, 2.0] {
            for _ in 0..20 {
                let sys = random_system(&mut rng, [2, 1, 1], s2);
                let y: Vec<f64> = (0..sys.n_points()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (w, _) = predict_eblup(&sys, &y).unwrap();
                let direct = predict_eblup_direct(&sys, &y);
                let rel = (w.stacked() - &direct).norm() / direct.norm();
                assert!(rel < 1e-8, "{rel}");
            }
        }
    }

    #[test]
    fn printed_g_variant_disagrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = random_system(&mut rng, [2, 1, 1], 0.3);
        let y: Vec<f64> = (0..sys.n_points()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let phi = sys.dense_phi();
        let g = DMatrix::from_diagonal(&sys.g_diag());
        let m = &g * sys.sigma2 + phi.transpose() * &phi;
        let variant = pinv_sym(&m) * phi.transpose() * DVector::from_column_slice(&y);
        let direct = predict_eblup_direct(&sys, &y);
        assert!((variant - &direct).norm() / direct.norm() > 1e-3);
    }

    #[test]
    fn zero_response_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sys = random_system(&mut rng, [1, 2, 1], 0.5);
        let (w, _) = predict_eblup(&sys, &vec![0.0; sys.n_points()]).unwrap();
        assert_eq!(w.stacked().amax(), 0.0);
    }

    #[test]
    fn shrinkage_monotone_in_sigma2() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sys = random_system(&mut rng, [2, 2, 2], 0.01);
        let y: Vec<f64> = (0..sys.n_points()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut last = f64::INFINITY;
        for s2 in [0.01, 0.05, 0.2, 1.0, 5.0, 25.0] {
            sys.sigma2 = s2;
            let norm = predict_eblup(&sys, &y).unwrap().0.stacked().norm();
            assert!(norm <= last + 1e-12);
            last = norm;
        }
    }

    #[test]
    fn zero_sigma_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = random_system(&mut rng, [1, 0, 0], 0.0);
        let y: Vec<f64> = (0..sys.n_points()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (w, method) = predict_eblup(&sys, &y).unwrap();
        assert_eq!(method, SolveMethod::PseudoInverse);
        let phi = sys.dense_phi();
        let ls = phi.clone().svd(true, true).solve(&DVector::from_column_slice(&y), 1e-12).unwrap();
        assert!((w.stacked() - ls).amax() < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sys = random_system(&mut rng, [1, 1, 1], 0.5);
        assert!(predict_eblup(&sys, &[0.0]).is_err());
        let mut y = vec![0.0; sys.n_points()];
        y[0] = f64::NAN;
        assert!(predict_eblup(&sys, &y).is_err());
        let empty: [Vec<f64>; 3] = Default::default();
        assert!(matches!(
            BlupSystem::new([1, 1, 1], empty, 0.1, Default::default(), Default::default()),
            Err(FlmmError::NoComponents)
        ));
    }

    fn toy(i: usize, j: usize, h: usize, d: usize) -> CurveSet {
        let mut b = CurveSetBuilder::new(vec![]);
        for ii in 0..i {
            for jj in 0..j {
                for hh in 0..h {
                    let t: Vec<f64> = (0..d).map(|k| (k as f64 + 0.5) / d as f64).collect();
                    b.push_curve(
                        CurveKey {
                            g1: ii,
                            g2: Some(jj),
                            rep: hh,
                        },
                        vec![],
                        &t,
                        &vec![0.0; d],
                    );
                }
            }
        }
        b.build(Some((0.0, 1.0))).unwrap()
    }

    fn toy_eigen(counts: [usize; 3]) -> EigenSystem {
        use crate::eigen::{decompose_matrices, eval_grid, Truncation};
        let g = eval_grid((0.0, 1.0), 40);
        let f = [|t: f64| 1.0 + 0.0 * t, |t: f64| 3f64.sqrt() * (2.0 * t - 1.0)];
        let surf = |n: usize| {
            DMatrix::from_fn(40, 40, |a, b| (0..n.max(1)).map(|k| f[k](g[a]) * f[k](g[b]) / (k + 1) as f64).sum())
        };
        let s = vec![(Process::B, surf(2)), (Process::C, surf(2)), (Process::E, surf(2))];
        decompose_matrices((0.0, 1.0), &s, 0.1, Truncation::Fixed(counts)).unwrap()
    }

    #[test]
    fn degenerate_single_curve_blocks() {
        let cs = toy(1, 1, 1, 5);
        let es = toy_eigen([1, 0, 1]);
        let sys = build_blup_system(&cs, &es, &cs.design(DesignKind::Crossed).unwrap()).unwrap();
        let phi = sys.dense_phi();
        assert_eq!((phi.nrows(), phi.ncols()), (5, 2));
        let direct = es.interpolate(Process::B, cs.t()).unwrap();
        assert_eq!(phi.column(0), direct.column(0));
    }

    #[test]
    fn crossed_layout_matches_indicators() {
        let cs = toy(2, 2, 1, 3);
        let es = toy_eigen([2, 1, 1]);
        let design = cs.design(DesignKind::Crossed).unwrap();
        let sys = build_blup_system(&cs, &es, &design).unwrap();
        assert_eq!(sys.n_weights(), 2 * 2 + 2 * 1 + 4 * 1);
        let phi = sys.dense_phi();
        let curves = cs.point_curves();
        let phi_c = es.interpolate(Process::C, cs.t()).unwrap();
        let phi_e = es.interpolate(Process::E, cs.t()).unwrap();
        // Φ^C = (indicator of word) ⊗ eigenfunction values
        for a in 0..cs.n_points() {
            let word = cs.key(curves[a]).g2.unwrap();
            for j in 0..2 {
                let expect = if j == word { phi_c[(a, 0)] } else { 0.0 };
                assert_eq!(phi[(a, 4 + j)], expect);
            }
            for c in 0..4 {
                let expect = if c == curves[a] { phi_e[(a, 0)] } else { 0.0 };
                assert_eq!(phi[(a, 6 + c)], expect);
            }
        }
    }
}
