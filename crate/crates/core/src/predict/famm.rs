use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::arrow::Arrow;
use super::blup::{BlupSystem, PredictMethod, PredictionResult, Weights};
use crate::basis::{solve_penalized_normal, PenaltyBlock, PenaltyMatrix, Smoothing};
use crate::eigen::EigenSystem;
use crate::error::{FlmmError, Result};
use crate::fdata::{fmt_f64, CurveSet, GroupingDesign};
use crate::linalg::SymFactor;
use crate::meanfit::{MeanDesign, MeanModel, MeanOptions, MeanSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FammOptions {
    /// Center every random effect across its levels.
    pub constrain: bool,
    /// Normal quantile of the point-wise bands.
    pub z: f64,
}

impl Default for FammOptions {
    fn default() -> Self {
        FammOptions {
            constrain: true,
            z: 1.959963984540054,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub term: String,
    pub t: f64,
    pub est: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FammFit {
    pub mean: MeanModel,
    pub prediction: PredictionResult,
    pub bands: Vec<Band>,
    /// Scale used for the coefficient covariance.
    pub scale: f64,
    /// Smoothing parameter of the FPC blocks (`σ̂²` from the covariance step).
    pub fpc_lambda: f64,
    pub constrained: bool,
}

impl FammFit {
    pub fn write_bands_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["term", "t", "est", "lo", "hi"])?;
        for b in &self.bands {
            w.write_record([b.term.clone(), fmt_f64(b.t), fmt_f64(b.est), fmt_f64(b.lo), fmt_f64(b.hi)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Bands of one term, in grid order.
    pub fn term_bands(&self, term: &str) -> Vec<&Band> {
        self.bands.iter().filter(|b| b.term == term).collect()
    }
}

/// Random-effect design without requiring any retained component.
fn random_design(cs: &CurveSet, es: &EigenSystem, design: &GroupingDesign) -> Result<BlupSystem> {
    let mut sys = BlupSystem {
        levels: [0; 3],
        counts: [0; 3],
        nu: Default::default(),
        sigma2: es.sigma2,
        point_levels: Default::default(),
        phi: [DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)],
    };
    let curves = cs.point_curves();
    for &p in design.processes() {
        let x = p.index();
        let Some(e) = es.get(p) else { continue };
        if e.retained == 0 {
            continue;
        }
        sys.levels[x] = design.levels(p);
        sys.counts[x] = e.retained;
        sys.nu[x] = e.retained_values().to_vec();
        sys.phi[x] = es.interpolate(p, cs.t())?;
        sys.point_levels[x] = curves.iter().map(|&c| cs.level(c, p)).collect();
    }
    Ok(sys)
}

/// Joint penalized fit of the mean and the FPC weights, with the FPC
/// penalties `σ̂² diag(ν)⁻¹` held fixed and the mean smoothing selected.
pub fn fit_famm(
    cs: &CurveSet,
    es: &EigenSystem,
    design: &GroupingDesign,
    spec: &MeanSpec,
    mean_opts: &MeanOptions,
    opts: &FammOptions,
) -> Result<FammFit> {
    let mdesign = MeanDesign::new(spec, cs.domain(), mean_opts)?;
    let bound = mdesign.bind(cs.covariate_names())?;
    let sys = random_design(cs, es, design)?;
    let pm = mdesign.ncols();
    let r = pm + sys.levels[0] * sys.counts[0] + sys.levels[1] * sys.counts[1];
    let q = sys.counts[2];
    let sigma2 = es.sigma2;
    let curves = cs.point_curves();
    let mults: Vec<Vec<f64>> = (0..cs.n_curves())
        .map(|c| MeanDesign::multipliers(&bound, cs.covariates(c)))
        .collect();
    let e_pen: Vec<f64> = sys.nu[2].iter().map(|v| sigma2 / v).collect();
    let mut row_err = None;
    let arrow = Arrow::build(
        r,
        q,
        sys.levels[2],
        cs.y(),
        |a, row| {
            if let Err(e) = mdesign.push_row(row, 0, cs.t()[a], &mults[curves[a]]) {
                row_err.get_or_insert(e);
            }
            for x in 0..2 {
                for k in 0..sys.counts[x] {
                    row.push(pm + sys.column(x, sys.point_levels[x][a], k), sys.phi[x][(a, k)]);
                }
            }
        },
        if q > 0 { &sys.point_levels[2] } else { &[] },
        |a| (0..q).map(|k| sys.phi[2][(a, k)]).collect(),
        &e_pen,
    );
    if let Some(e) = row_err {
        return Err(e);
    }
    let red = arrow.reduce();

    let smoothing = vec![mean_opts.log_lambda.map_or(Smoothing::Select, Smoothing::FixedLog); mdesign.terms.len()];
    let mut blocks = mdesign.penalty_blocks(0, &smoothing)?;
    for x in 0..2 {
        if sys.counts[x] == 0 {
            continue;
        }
        let mut diag = Vec::with_capacity(sys.levels[x] * sys.counts[x]);
        for _ in 0..sys.levels[x] {
            diag.extend(sys.nu[x].iter().map(|v| 1.0 / v));
        }
        blocks.push(PenaltyBlock::new(
            pm + sys.column(x, 0, 0),
            PenaltyMatrix::diagonal(&diag),
            Smoothing::Fixed(sigma2),
        ));
    }
    let fit = solve_penalized_normal(&red.ne, &blocks, &mean_opts.pls)?;
    let mut theta_r = fit.coefficients.clone();
    let mut theta_e = arrow.back_substitute(&red, &theta_r, None);
    let mut cov_mean = fit.unscaled_cov.view((0, 0), (pm, pm)).into_owned();

    // sum-to-zero constraints across levels, one per process and component
    let mut constraints: Vec<(DVector<f64>, Vec<DVector<f64>>)> = Vec::new();
    if opts.constrain {
        for x in 0..3 {
            if sys.counts[x] == 0 || sys.levels[x] < 2 {
                continue;
            }
            for k in 0..sys.counts[x] {
                let mut cr = DVector::zeros(r);
                let mut ce = vec![DVector::zeros(q); arrow.blocks.len()];
                for l in 0..sys.levels[x] {
                    if x < 2 {
                        cr[pm + sys.column(x, l, k)] = 1.0;
                    } else {
                        ce[l][k] = 1.0;
                    }
                }
                constraints.push((cr, ce));
            }
        }
    }
    if !constraints.is_empty() {
        let m = constraints.len();
        let z: Vec<(DVector<f64>, Vec<DVector<f64>>)> = constraints
            .iter()
            .map(|(cr, ce)| arrow.solve_full(&red, &fit.unscaled_cov, cr, ce))
            .collect();
        let dot = |a: &(DVector<f64>, Vec<DVector<f64>>), b: &(DVector<f64>, Vec<DVector<f64>>)| {
            a.0.dot(&b.0) + a.1.iter().zip(&b.1).map(|(u, v)| u.dot(v)).sum::<f64>()
        };
        let w = DMatrix::from_fn(m, m, |i, j| dot(&constraints[i], &z[j]));
        let current = (theta_r.clone(), theta_e.clone());
        let c_theta = DVector::from_fn(m, |i, _| dot(&constraints[i], &current));
        let wf = SymFactor::new(&w);
        let coef = wf.solve(&c_theta);
        for (j, zj) in z.iter().enumerate() {
            theta_r.axpy(-coef[j], &zj.0, 1.0);
            for (te, ze) in theta_e.iter_mut().zip(&zj.1) {
                te.axpy(-coef[j], ze, 1.0);
            }
        }
        let zm = DMatrix::from_fn(pm, m, |i, j| z[j].0[i]);
        cov_mean -= &zm * wf.solve_mat(&zm.transpose());
    }

    let mean = MeanModel {
        lambdas: fit.lambdas[..mdesign.terms.len()].to_vec(),
        ..MeanModel::from_stacked(mdesign.clone(), &theta_r.as_slice()[..pm], vec![])
    };
    let mut xi = DVector::zeros(sys.n_weights());
    let rb = r - pm;
    xi.rows_mut(0, rb).copy_from(&theta_r.rows(pm, rb));
    for (l, v) in theta_e.iter().enumerate() {
        xi.rows_mut(rb + l * q, q).copy_from(v);
    }
    let weights = Weights::from_stacked(&sys, &xi);
    let mean_points = mean.predict_points(cs)?;
    let prediction = if sys.n_weights() > 0 {
        PredictionResult::assemble(PredictMethod::Famm, &sys, weights, &mean_points, fit.method)
    } else {
        PredictionResult {
            method: PredictMethod::Famm,
            weights,
            random_points: [vec![0.0; cs.n_points()], vec![0.0; cs.n_points()], vec![0.0; cs.n_points()]],
            fitted: mean_points,
            solve_method: fit.method,
        }
    };

    let scale = fit.reml_scale;
    if !scale.is_finite() {
        return Err(FlmmError::Numerical("non-finite scale estimate".into()));
    }
    let mut bands = Vec::new();
    for (p, term) in mdesign.terms.iter().enumerate() {
        let off = mdesign.term_offset(p);
        let k = term.basis.n_basis();
        let v = cov_mean.view((off, off), (k, k));
        let est = mean.term_values(p, &es.grid)?;
        for (g, &t) in es.grid.iter().enumerate() {
            let b = DVector::from_vec(term.basis.eval_row(t)?);
            let var = (b.transpose() * v * &b)[(0, 0)].max(0.0) * scale;
            let half = opts.z * var.sqrt();
            bands.push(Band {
                term: term.label.clone(),
                t,
                est: est[g],
                lo: est[g] - half,
                hi: est[g] + half,
            });
        }
    }
    Ok(FammFit {
        mean,
        prediction,
        bands,
        scale,
        fpc_lambda: sigma2,
        constrained: opts.constrain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigen::{decompose_matrices, eval_grid, Truncation};
    use crate::fdata::{CurveKey, CurveSetBuilder, DesignKind, Process};
    use crate::meanfit::fit_mean;
    use crate::predict::blup::{build_blup_system, predict_eblup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn phi_b(t: f64) -> [f64; 2] {
        [1.0, 3f64.sqrt() * (2.0 * t - 1.0)]
    }

    fn phi_e(t: f64) -> [f64; 1] {
        [2f64.sqrt() * (2.0 * std::f64::consts::PI * t).sin()]
    }

    fn true_eigen(n_b: usize, n_e: usize) -> EigenSystem {
        let g = eval_grid((0.0, 1.0), 100);
        let kb = DMatrix::from_fn(100, 100, |a, b| {
            let (x, y) = (phi_b(g[a]), phi_b(g[b]));
            0.5 * x[0] * y[0] + 0.2 * x[1] * y[1]
        });
        let ke = DMatrix::from_fn(100, 100, |a, b| 0.3 * phi_e(g[a])[0] * phi_e(g[b])[0]);
        decompose_matrices((0.0, 1.0), &[(Process::B, kb), (Process::E, ke)], 0.05, Truncation::Fixed([n_b, 0, n_e]))
            .unwrap()
    }

    fn simulate(seed: u64) -> CurveSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut b = CurveSetBuilder::new(vec!["x_a".into()]);
        for i in 0..8 {
            let wb = [0.5f64.sqrt() * n.sample(&mut rng), 0.2f64.sqrt() * n.sample(&mut rng)];
            for h in 0..4 {
                let we = 0.3f64.sqrt() * n.sample(&mut rng);
                let x = (h % 2) as f64;
                let mut t: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..1.0)).collect();
                t.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let y: Vec<f64> = t
                    .iter()
                    .map(|&t| {
                        let pb = phi_b(t);
                        t.sin() + x * t + wb[0] * pb[0] + wb[1] * pb[1] + we * phi_e(t)[0] + 0.05f64.sqrt() * n.sample(&mut rng)
                    })
                    .collect();
                b.push_curve(
                    CurveKey {
                        g1: i,
                        g2: None,
                        rep: h,
                    },
                    vec![x],
                    &t,
                    &y,
                );
            }
        }
        b.build(Some((0.0, 1.0))).unwrap()
    }

    #[test]
    fn no_components_reduces_to_mean_fit() {
        let cs = simulate(1);
        let es = true_eigen(0, 0);
        let d = cs.design(DesignKind::SingleFri).unwrap();
        let spec = MeanSpec::parse("t + t:a").unwrap();
        let opts = MeanOptions::default();
        let famm = fit_famm(&cs, &es, &d, &spec, &opts, &FammOptions::default()).unwrap();
        let wi = fit_mean(&cs, &spec, &opts).unwrap();
        assert!((famm.mean.stacked() - wi.stacked()).amax() < 1e-8);
    }

    #[test]
    fn random_effects_sum_to_zero() {
        let cs = simulate(2);
        let es = true_eigen(2, 1);
        let d = cs.design(DesignKind::SingleFri).unwrap();
        let spec = MeanSpec::parse("t + t:a").unwrap();
        let famm = fit_famm(&cs, &es, &d, &spec, &MeanOptions::default(), &FammOptions::default()).unwrap();
        for p in [Process::B, Process::E] {
            let curves = famm.prediction.weights.curves_on_grid(&es, p);
            let colsum = curves.row_sum();
            assert!(colsum.amax() < 1e-6, "{p}: {}", colsum.amax());
        }
        for b in &famm.bands {
            assert!(((b.hi - b.est) - (b.est - b.lo)).abs() < 1e-12);
            assert!(b.hi >= b.lo);
        }
    }

    /// Dense joint solve of the penalized system, optionally with the
    /// sum-to-zero rows appended as a KKT system.
    fn dense_oracle(cs: &CurveSet, es: &EigenSystem, spec: &MeanSpec, opts: &MeanOptions, lambdas: &[f64], constrain: bool) -> DVector<f64> {
        let d = cs.design(DesignKind::SingleFri).unwrap();
        let md = MeanDesign::new(spec, cs.domain(), opts).unwrap();
        let bound = md.bind(cs.covariate_names()).unwrap();
        let sys = build_blup_system(cs, es, &d).unwrap();
        let pm = md.ncols();
        let nw = sys.n_weights();
        let n = cs.n_points();
        let mut x = DMatrix::zeros(n, pm + nw);
        let curves = cs.point_curves();
        let mut row = crate::basis::SparseRow::default();
        for a in 0..n {
            row.clear();
            let mult = MeanDesign::multipliers(&bound, cs.covariates(curves[a]));
            md.push_row(&mut row, 0, cs.t()[a], &mult).unwrap();
            for (&j, &v) in row.idx.iter().zip(&row.val) {
                x[(a, j)] = v;
            }
        }
        x.view_mut((0, pm), (n, nw)).copy_from(&sys.dense_phi());
        let mut m = x.transpose() * &x;
        for (p, term) in md.terms.iter().enumerate() {
            let s = crate::basis::difference_penalty(term.basis.n_basis(), term.penalty_order).unwrap().matrix;
            let o = md.term_offset(p);
            let k = s.nrows();
            let mut blk = m.view_mut((o, o), (k, k));
            blk += s * lambdas[p];
        }
        let g = sys.g_diag();
        for i in 0..nw {
            m[(pm + i, pm + i)] += sys.sigma2 / g[i];
        }
        let y = DVector::from_column_slice(cs.y());
        let rhs = x.transpose() * y;
        if !constrain {
            return m.lu().solve(&rhs).unwrap();
        }
        let mut rows = Vec::new();
        for xp in 0..3 {
            if sys.levels[xp] < 2 {
                continue;
            }
            for k in 0..sys.counts[xp] {
                let mut c = DVector::zeros(pm + nw);
                for l in 0..sys.levels[xp] {
                    c[pm + sys.column(xp, l, k)] = 1.0;
                }
                rows.push(c);
            }
        }
        let dim = pm + nw;
        let mc = rows.len();
        let mut kkt = DMatrix::zeros(dim + mc, dim + mc);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(&m);
        for (i, c) in rows.iter().enumerate() {
            for j in 0..dim {
                kkt[(dim + i, j)] = c[j];
                kkt[(j, dim + i)] = c[j];
            }
        }
        let mut r = DVector::zeros(dim + mc);
        r.rows_mut(0, dim).copy_from(&rhs);
        kkt.lu().solve(&r).unwrap().rows(0, dim).into_owned()
    }

    fn joint_coefficients(f: &FammFit) -> DVector<f64> {
        let m = f.mean.stacked();
        let w = f.prediction.weights.stacked();
        DVector::from_iterator(m.len() + w.len(), m.iter().chain(w.iter()).cloned())
    }

    #[test]
    fn matches_dense_joint_solve() {
        let cs = simulate(3);
        let es = true_eigen(2, 1);
        let d = cs.design(DesignKind::SingleFri).unwrap();
        let spec = MeanSpec::parse("t + t:a").unwrap();
        let opts = MeanOptions::default();
        for constrain in [false, true] {
            let famm = fit_famm(&cs, &es, &d, &spec, &opts, &FammOptions { constrain, ..Default::default() }).unwrap();
            let oracle = dense_oracle(&cs, &es, &spec, &opts, &famm.mean.lambdas, constrain);
            let got = joint_coefficients(&famm);
            let rel = (&got - &oracle).amax() / oracle.amax();
            assert!(rel < 1e-8, "constrain={constrain}: {rel}");
        }
    }

    #[test]
    fn weights_without_mean_match_eblup() {
        // given the joint mean, the unconstrained weights solve the EBLUP
        // problem on the centered data
        let cs = simulate(5);
        let es = true_eigen(2, 1);
        let d = cs.design(DesignKind::SingleFri).unwrap();
        let spec = MeanSpec::parse("t + t:a").unwrap();
        let famm = fit_famm(
            &cs,
            &es,
            &d,
            &spec,
            &MeanOptions::default(),
            &FammOptions { constrain: false, ..Default::default() },
        )
        .unwrap();
        let centered = cs.center_responses(&famm.mean).unwrap();
        let sys = build_blup_system(&centered, &es, &d).unwrap();
        let (w, _) = predict_eblup(&sys, centered.y()).unwrap();
        let diff = (w.stacked() - famm.prediction.weights.stacked()).amax();
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn unknown_covariate_rejected() {
        let cs = simulate(4);
        let es = true_eigen(1, 1);
        let d = cs.design(DesignKind::SingleFri).unwrap();
        let spec = MeanSpec::parse("t + t:zzz").unwrap();
        assert!(fit_famm(&cs, &es, &d, &spec, &MeanOptions::default(), &FammOptions::default()).is_err());
    }
}
