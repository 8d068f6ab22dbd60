//! Working-independence fit of the additive varying-coefficient mean
//! `μ(t, x) = f_0(t) + Σ_p f_p(t) x_p`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::{
    accumulate_chunks_parallel, difference_penalty, solve_penalized_normal, NormalEquations, PenaltyBlock,
    PlsOptions, Smoothing, SparseRow, SplineBasis,
};
use crate::error::{FlmmError, Result};
use crate::fdata::{fmt_f64, CurveSet};

/// Parsed mean formula such as `t + t:order + t:order:stress1`.
///
/// Each `+`-separated term is `t` (functional intercept) or `t:` followed by
/// one or more `:`-joined covariate names whose product multiplies `f_p(t)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanSpec {
    pub terms: Vec<Vec<String>>,
}

impl MeanSpec {
    pub fn intercept_only() -> Self {
        MeanSpec { terms: vec![vec![]] }
    }

    pub fn parse(spec: &str) -> Result<MeanSpec> {
        let mut terms = Vec::new();
        for raw in spec.split('+') {
            let parts: Vec<&str> = raw.trim().split(':').map(str::trim).collect();
            if parts.first() != Some(&"t") || parts.iter().any(|p| p.is_empty()) {
                return Err(FlmmError::Config(format!("cannot parse mean term '{}'", raw.trim())));
            }
            terms.push(parts[1..].iter().map(|s| s.to_string()).collect::<Vec<_>>());
        }
        if terms.is_empty() {
            return Err(FlmmError::Config("empty mean specification".into()));
        }
        Ok(MeanSpec { terms })
    }

    pub fn label(term: &[String]) -> String {
        if term.is_empty() {
            "t".to_string()
        } else {
            format!("t:{}", term.join(":"))
        }
    }
}

impl std::fmt::Display for MeanSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let labels: Vec<String> = self.terms.iter().map(|t| MeanSpec::label(t)).collect();
        f.write_str(&labels.join(" + "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanOptions {
    pub n_basis: usize,
    pub degree: usize,
    pub penalty_order: usize,
    /// Fixed log smoothing parameter (relative scale) for every term instead
    /// of selection.
    pub log_lambda: Option<f64>,
    pub pls: PlsOptions,
}

impl Default for MeanOptions {
    fn default() -> Self {
        MeanOptions {
            n_basis: 8,
            degree: 3,
            penalty_order: 3,
            log_lambda: None,
            pls: PlsOptions::default(),
        }
    }
}

/// One varying-coefficient term `f_p(t) · Π x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanTerm {
    pub label: String,
    pub covariates: Vec<String>,
    pub basis: SplineBasis,
    pub penalty_order: usize,
}

/// Column layout of the row-tensor mean design shared by the
/// working-independence and joint fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanDesign {
    pub terms: Vec<MeanTerm>,
    pub domain: (f64, f64),
}

fn resolve(names: &[String], wanted: &str) -> Option<usize> {
    names
        .iter()
        .position(|n| n == wanted)
        .or_else(|| names.iter().position(|n| *n == format!("x_{wanted}")))
}

impl MeanDesign {
    pub fn new(spec: &MeanSpec, domain: (f64, f64), opts: &MeanOptions) -> Result<MeanDesign> {
        let terms = spec
            .terms
            .iter()
            .map(|cov| {
                Ok(MeanTerm {
                    label: MeanSpec::label(cov),
                    covariates: cov.clone(),
                    basis: SplineBasis::new(domain, opts.n_basis, opts.degree)?,
                    penalty_order: opts.penalty_order,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MeanDesign { terms, domain })
    }

    pub fn ncols(&self) -> usize {
        self.terms.iter().map(|t| t.basis.n_basis()).sum()
    }

    pub fn term_offset(&self, p: usize) -> usize {
        self.terms[..p].iter().map(|t| t.basis.n_basis()).sum()
    }

    /// Indices of each term's covariates within `names`.
    pub fn bind(&self, names: &[String]) -> Result<Vec<Vec<usize>>> {
        self.terms
            .iter()
            .map(|term| {
                term.covariates
                    .iter()
                    .map(|c| {
                        resolve(names, c).ok_or_else(|| {
                            FlmmError::Dimension(format!("covariate '{c}' not present in {names:?}"))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Per-term multipliers `Π x` for one covariate row.
    pub fn multipliers(bound: &[Vec<usize>], x: &[f64]) -> Vec<f64> {
        bound.iter().map(|idx| idx.iter().map(|&i| x[i]).product()).collect()
    }

    /// Appends this design's entries for one point to `row`, shifting columns
    /// by `offset`.
    pub fn push_row(&self, row: &mut SparseRow, offset: usize, t: f64, mult: &[f64]) -> Result<()> {
        let mut col = offset;
        for (term, &m) in self.terms.iter().zip(mult) {
            if m != 0.0 {
                let (first, vals) = term.basis.eval_local(t)?;
                for (k, v) in vals.into_iter().enumerate() {
                    if v != 0.0 {
                        row.push(col + first + k, m * v);
                    }
                }
            }
            col += term.basis.n_basis();
        }
        Ok(())
    }

    /// Penalty blocks for all terms (columns shifted by `offset`).
    pub fn penalty_blocks(&self, offset: usize, smoothing: &[Smoothing]) -> Result<Vec<PenaltyBlock>> {
        self.terms
            .iter()
            .enumerate()
            .map(|(p, term)| {
                Ok(PenaltyBlock::new(
                    offset + self.term_offset(p),
                    difference_penalty(term.basis.n_basis(), term.penalty_order)?,
                    smoothing[p],
                ))
            })
            .collect()
    }
}

/// Fitted mean model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanModel {
    pub design: MeanDesign,
    /// Coefficients `θ^p`, one vector per term.
    pub coefficients: Vec<DVector<f64>>,
    pub lambdas: Vec<f64>,
    pub warnings: Vec<String>,
}

impl MeanModel {
    /// Model with all coefficients zero.
    pub fn zero(design: MeanDesign) -> MeanModel {
        let coefficients = design.terms.iter().map(|t| DVector::zeros(t.basis.n_basis())).collect();
        let lambdas = vec![0.0; design.terms.len()];
        MeanModel {
            design,
            coefficients,
            lambdas,
            warnings: vec![],
        }
    }

    /// Splits a stacked coefficient vector into terms.
    pub fn from_stacked(design: MeanDesign, theta: &[f64], lambdas: Vec<f64>) -> MeanModel {
        let mut coefficients = Vec::with_capacity(design.terms.len());
        let mut at = 0;
        for t in &design.terms {
            let k = t.basis.n_basis();
            coefficients.push(DVector::from_column_slice(&theta[at..at + k]));
            at += k;
        }
        MeanModel {
            design,
            coefficients,
            lambdas,
            warnings: vec![],
        }
    }

    pub fn n_terms(&self) -> usize {
        self.design.terms.len()
    }

    /// Columns: term, index, coefficient, lambda.
    pub fn write_coefficients_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["term", "index", "coefficient", "lambda"])?;
        for (p, c) in self.coefficients.iter().enumerate() {
            for (k, v) in c.iter().enumerate() {
                w.write_record([
                    self.design.terms[p].label.clone(),
                    k.to_string(),
                    fmt_f64(*v),
                    fmt_f64(self.lambdas.get(p).copied().unwrap_or(f64::NAN)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Columns: term, t, value.
    pub fn write_terms_csv(&self, path: impl AsRef<std::path::Path>, grid: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["term", "t", "value"])?;
        for p in 0..self.n_terms() {
            for (t, v) in grid.iter().zip(self.term_values(p, grid)?) {
                w.write_record([self.design.terms[p].label.clone(), fmt_f64(*t), fmt_f64(v)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn stacked(&self) -> DVector<f64> {
        let all: Vec<f64> = self.coefficients.iter().flat_map(|c| c.iter().cloned()).collect();
        DVector::from_vec(all)
    }

    /// `f_p(t)` on the given points.
    pub fn term_values(&self, p: usize, ts: &[f64]) -> Result<Vec<f64>> {
        let basis = &self.design.terms[p].basis;
        ts.iter()
            .map(|&t| {
                let (first, vals) = basis.eval_local(t)?;
                Ok(vals.iter().enumerate().map(|(k, v)| v * self.coefficients[p][first + k]).sum())
            })
            .collect()
    }

    /// `μ(t, x)` where `x` is a covariate row laid out as `names`.
    pub fn predict(&self, ts: &[f64], x: &[f64], names: &[String]) -> Result<Vec<f64>> {
        if x.len() != names.len() {
            return Err(FlmmError::Dimension(format!(
                "covariate row has {} entries, schema has {}",
                x.len(),
                names.len()
            )));
        }
        let bound = self.design.bind(names)?;
        let mult = MeanDesign::multipliers(&bound, x);
        self.predict_with(ts, &mult)
    }

    fn predict_with(&self, ts: &[f64], mult: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; ts.len()];
        for (p, &m) in mult.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.term_values(p, ts)?) {
                *o += m * v;
            }
        }
        Ok(out)
    }

    /// Fitted mean at every observation point of `cs`.
    pub fn predict_points(&self, cs: &CurveSet) -> Result<Vec<f64>> {
        let bound = self.design.bind(cs.covariate_names())?;
        let mut out = Vec::with_capacity(cs.n_points());
        for c in 0..cs.n_curves() {
            let mult = MeanDesign::multipliers(&bound, cs.covariates(c));
            out.extend(self.predict_with(cs.curve_t(c), &mult)?);
        }
        Ok(out)
    }
}

/// Builds the mean design for every point, then solves the penalized problem
/// with one smoothing parameter per term selected by the criterion in `opts`.
pub fn fit_mean(cs: &CurveSet, spec: &MeanSpec, opts: &MeanOptions) -> Result<MeanModel> {
    let design = MeanDesign::new(spec, cs.domain(), opts)?;
    let bound = design.bind(cs.covariate_names())?;
    let mut warnings = Vec::new();
    for (p, idx) in bound.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let first = MeanDesign::multipliers(&bound, cs.covariates(0))[p];
        let constant = (0..cs.n_curves()).all(|c| MeanDesign::multipliers(&bound, cs.covariates(c))[p] == first);
        if constant {
            let msg = format!(
                "covariate term '{}' is constant across curves and confounded with the intercept",
                design.terms[p].label
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let ncols = design.ncols();
    if cs.n_points() <= ncols {
        let msg = format!("only {} points for {} mean coefficients", cs.n_points(), ncols);
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let curves: Vec<usize> = (0..cs.n_curves()).collect();
    let chunks: Vec<&[usize]> = curves.chunks(256).collect();
    let failure = std::sync::Mutex::new(None);
    let ne: NormalEquations = accumulate_chunks_parallel(&chunks, ncols, |chunk, ne| {
        let mut row = SparseRow::with_capacity(ncols);
        for &c in chunk.iter() {
            let mult = MeanDesign::multipliers(&bound, cs.covariates(c));
            for (&t, &y) in cs.curve_t(c).iter().zip(cs.curve_y(c)) {
                row.clear();
                if let Err(e) = design.push_row(&mut row, 0, t, &mult) {
                    *failure.lock().unwrap() = Some(e);
                    return;
                }
                ne.add_row(&row, y);
            }
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let smoothing = vec![opts.log_lambda.map_or(Smoothing::Select, Smoothing::FixedLog); design.terms.len()];
    let blocks = design.penalty_blocks(0, &smoothing)?;
    let fit = solve_penalized_normal(&ne, &blocks, &opts.pls)?;
    if fit.method.is_degraded() {
        warnings.push(format!("mean normal equations solved via {:?}", fit.method));
    }
    let mut model = MeanModel::from_stacked(design, fit.coefficients.as_slice(), fit.lambdas);
    model.warnings = warnings;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdata::{CurveKey, CurveSetBuilder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn curves(names: Vec<String>, f: impl Fn(f64, &[f64]) -> f64, xs: &[Vec<f64>], per: usize, seed: u64) -> CurveSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = CurveSetBuilder::new(names);
        for (c, x) in xs.iter().enumerate() {
            let mut t: Vec<f64> = (0..per).map(|_| rng.random_range(0.0..1.0)).collect();
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let y: Vec<f64> = t.iter().map(|&t| f(t, x)).collect();
            b.push_curve(
                CurveKey {
                    g1: c,
                    g2: None,
                    rep: 0,
                },
                x.clone(),
                &t,
                &y,
            );
        }
        b.build(Some((0.0, 1.0))).unwrap()
    }

    #[test]
    fn parse_terms() {
        let s = MeanSpec::parse("t + t:order + t:order:stress1").unwrap();
        assert_eq!(s.terms, vec![vec![], vec!["order".to_string()], vec!["order".into(), "stress1".into()]]);
        assert_eq!(s.to_string(), "t + t:order + t:order:stress1");
        assert!(MeanSpec::parse("order").is_err());
        assert!(MeanSpec::parse("t + ").is_err());
    }

    #[test]
    fn constant_data_gives_constant_mean() {
        let cs = curves(vec![], |_, _| 4.2, &vec![vec![]; 5], 20, 1);
        let m = fit_mean(&cs, &MeanSpec::intercept_only(), &MeanOptions::default()).unwrap();
        let grid: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let v = m.term_values(0, &grid).unwrap();
        assert!(v.iter().all(|v| (v - 4.2).abs() < 1e-6), "{v:?}");
    }

    #[test]
    fn recovers_varying_coefficients() {
        let f0 = |t: f64| (2.0 * t).sin() + t;
        let f1 = |t: f64| 1.0 + (3.0 * t).cos();
        let xs: Vec<Vec<f64>> = (0..2).map(|i| vec![i as f64]).collect();
        let cs = curves(vec!["x_a".into()], |t, x| f0(t) + x[0] * f1(t), &xs, 400, 2);
        let spec = MeanSpec::parse("t + t:a").unwrap();
        let m = fit_mean(&cs, &spec, &MeanOptions::default()).unwrap();
        let grid: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        for (p, f) in [(0usize, &f0 as &dyn Fn(f64) -> f64), (1, &f1)] {
            let est = m.term_values(p, &grid).unwrap();
            let num: f64 = grid.iter().zip(&est).map(|(t, e)| (f(*t) - e).powi(2)).sum();
            let den: f64 = grid.iter().map(|t| f(*t).powi(2)).sum();
            assert!((num / den).sqrt() < 0.05, "term {p}: {}", (num / den).sqrt());
        }
    }

    #[test]
    fn predict_intercept_isolation_and_zero() {
        let cs = curves(vec!["x_a".into()], |t, x| t + x[0], &[vec![0.0], vec![1.0]], 30, 3);
        let spec = MeanSpec::parse("t + t:a").unwrap();
        let m = fit_mean(&cs, &spec, &MeanOptions::default()).unwrap();
        let ts = [0.1, 0.5, 0.9];
        let names = cs.covariate_names().to_vec();
        assert_eq!(m.predict(&ts, &[0.0], &names).unwrap(), m.term_values(0, &ts).unwrap());
        let zero = MeanModel::zero(m.design.clone());
        assert!(zero.predict(&ts, &[1.0], &names).unwrap().iter().all(|v| *v == 0.0));
        assert!(m.predict(&[1.5], &[0.0], &names).is_err());
        assert!(m.predict(&ts, &[0.0, 1.0], &names).is_err());
    }

    #[test]
    fn predict_matches_direct_summation() {
        let design = MeanDesign::new(&MeanSpec::parse("t + t:a + t:a:b").unwrap(), (0.0, 1.0), &MeanOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta: Vec<f64> = (0..design.ncols()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = MeanModel::from_stacked(design.clone(), &theta, vec![0.0; 3]);
        let names = vec!["a".to_string(), "b".to_string()];
        let x = [0.7, -1.3];
        let ts: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = m.predict(&ts, &x, &names).unwrap();
        let mult = [1.0, x[0], x[0] * x[1]];
        for (i, &t) in ts.iter().enumerate() {
            let mut direct = 0.0;
            for (p, term) in design.terms.iter().enumerate() {
                let row = term.basis.eval_row(t).unwrap();
                for k in 0..row.len() {
                    direct += mult[p] * row[k] * theta[design.term_offset(p) + k];
                }
            }
            assert!((got[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_data_leaves_mean_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b1 = CurveSetBuilder::new(vec![]);
        let mut b2 = CurveSetBuilder::new(vec![]);
        for c in 0..10 {
            let t: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = t.iter().map(|t| (5.0 * t).sin() + rng.random_range(-0.5..0.5)).collect();
            let key = CurveKey { g1: c, g2: None, rep: 0 };
            b1.push_curve(key, vec![], &t, &y);
            let t2: Vec<f64> = t.iter().chain(t.iter()).cloned().collect();
            let y2: Vec<f64> = y.iter().chain(y.iter()).cloned().collect();
            b2.push_curve(key, vec![], &t2, &y2);
        }
        let cs1 = b1.build(Some((0.0, 1.0))).unwrap();
        let cs2 = b2.build(Some((0.0, 1.0))).unwrap();
        // at a fixed relative smoothing level both criteria scale by two
        let opts = MeanOptions {
            log_lambda: Some(-1.5),
            ..MeanOptions::default()
        };
        let m1 = fit_mean(&cs1, &MeanSpec::intercept_only(), &opts).unwrap();
        let m2 = fit_mean(&cs2, &MeanSpec::intercept_only(), &opts).unwrap();
        let grid: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let a = m1.term_values(0, &grid).unwrap();
        let b = m2.term_values(0, &grid).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn centering_with_exact_mean() {
        let cs = curves(vec![], |t, _| (t * 3.0).sin(), &vec![vec![]; 3], 10, 8);
        let m = MeanModel::zero(MeanDesign::new(&MeanSpec::intercept_only(), (0.0, 1.0), &MeanOptions::default()).unwrap());
        let centered = cs.center_responses(&m).unwrap();
        assert_eq!(centered, cs);
    }
}
