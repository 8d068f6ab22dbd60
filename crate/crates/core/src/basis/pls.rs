//! Penalized least squares with smoothing-parameter selection.
//!
//! Minimizes `‖y − Xθ‖² + Σ_m λ_m θ_mᵀ S_m θ_m` where each penalty acts on a
//! disjoint block of coefficients. Smoothing parameters marked for selection
//! are chosen by the profiled restricted likelihood of the equivalent mixed
//! model (or GCV), searched on a normalized log scale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::normal::NormalEquations;
use super::penalty::{difference_operator, PenaltyMatrix};
use crate::error::{FlmmError, Result};
use crate::linalg::{logdet_plus, SolveMethod, SymFactor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Smoothing {
    /// Raw smoothing parameter.
    Fixed(f64),
    /// Log smoothing parameter relative to the block's data/penalty trace ratio.
    FixedLog(f64),
    Select,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Reml,
    Gcv,
}

/// A penalty applied to columns `start..start + penalty.dim()`.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub start: usize,
    pub penalty: PenaltyMatrix,
    pub smoothing: Smoothing,
}

impl PenaltyBlock {
    pub fn new(start: usize, penalty: PenaltyMatrix, smoothing: Smoothing) -> Self {
        PenaltyBlock {
            start,
            penalty,
            smoothing,
        }
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.penalty.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlsOptions {
    pub criterion: Criterion,
    /// Search interval for the normalized log smoothing parameter.
    pub log_lambda_range: (f64, f64),
    /// Grid step of the initial scan before golden-section refinement.
    pub grid_step: f64,
    /// Coordinate-descent sweeps when several parameters are selected.
    pub sweeps: usize,
}

impl Default for PlsOptions {
    fn default() -> Self {
        PlsOptions {
            criterion: Criterion::Reml,
            log_lambda_range: (-12.0, 12.0),
            grid_step: 0.5,
            sweeps: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenalizedLsFit {
    pub coefficients: DVector<f64>,
    /// Smoothing parameter actually applied to each penalty block.
    pub lambdas: Vec<f64>,
    pub edf: f64,
    pub rss: f64,
    /// Residual variance `rss / (n − edf)`.
    pub sigma2: f64,
    /// REML scale estimate `D_p / (n − M_p)`.
    pub reml_scale: f64,
    /// `(XᵀX + S_λ)⁻¹`; multiply by a variance for the coefficient covariance.
    pub unscaled_cov: DMatrix<f64>,
    pub criterion: Criterion,
    pub criterion_value: f64,
    pub method: SolveMethod,
    pub n: usize,
}

impl PenalizedLsFit {
    /// `σ̂² (XᵀX + S_λ)⁻¹`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.unscaled_cov * self.sigma2
    }
}

/// Penalized least squares on an explicit design matrix.
pub fn solve_penalized_ls(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    penalties: &[PenaltyBlock],
    opts: &PlsOptions,
) -> Result<PenalizedLsFit> {
    if x.nrows() != y.len() {
        return Err(FlmmError::Dimension(format!("X has {} rows, y has {}", x.nrows(), y.len())));
    }
    let mut fit = solve_penalized_normal(&NormalEquations::from_dense(x, y), penalties, opts)?;
    if fit.method == SolveMethod::Cholesky {
        // Re-solve the final coefficients from the augmented system by QR;
        // forming XᵀX + λS loses accuracy when λ is very large.
        if let Some(theta) = augmented_qr(x, y, penalties, &fit.lambdas) {
            let r = y - x * &theta;
            fit.rss = r.norm_squared();
            fit.coefficients = theta;
        }
    }
    Ok(fit)
}

/// Rows `√λ R` with `RᵀR = S` for every block.
fn penalty_root(block: &PenaltyBlock) -> DMatrix<f64> {
    if let Some(d) = block.penalty.order {
        if let Ok(delta) = difference_operator(block.penalty.dim(), d) {
            return delta;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(block.penalty.matrix.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn augmented_qr(x: &DMatrix<f64>, y: &DVector<f64>, penalties: &[PenaltyBlock], lambdas: &[f64]) -> Option<DVector<f64>> {
    let p = x.ncols();
    let roots: Vec<(usize, DMatrix<f64>)> = penalties
        .iter()
        .zip(lambdas)
        .filter(|(_, l)| **l > 0.0)
        .map(|(b, l)| (b.start, penalty_root(b) * l.sqrt()))
        .collect();
    let extra: usize = roots.iter().map(|(_, r)| r.nrows()).sum();
    let n = x.nrows() + extra;
    if n < p {
        return None;
    }
    // heavily weighted penalty rows first keeps Householder QR stable
    let mut a = DMatrix::zeros(n, p);
    let mut rhs = DVector::zeros(n);
    let mut row = 0;
    for (start, r) in &roots {
        a.view_mut((row, *start), (r.nrows(), r.ncols())).copy_from(r);
        row += r.nrows();
    }
    a.view_mut((row, 0), (x.nrows(), p)).copy_from(x);
    rhs.rows_mut(row, x.nrows()).copy_from(y);
    let qr = a.qr();
    let qty = qr.q().transpose() * rhs;
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    if r.diagonal().iter().any(|d| d.abs() <= 1e-12 * diag_max) {
        return None;
    }
    r.solve_upper_triangular(&qty.rows(0, p).into_owned())
}

/// Precomputed pieces of the criterion that do not depend on λ.
struct Problem<'a> {
    ne: &'a NormalEquations,
    blocks: &'a [PenaltyBlock],
    block_logdet: Vec<f64>,
    block_rank: Vec<usize>,
    scale: Vec<f64>,
    criterion: Criterion,
}

struct Evaluation {
    value: f64,
    coefficients: DVector<f64>,
    factor: SymFactor,
    dp: f64,
    rss: f64,
    mp: usize,
}

impl<'a> Problem<'a> {
    fn new(ne: &'a NormalEquations, blocks: &'a [PenaltyBlock], criterion: Criterion) -> Result<Self> {
        let p = ne.ncols();
        let mut used = vec![false; p];
        for b in blocks {
            if b.range().end > p {
                return Err(FlmmError::Dimension(format!(
                    "penalty block {:?} exceeds {p} columns",
                    b.range()
                )));
            }
            for j in b.range() {
                if used[j] {
                    return Err(FlmmError::Config("penalty blocks overlap".into()));
                }
                used[j] = true;
            }
        }
        let mut block_logdet = Vec::with_capacity(blocks.len());
        let mut block_rank = Vec::with_capacity(blocks.len());
        let mut scale = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (ld, rank) = logdet_plus(&b.penalty.matrix);
            block_logdet.push(ld);
            block_rank.push(rank);
            let r = b.range();
            let data_trace: f64 = r.clone().map(|j| ne.xtx[(j, j)]).sum();
            let pen_trace = b.penalty.matrix.trace();
            scale.push(if data_trace > 0.0 && pen_trace > 0.0 {
                data_trace / pen_trace
            } else {
                1.0
            });
        }
        Ok(Problem {
            ne,
            blocks,
            block_logdet,
            block_rank,
            scale,
            criterion,
        })
    }

    fn lambda(&self, m: usize, rho: f64) -> f64 {
        self.scale[m] * rho.exp()
    }

    fn evaluate(&self, lambdas: &[f64]) -> Evaluation {
        let ne = self.ne;
        let p = ne.ncols();
        let mut a = ne.xtx.clone();
        for (b, &lam) in self.blocks.iter().zip(lambdas) {
            if lam == 0.0 {
                continue;
            }
            let s = b.start;
            let k = b.penalty.dim();
            let mut view = a.view_mut((s, s), (k, k));
            view += &b.penalty.matrix * lam;
        }
        let factor = SymFactor::new(&a);
        let theta = factor.solve(&ne.xty);
        let fit_term = theta.dot(&ne.xty);
        let quad = theta.dot(&(&ne.xtx * &theta));
        let rss = (ne.yty - 2.0 * fit_term + quad).max(0.0);
        let dp = (ne.yty - fit_term).max(0.0);
        let mut rank_s = 0;
        let mut logdet_s = 0.0;
        for (m, &lam) in lambdas.iter().enumerate() {
            if lam > 0.0 && self.block_rank[m] > 0 {
                rank_s += self.block_rank[m];
                logdet_s += self.block_rank[m] as f64 * lam.ln() + self.block_logdet[m];
            }
        }
        let mp = p - rank_s;
        let n = ne.n as f64;
        let value = match self.criterion {
            Criterion::Reml => {
                let dof = (n - mp as f64).max(1.0);
                let floor = 1e-300_f64.max(1e-14 * ne.yty);
                dof * dp.max(floor).ln() + factor.logdet() - logdet_s
            }
            Criterion::Gcv => {
                let edf = (factor.solve_mat(&ne.xtx)).trace();
                let denom = (n - edf).max(1e-8);
                n * rss / (denom * denom)
            }
        };
        Evaluation {
            value,
            coefficients: theta,
            factor,
            dp,
            rss,
            mp,
        }
    }
}

fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Penalized least squares from accumulated normal equations.
pub fn solve_penalized_normal(
    ne: &NormalEquations,
    penalties: &[PenaltyBlock],
    opts: &PlsOptions,
) -> Result<PenalizedLsFit> {
    let problem = Problem::new(ne, penalties, opts.criterion)?;
    let (lo, hi) = opts.log_lambda_range;
    let select: Vec<usize> = penalties
        .iter()
        .enumerate()
        .filter(|(_, b)| matches!(b.smoothing, Smoothing::Select))
        .map(|(m, _)| m)
        .collect();

    let mut rho: Vec<f64> = vec![0.0; penalties.len()];
    let mut lambdas: Vec<f64> = penalties
        .iter()
        .enumerate()
        .map(|(m, b)| match b.smoothing {
            Smoothing::Fixed(l) => l,
            Smoothing::FixedLog(r) => problem.lambda(m, r),
            Smoothing::Select => problem.lambda(m, 0.0),
        })
        .collect();
    if let Some((m, l)) = lambdas.iter().enumerate().find(|(_, l)| !l.is_finite() || **l < 0.0) {
        return Err(FlmmError::Config(format!("smoothing parameter {m} is {l}")));
    }

    if !select.is_empty() && ne.yty > 0.0 {
        let sweeps = if select.len() == 1 { 1 } else { opts.sweeps.max(1) };
        let steps = ((hi - lo) / opts.grid_step).round().max(1.0) as usize;
        for _ in 0..sweeps {
            for &m in &select {
                let mut trial = lambdas.clone();
                let mut crit = |r: f64| {
                    trial[m] = problem.lambda(m, r);
                    problem.evaluate(&trial).value
                };
                let mut best = (rho[m], f64::INFINITY);
                for s in 0..=steps {
                    let r = lo + (hi - lo) * s as f64 / steps as f64;
                    let v = crit(r);
                    if v < best.1 {
                        best = (r, v);
                    }
                }
                let a = (best.0 - opts.grid_step).max(lo);
                let b = (best.0 + opts.grid_step).min(hi);
                let refined = golden_section(&mut crit, a, b, 1e-8);
                if refined.1 <= best.1 {
                    best = refined;
                }
                rho[m] = best.0;
                lambdas[m] = problem.lambda(m, best.0);
            }
        }
    }

    let eval = problem.evaluate(&lambdas);
    let edf = eval.factor.solve_mat(&ne.xtx).trace();
    let n = ne.n as f64;
    let sigma2 = if n - edf > 0.5 { eval.rss / (n - edf) } else { 0.0 };
    let reml_scale = if n > eval.mp as f64 {
        eval.dp / (n - eval.mp as f64)
    } else {
        0.0
    };
    Ok(PenalizedLsFit {
        coefficients: eval.coefficients,
        lambdas,
        edf,
        rss: eval.rss,
        sigma2,
        reml_scale,
        unscaled_cov: eval.factor.inverse(),
        criterion: opts.criterion,
        criterion_value: eval.value,
        method: eval.factor.method(),
        n: ne.n,
    })
}

/// Criterion value at explicit smoothing parameters (exposed for diagnostics
/// and tests of the selector).
pub fn criterion_at(ne: &NormalEquations, penalties: &[PenaltyBlock], lambdas: &[f64], criterion: Criterion) -> Result<f64> {
    let problem = Problem::new(ne, penalties, criterion)?;
    Ok(problem.evaluate(lambdas).value)
}

/// The normalization applied to block `m`: `λ = scale · exp(ρ)`.
pub fn lambda_scale(ne: &NormalEquations, penalties: &[PenaltyBlock]) -> Result<Vec<f64>> {
    Ok(Problem::new(ne, penalties, Criterion::Reml)?.scale)
}
