//! Dense symmetric linear algebra shared by the smoothing, prediction and
//! eigen steps.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// How a symmetric system ended up being solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveMethod {
    Cholesky,
    /// Cholesky after adding `1e-10 * trace / n` to the diagonal.
    Ridge,
    /// Moore-Penrose inverse with relative eigenvalue cutoff `1e-10`.
    PseudoInverse,
}

impl SolveMethod {
    pub fn is_degraded(self) -> bool {
        !matches!(self, SolveMethod::Cholesky)
    }
}

const PIVOT_RATIO: f64 = 1e-13;
const RIDGE_FACTOR: f64 = 1e-10;
const PINV_CUTOFF: f64 = 1e-10;

/// Factorization of a symmetric positive semi-definite matrix.
#[derive(Debug, Clone)]
pub struct SymFactor {
    kind: FactorKind,
    method: SolveMethod,
    dim: usize,
}

#[derive(Debug, Clone)]
enum FactorKind {
    Chol(Cholesky<f64, Dyn>),
    Pinv { inverse: DMatrix<f64>, logdet: f64 },
}

fn well_conditioned(chol: &Cholesky<f64, Dyn>) -> bool {
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min.is_finite() && min > PIVOT_RATIO * max
}

impl SymFactor {
    /// Factorizes `a`, escalating from Cholesky to a ridge-jittered Cholesky to
    /// the generalized inverse when the matrix is (near) singular.
    pub fn new(a: &DMatrix<f64>) -> SymFactor {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "SymFactor requires a square matrix");
        if n == 0 {
            return SymFactor {
                kind: FactorKind::Pinv {
                    inverse: DMatrix::zeros(0, 0),
                    logdet: 0.0,
                },
                method: SolveMethod::Cholesky,
                dim: 0,
            };
        }
        if let Some(chol) = Cholesky::new(a.clone()) {
            if well_conditioned(&chol) {
                return SymFactor {
                    kind: FactorKind::Chol(chol),
                    method: SolveMethod::Cholesky,
                    dim: n,
                };
            }
        }
        let trace: f64 = a.diagonal().iter().map(|v| v.abs()).sum();
        let jitter = RIDGE_FACTOR * trace / n as f64;
        if jitter > 0.0 {
            let mut ridged = a.clone();
            for i in 0..n {
                ridged[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(ridged) {
                if well_conditioned(&chol) {
                    log::warn!("near-singular {n}x{n} system solved with ridge jitter {jitter:e}");
                    return SymFactor {
                        kind: FactorKind::Chol(chol),
                        method: SolveMethod::Ridge,
                        dim: n,
                    };
                }
            }
        }
        log::warn!("singular {n}x{n} system solved with the generalized inverse");
        let (inverse, logdet) = pinv_sym_with_logdet(a);
        SymFactor {
            kind: FactorKind::Pinv { inverse, logdet },
            method: SolveMethod::PseudoInverse,
            dim: n,
        }
    }

    pub fn method(&self) -> SolveMethod {
        self.method
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            FactorKind::Chol(c) => c.solve(b),
            FactorKind::Pinv { inverse, .. } => inverse * b,
        }
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.kind {
            FactorKind::Chol(c) => c.solve(b),
            FactorKind::Pinv { inverse, .. } => inverse * b,
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        match &self.kind {
            FactorKind::Chol(c) => c.inverse(),
            FactorKind::Pinv { inverse, .. } => inverse.clone(),
        }
    }

    /// Log-determinant (generalized, over retained eigenvalues, for the
    /// pseudo-inverse path).
    pub fn logdet(&self) -> f64 {
        match &self.kind {
            FactorKind::Chol(c) => c.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum(),
            FactorKind::Pinv { logdet, .. } => *logdet,
        }
    }
}

/// Moore-Penrose inverse of a symmetric matrix via its eigendecomposition.
pub fn pinv_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_sym_with_logdet(a).0
}

fn pinv_sym_with_logdet(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = a.nrows();
    let sym = symmetrize(a);
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cutoff = PINV_CUTOFF * max;
    let mut inv = DMatrix::zeros(n, n);
    let mut logdet = 0.0;
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > cutoff && ev > 0.0 {
            let v = eig.eigenvectors.column(k);
            inv += (v * v.transpose()) / ev;
            logdet += ev.ln();
        }
    }
    (inv, logdet)
}

/// Log of the product of the positive eigenvalues of a symmetric PSD matrix,
/// together with its numerical rank.
pub fn logdet_plus(a: &DMatrix<f64>) -> (f64, usize) {
    if a.nrows() == 0 {
        return (0.0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cutoff = 1e-9 * max;
    let mut logdet = 0.0;
    let mut rank = 0;
    for &ev in eig.eigenvalues.iter() {
        if ev > cutoff && ev > 0.0 {
            logdet += ev.ln();
            rank += 1;
        }
    }
    (logdet, rank)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigen-decomposition of a real symmetric matrix by the cyclic Jacobi method.
///
/// Sweeps until the off-diagonal Frobenius norm falls below `1e-12` relative to
/// the Frobenius norm of the input. Eigenvalues are returned in descending
/// order with eigenvectors as the matching columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "jacobi_eigen requires a square matrix");
    let mut m = symmetrize(a);
    let mut v = DMatrix::<f64>::identity(n, n);
    let total = m.norm();
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = DVector::from_iterator(n, order.iter().map(|&i| m[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    (values, vectors)
}
