use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FlmmError, Result};

/// Symmetric positive semi-definite roughness penalty `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    /// Difference order; `None` for penalties not built from differences.
    pub order: Option<usize>,
    pub matrix: DMatrix<f64>,
}

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Isotropic tensor-product penalty `S_t ⊗ S_t'`.
    pub fn tensor(a: &PenaltyMatrix, b: &PenaltyMatrix) -> PenaltyMatrix {
        PenaltyMatrix {
            order: None,
            matrix: a.matrix.kronecker(&b.matrix),
        }
    }

    /// Diagonal penalty, e.g. an inverse prior variance.
    pub fn diagonal(values: &[f64]) -> PenaltyMatrix {
        PenaltyMatrix {
            order: None,
            matrix: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values)),
        }
    }
}

/// `d`-th order difference operator as a `(k - d) x k` matrix.
pub fn difference_operator(k: usize, d: usize) -> Result<DMatrix<f64>> {
    if d == 0 || k <= d {
        return Err(FlmmError::Config(format!(
            "difference penalty needs K > d >= 1, got K = {k}, d = {d}"
        )));
    }
    let mut delta = DMatrix::<f64>::identity(k, k);
    for _ in 0..d {
        let rows = delta.nrows() - 1;
        delta = DMatrix::from_fn(rows, k, |i, j| delta[(i + 1, j)] - delta[(i, j)]);
    }
    Ok(delta)
}

/// `S = Δ_dᵀ Δ_d` for `k` coefficients.
pub fn difference_penalty(k: usize, d: usize) -> Result<PenaltyMatrix> {
    let delta = difference_operator(k, d)?;
    Ok(PenaltyMatrix {
        order: Some(d),
        matrix: delta.transpose() * delta,
    })
}
