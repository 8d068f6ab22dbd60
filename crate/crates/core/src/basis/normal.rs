use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// One design row in sparse form (column indices need not be sorted but must
/// be distinct).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn with_capacity(n: usize) -> Self {
        SparseRow {
            idx: Vec::with_capacity(n),
            val: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, col: usize, v: f64) {
        self.idx.push(col);
        self.val.push(v);
    }

    pub fn clear(&mut self) {
        self.idx.clear();
        self.val.clear();
    }

    pub fn from_dense(row: &[f64]) -> Self {
        let mut r = SparseRow::with_capacity(row.len());
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 {
                r.push(j, v);
            }
        }
        r
    }

    pub fn dot(&self, coef: &DVector<f64>) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&j, &v)| coef[j] * v).sum()
    }
}

/// Sufficient statistics of a least-squares problem: `XᵀX`, `Xᵀy`, `yᵀy` and
/// the number of rows.
///
/// Row updates use compensated (Neumaier) summation so accumulated sums do
/// not depend on the row order beyond the last bit; [`NormalEquations::finish`]
/// folds the compensation terms in.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub n: usize,
    cxtx: DMatrix<f64>,
    cxty: DVector<f64>,
    cyty: f64,
}

#[inline]
fn neumaier(sum: &mut f64, comp: &mut f64, v: f64) {
    let t = *sum + v;
    if sum.abs() >= v.abs() {
        *comp += (*sum - t) + v;
    } else {
        *comp += (v - t) + *sum;
    }
    *sum = t;
}

impl NormalEquations {
    pub fn zeros(ncols: usize) -> Self {
        NormalEquations {
            xtx: DMatrix::zeros(ncols, ncols),
            xty: DVector::zeros(ncols),
            yty: 0.0,
            n: 0,
            cxtx: DMatrix::zeros(ncols, ncols),
            cxty: DVector::zeros(ncols),
            cyty: 0.0,
        }
    }

    /// Statistics assembled elsewhere.
    pub fn from_parts(xtx: DMatrix<f64>, xty: DVector<f64>, yty: f64, n: usize) -> Self {
        let p = xty.len();
        NormalEquations {
            xtx,
            xty,
            yty,
            n,
            cxtx: DMatrix::zeros(p, p),
            cxty: DVector::zeros(p),
            cyty: 0.0,
        }
    }

    pub fn ncols(&self) -> usize {
        self.xty.len()
    }

    pub fn from_dense(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        Self::from_parts(x.transpose() * x, x.transpose() * y, y.dot(y), x.nrows())
    }

    pub fn add_row(&mut self, row: &SparseRow, y: f64) {
        for (a, (&i, &vi)) in row.idx.iter().zip(&row.val).enumerate() {
            neumaier(&mut self.xty[i], &mut self.cxty[i], vi * y);
            for (&j, &vj) in row.idx[a..].iter().zip(&row.val[a..]) {
                let p = vi * vj;
                neumaier(&mut self.xtx[(i, j)], &mut self.cxtx[(i, j)], p);
                if i != j {
                    neumaier(&mut self.xtx[(j, i)], &mut self.cxtx[(j, i)], p);
                }
            }
        }
        neumaier(&mut self.yty, &mut self.cyty, y * y);
        self.n += 1;
    }

    pub fn add_dense_row(&mut self, row: &[f64], y: f64) {
        self.add_row(&SparseRow::from_dense(row), y);
    }

    /// Adds the statistics of another (disjoint) chunk of rows.
    pub fn merge(mut self, other: &NormalEquations) -> Self {
        for ((s, c), (o, oc)) in self
            .xtx
            .iter_mut()
            .zip(self.cxtx.iter_mut())
            .zip(other.xtx.iter().zip(other.cxtx.iter()))
        {
            neumaier(s, c, *o);
            *c += oc;
        }
        for ((s, c), (o, oc)) in self
            .xty
            .iter_mut()
            .zip(self.cxty.iter_mut())
            .zip(other.xty.iter().zip(other.cxty.iter()))
        {
            neumaier(s, c, *o);
            *c += oc;
        }
        neumaier(&mut self.yty, &mut self.cyty, other.yty);
        self.cyty += other.cyty;
        self.n += other.n;
        self
    }

    /// Folds the compensation terms into the sums.
    pub fn finish(mut self) -> Self {
        self.xtx += &self.cxtx;
        self.xty += &self.cxty;
        self.yty += self.cyty;
        self.cxtx.fill(0.0);
        self.cxty.fill(0.0);
        self.cyty = 0.0;
        self
    }
}

/// Streams `(row, response)` pairs into normal equations without
/// materializing the design matrix.
pub fn accumulate_normal_equations<I>(rows: I, ncols: usize) -> NormalEquations
where
    I: IntoIterator<Item = (SparseRow, f64)>,
{
    let mut ne = NormalEquations::zeros(ncols);
    for (row, y) in rows {
        ne.add_row(&row, y);
    }
    ne.finish()
}

/// Map-reduce variant: each chunk is accumulated independently and the
/// partial sums are added.
pub fn accumulate_chunks_parallel<T, F>(chunks: &[T], ncols: usize, fill: F) -> NormalEquations
where
    T: Sync,
    F: Fn(&T, &mut NormalEquations) + Sync,
{
    chunks
        .par_iter()
        .map(|chunk| {
            let mut ne = NormalEquations::zeros(ncols);
            fill(chunk, &mut ne);
            ne
        })
        .reduce(|| NormalEquations::zeros(ncols), |a, b| a.merge(&b))
        .finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_stream() {
        let ne = accumulate_normal_equations(std::iter::empty(), 3);
        assert_eq!(ne.n, 0);
        assert_eq!(ne.yty, 0.0);
        assert!(ne.xtx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_computed_rows() {
        let rows = vec![
            (SparseRow::from_dense(&[1.0, 2.0]), 1.0),
            (SparseRow::from_dense(&[0.0, 1.0]), 2.0),
            (SparseRow::from_dense(&[3.0, -1.0]), -1.0),
        ];
        let ne = accumulate_normal_equations(rows, 2);
        // XᵀX = [[1+0+9, 2+0-3], [2+0-3, 4+1+1]]
        assert_eq!(ne.xtx, DMatrix::from_row_slice(2, 2, &[10.0, -1.0, -1.0, 6.0]));
        // Xᵀy = [1 - 3, 2 + 2 + 1]
        assert_eq!(ne.xty, DVector::from_vec(vec![-2.0, 5.0]));
        assert_eq!(ne.yty, 6.0);
        assert_eq!(ne.n, 3);
    }

    #[test]
    fn chunking_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ncols = 6;
        let rows: Vec<(SparseRow, f64)> = (0..100_000)
            .map(|_| {
                let mut r = SparseRow::default();
                for j in 0..ncols {
                    if rng.random_bool(0.6) {
                        r.push(j, rng.random_range(-1.0..1.0));
                    }
                }
                (r, rng.random_range(-1.0..1.0))
            })
            .collect();
        let whole = accumulate_normal_equations(rows.iter().cloned(), ncols);
        let chunks: Vec<&[(SparseRow, f64)]> = rows.chunks(7_777).collect();
        let parts = accumulate_chunks_parallel(&chunks, ncols, |chunk, ne| {
            for (r, y) in chunk.iter().rev() {
                ne.add_row(r, *y);
            }
        });
        assert_eq!(parts.n, whole.n);
        let rel = (&parts.xtx - &whole.xtx).amax() / whole.xtx.amax();
        assert!(rel < 1e-9, "{rel}");
        assert!((&parts.xty - &whole.xty).amax() / whole.xty.amax() < 1e-9);
        assert!((parts.yty - whole.yty).abs() / whole.yty < 1e-9);
    }
}
