//! Block-arrow normal equations: a dense block of shared columns (mean and
//! crossed random weights) bordered by small per-curve blocks that are
//! eliminated by Schur complements.

use nalgebra::{DMatrix, DVector};

use crate::basis::{NormalEquations, SparseRow};
use crate::linalg::SymFactor;

pub(crate) struct Block {
    /// Shared columns touched by this block's rows (sorted).
    pub idx: Vec<usize>,
    /// Cross products `X_Rᵀ X_E` restricted to `idx`.
    pub re: DMatrix<f64>,
    /// `X_Eᵀ X_E` plus its fixed penalty.
    pub ee: DMatrix<f64>,
    pub be: DVector<f64>,
}

pub(crate) struct Arrow {
    /// Shared-column statistics (unpenalized).
    pub shared: NormalEquations,
    pub blocks: Vec<Block>,
    pub q: usize,
}

pub(crate) struct Reduced {
    /// Schur-reduced statistics over the shared columns.
    pub ne: NormalEquations,
    pub factors: Vec<SymFactor>,
}

impl Arrow {
    /// `rows(a, row)` fills the shared-column entries of point `a`;
    /// `block_of[a]` and `e_vals(a)` give its curve block and block-row values.
    pub fn build(
        r: usize,
        q: usize,
        n_blocks: usize,
        y: &[f64],
        mut rows: impl FnMut(usize, &mut SparseRow),
        block_of: &[usize],
        e_vals: impl Fn(usize) -> Vec<f64>,
        e_penalty: &[f64],
    ) -> Arrow {
        let mut shared = NormalEquations::zeros(r);
        let mut row = SparseRow::with_capacity(r);
        let mut touched: Vec<Vec<usize>> = vec![Vec::new(); if q > 0 { n_blocks } else { 0 }];
        let mut cached: Vec<SparseRow> = Vec::with_capacity(if q > 0 { y.len() } else { 0 });
        for (a, &ya) in y.iter().enumerate() {
            row.clear();
            rows(a, &mut row);
            shared.add_row(&row, ya);
            if q > 0 {
                touched[block_of[a]].extend(row.idx.iter().cloned());
                cached.push(row.clone());
            }
        }
        let shared = shared.finish();
        let mut blocks: Vec<Block> = touched
            .into_iter()
            .map(|mut idx| {
                idx.sort_unstable();
                idx.dedup();
                let m = idx.len();
                Block {
                    idx,
                    re: DMatrix::zeros(m, q),
                    ee: DMatrix::from_diagonal(&DVector::from_column_slice(e_penalty)),
                    be: DVector::zeros(q),
                }
            })
            .collect();
        if q > 0 {
            for (a, &ya) in y.iter().enumerate() {
                let b = &mut blocks[block_of[a]];
                let e = e_vals(a);
                for k in 0..q {
                    b.be[k] += e[k] * ya;
                    for l in 0..q {
                        b.ee[(k, l)] += e[k] * e[l];
                    }
                }
                for (&c, &v) in cached[a].idx.iter().zip(&cached[a].val) {
                    let local = b.idx.binary_search(&c).expect("column recorded in first pass");
                    for k in 0..q {
                        b.re[(local, k)] += v * e[k];
                    }
                }
            }
        }
        Arrow { shared, blocks, q }
    }

    /// Eliminates the per-curve blocks.
    pub fn reduce(&self) -> Reduced {
        let mut ne = self.shared.clone();
        let mut factors = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let f = SymFactor::new(&b.ee);
            if !b.idx.is_empty() {
                let w = f.solve_mat(&b.re.transpose()); // q x m
                let upd = &b.re * &w;
                for (i, &gi) in b.idx.iter().enumerate() {
                    for (j, &gj) in b.idx.iter().enumerate() {
                        ne.xtx[(gi, gj)] -= upd[(i, j)];
                    }
                }
                let wb = f.solve(&b.be);
                let rb = &b.re * &wb;
                for (i, &gi) in b.idx.iter().enumerate() {
                    ne.xty[gi] -= rb[i];
                }
                ne.yty -= b.be.dot(&wb);
            } else {
                ne.yty -= b.be.dot(&f.solve(&b.be));
            }
            factors.push(f);
        }
        Reduced { ne, factors }
    }

    /// Per-block coefficients given the shared solution, for right-hand
    /// sides `rhs_e` (defaults to the data).
    pub fn back_substitute(&self, red: &Reduced, x_r: &DVector<f64>, rhs_e: Option<&[DVector<f64>]>) -> Vec<DVector<f64>> {
        self.blocks
            .iter()
            .zip(&red.factors)
            .enumerate()
            .map(|(c, (b, f))| {
                let mut rhs = match rhs_e {
                    Some(v) => v[c].clone(),
                    None => b.be.clone(),
                };
                for (i, &gi) in b.idx.iter().enumerate() {
                    for k in 0..self.q {
                        rhs[k] -= b.re[(i, k)] * x_r[gi];
                    }
                }
                f.solve(&rhs)
            })
            .collect()
    }

    /// `M⁻¹ v` for the full penalized matrix, given the inverse of the
    /// reduced shared block.
    pub fn solve_full(
        &self,
        red: &Reduced,
        shared_inverse: &DMatrix<f64>,
        v_r: &DVector<f64>,
        v_e: &[DVector<f64>],
    ) -> (DVector<f64>, Vec<DVector<f64>>) {
        let mut rhs = v_r.clone();
        for ((b, f), ve) in self.blocks.iter().zip(&red.factors).zip(v_e) {
            let w = f.solve(ve);
            let rw = &b.re * w;
            for (i, &gi) in b.idx.iter().enumerate() {
                rhs[gi] -= rw[i];
            }
        }
        let x_r = shared_inverse * rhs;
        let x_e = self.back_substitute(red, &x_r, Some(v_e));
        (x_r, x_e)
    }
}
