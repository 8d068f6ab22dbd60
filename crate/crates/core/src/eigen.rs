//! Eigen decomposition of the estimated auto-covariances, truncation by
//! explained variance and the variance decomposition report.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covfit::CovarianceFit;
use crate::error::{FlmmError, Result};
use crate::fdata::{fmt_f64, Process};
use crate::linalg::{jacobi_eigen, symmetrize};

/// `d` cell-centred points on `domain`, spacing `|T| / d`.
pub fn eval_grid(domain: (f64, f64), d: usize) -> Vec<f64> {
    let h = (domain.1 - domain.0) / d as f64;
    (0..d).map(|i| domain.0 + (i as f64 + 0.5) * h).collect()
}

/// How many components to keep per process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Truncation {
    /// Greedy selection until the explained share reaches the level.
    Level(f64),
    /// Fixed counts for (B, C, E).
    Fixed([usize; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessEigen {
    pub process: Process,
    /// All positive eigenvalues, descending.
    pub values: Vec<f64>,
    /// Eigenfunctions on the grid, one column per value.
    pub functions: DMatrix<f64>,
    /// Truncation lag `N^X`.
    pub retained: usize,
}

impl ProcessEigen {
    pub fn retained_values(&self) -> &[f64] {
        &self.values[..self.retained]
    }

    pub fn retained_functions(&self) -> DMatrix<f64> {
        self.functions.columns(0, self.retained).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    pub domain: (f64, f64),
    pub grid: Vec<f64>,
    /// Grid spacing `a`.
    pub spacing: f64,
    pub processes: Vec<ProcessEigen>,
    pub sigma2: f64,
    pub truncation: Truncation,
}

/// Decomposes every surface of a covariance fit on a `d`-point grid.
pub fn decompose(fit: &CovarianceFit, d: usize, truncation: Truncation) -> Result<EigenSystem> {
    if d < 10 {
        return Err(FlmmError::OutOfDomain {
            name: "grid size",
            value: d as f64,
            domain: ">= 10".into(),
        });
    }
    let grid = eval_grid(fit.domain, d);
    let surfaces = fit
        .surfaces
        .iter()
        .map(|(p, _)| Ok((*p, fit.evaluate_surface(*p, &grid)?)))
        .collect::<Result<Vec<_>>>()?;
    decompose_matrices(fit.domain, &surfaces, fit.sigma2, truncation)
}

/// Decomposes surfaces already evaluated on the cell-centred grid of
/// `domain` (grid size taken from the matrices).
pub fn decompose_matrices(
    domain: (f64, f64),
    surfaces: &[(Process, DMatrix<f64>)],
    sigma2: f64,
    truncation: Truncation,
) -> Result<EigenSystem> {
    if let Truncation::Level(l) = truncation {
        if !(l > 0.0 && l <= 1.0) {
            return Err(FlmmError::OutOfDomain {
                name: "explained-variance level",
                value: l,
                domain: "(0, 1]".into(),
            });
        }
    }
    let d = surfaces.first().map(|(_, m)| m.nrows()).unwrap_or(0);
    if surfaces.iter().any(|(_, m)| m.nrows() != d || m.ncols() != d) {
        return Err(FlmmError::Dimension("surfaces must share one square grid".into()));
    }
    if d < 2 {
        return Err(FlmmError::Dimension("grid needs at least two points".into()));
    }
    let grid = eval_grid(domain, d);
    let a = (domain.1 - domain.0) / d as f64;
    let processes: Vec<ProcessEigen> = surfaces
        .par_iter()
        .map(|(p, k)| decompose_one(*p, k, a))
        .collect();
    if processes.iter().all(|p| p.values.is_empty()) {
        return Err(FlmmError::NoSignal);
    }
    let mut es = EigenSystem {
        domain,
        grid,
        spacing: a,
        processes,
        sigma2: sigma2.max(0.0),
        truncation,
    };
    es.apply_truncation(truncation)?;
    Ok(es)
}

fn decompose_one(process: Process, k: &DMatrix<f64>, a: f64) -> ProcessEigen {
    let (vals, vecs) = jacobi_eigen(&symmetrize(k));
    let scale = 1.0 / a.sqrt();
    let mut values = Vec::new();
    let mut cols = Vec::new();
    for (i, &v) in vals.iter().enumerate() {
        // negative eigenvalues are trimmed
        if v <= 0.0 {
            continue;
        }
        let mut col = vecs.column(i) * scale;
        let big = col.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            col = -col;
        }
        values.push(a * v);
        cols.push(col);
    }
    let functions = if cols.is_empty() {
        DMatrix::zeros(k.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    ProcessEigen {
        process,
        values,
        functions,
        retained: 0,
    }
}

/// Greedy selection across processes by descending eigenvalue (ties B, C,
/// E) until `(Σ selected + σ²|T|) / total ≥ level`. `total` includes any
/// eigenvalue mass not listed in `values`.
pub fn select_components(values: [&[f64]; 3], sigma_term: f64, total: f64, level: f64) -> [usize; 3] {
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for (p, vs) in values.iter().enumerate() {
        cand.extend(vs.iter().map(|v| (*v, p)));
    }
    // stable sort keeps B, C, E order on ties and within-process order
    cand.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut counts = [0usize; 3];
    let mut acc = sigma_term;
    for (v, p) in cand {
        if total > 0.0 && acc / total >= level {
            break;
        }
        acc += v;
        counts[p] += 1;
    }
    counts
}

impl EigenSystem {
    pub fn domain_length(&self) -> f64 {
        self.domain.1 - self.domain.0
    }

    pub fn get(&self, p: Process) -> Option<&ProcessEigen> {
        self.processes.iter().find(|e| e.process == p)
    }

    pub fn retained(&self, p: Process) -> usize {
        self.get(p).map_or(0, |e| e.retained)
    }

    pub fn total_retained(&self) -> usize {
        self.processes.iter().map(|e| e.retained).sum()
    }

    /// Sum of all eigenvalues plus `σ²|T|`.
    pub fn total_variance(&self) -> f64 {
        self.processes.iter().flat_map(|e| e.values.iter()).sum::<f64>() + self.sigma2 * self.domain_length()
    }

    pub fn apply_truncation(&mut self, truncation: Truncation) -> Result<()> {
        let counts = match truncation {
            Truncation::Level(level) => {
                let empty: &[f64] = &[];
                let mut vals = [empty; 3];
                for e in &self.processes {
                    vals[e.process.index()] = &e.values;
                }
                select_components(vals, self.sigma2 * self.domain_length(), self.total_variance(), level)
            }
            Truncation::Fixed(c) => c,
        };
        for e in &mut self.processes {
            let want = counts[e.process.index()];
            if want > e.values.len() {
                log::warn!(
                    "requested {want} components for {} but only {} positive eigenvalues",
                    e.process,
                    e.values.len()
                );
            }
            e.retained = want.min(e.values.len());
        }
        self.truncation = truncation;
        Ok(())
    }

    /// Linear interpolation of the retained eigenfunctions of `p` onto `ts`
    /// (`len(ts) x N^X`). Points between the domain ends and the outermost
    /// grid points use the boundary segment.
    pub fn interpolate(&self, p: Process, ts: &[f64]) -> Result<DMatrix<f64>> {
        let e = self
            .get(p)
            .ok_or_else(|| FlmmError::Config(format!("process {p} is not part of the eigen system")))?;
        let n = e.retained;
        let mut out = DMatrix::zeros(ts.len(), n);
        if n == 0 {
            return Ok(out);
        }
        let d = self.grid.len();
        let g0 = self.grid[0];
        for (r, &t) in ts.iter().enumerate() {
            if !(t >= self.domain.0 && t <= self.domain.1) {
                return Err(FlmmError::OutOfDomain {
                    name: "t",
                    value: t,
                    domain: format!("[{}, {}]", self.domain.0, self.domain.1),
                });
            }
            let pos = (t - g0) / self.spacing;
            let lo = (pos.floor().max(0.0) as usize).min(d - 2);
            let w = pos - lo as f64;
            for c in 0..n {
                out[(r, c)] = (1.0 - w) * e.functions[(lo, c)] + w * e.functions[(lo + 1, c)];
            }
        }
        Ok(out)
    }

    pub fn variance_decomposition(&self) -> VarianceDecomposition {
        variance_decomposition(self)
    }

    /// CSV with a `t` column and one column per retained component (`B1`, ...).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        for e in &self.processes {
            for k in 0..e.retained {
                header.push(format!("{}{}", e.process, k + 1));
            }
        }
        w.write_record(&header)?;
        for (i, t) in self.grid.iter().enumerate() {
            let mut rec = vec![fmt_f64(*t)];
            for e in &self.processes {
                for k in 0..e.retained {
                    rec.push(fmt_f64(e.functions[(i, k)]));
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentShare {
    pub process: Process,
    pub k: usize,
    pub eigenvalue: f64,
    pub share: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub components: Vec<ComponentShare>,
    pub sigma2_term: f64,
    pub sigma2_share: f64,
    pub total: f64,
    pub explained: f64,
}

impl VarianceDecomposition {
    pub fn share_sum(&self) -> f64 {
        self.components.iter().map(|c| c.share).sum::<f64>() + self.sigma2_share
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Shares of every computed eigenvalue and of `σ²|T|` in the total.
pub fn variance_decomposition(es: &EigenSystem) -> VarianceDecomposition {
    let total = es.total_variance();
    let sigma2_term = es.sigma2 * es.domain_length();
    let share = |v: f64| if total > 0.0 { v / total } else { 0.0 };
    let mut components = Vec::new();
    let mut explained = share(sigma2_term);
    for e in &es.processes {
        for (k, &v) in e.values.iter().enumerate() {
            let retained = k < e.retained;
            if retained {
                explained += share(v);
            }
            components.push(ComponentShare {
                process: e.process,
                k: k + 1,
                eigenvalue: v,
                share: share(v),
                retained,
            });
        }
    }
    VarianceDecomposition {
        components,
        sigma2_term,
        sigma2_share: share(sigma2_term),
        total,
        explained,
    }
}
