//! Smooth method-of-moments estimation of the auto-covariances and the
//! error variance from cross-products of centered responses.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{
    accumulate_chunks_parallel, difference_penalty, solve_penalized_normal, NormalEquations, PenaltyBlock,
    PenaltyMatrix, PlsOptions, Smoothing, SparseRow, SplineBasis,
};
use crate::error::{FlmmError, Result};
use crate::fdata::{fmt_f64, CurveSet, DesignKind, GroupingDesign, Process};
use crate::linalg::{symmetrize, SolveMethod};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovOptions {
    /// Marginal basis size.
    pub n_basis: usize,
    pub degree: usize,
    /// Marginal difference order.
    pub penalty_order: usize,
    /// Fixed λ for every surface; `None` selects.
    pub lambda: Option<f64>,
    /// Per-surface λ overrides (B, C, E). Any override implies one λ per
    /// surface.
    pub surface_lambda: [Option<f64>; 3],
    /// One λ per surface; `false` shares a single λ across all surfaces.
    pub separate_lambdas: bool,
    pub pls: PlsOptions,
}

impl Default for CovOptions {
    fn default() -> Self {
        CovOptions {
            n_basis: 5,
            degree: 3,
            penalty_order: 3,
            lambda: None,
            surface_lambda: [None; 3],
            separate_lambdas: true,
            pls: PlsOptions::default(),
        }
    }
}

/// Fitted covariance surfaces `K^X(t, t') = b(t)ᵀ C^X b(t')` plus σ².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceFit {
    pub design: GroupingDesign,
    pub basis: SplineBasis,
    pub domain: (f64, f64),
    /// One `K x K` coefficient matrix per process of the design.
    pub surfaces: Vec<(Process, DMatrix<f64>)>,
    /// Clamped error variance.
    pub sigma2: f64,
    /// Unclamped estimate.
    pub sigma2_raw: f64,
    pub negative_sigma2: bool,
    pub lambdas: Vec<f64>,
    pub n_products: u64,
    pub method: SolveMethod,
}

impl CovarianceFit {
    pub fn coefficients(&self, process: Process) -> Option<&DMatrix<f64>> {
        self.surfaces.iter().find(|(p, _)| *p == process).map(|(_, c)| c)
    }

    /// Symmetrized evaluation of `K^X` on `grid x grid`.
    pub fn evaluate_surface(&self, process: Process, grid: &[f64]) -> Result<DMatrix<f64>> {
        let coef = self
            .coefficients(process)
            .ok_or_else(|| FlmmError::Config(format!("process {process} is not part of the design")))?;
        let m = self.basis.eval(grid)?;
        Ok(symmetrize(&(&m * coef * m.transpose())))
    }

    /// Writes `process,s,t,value` rows of every surface on `grid`.
    pub fn write_surfaces_csv(&self, path: impl AsRef<Path>, grid: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["process", "s", "t", "value"])?;
        for (p, _) in &self.surfaces {
            let k = self.evaluate_surface(*p, grid)?;
            for (a, s) in grid.iter().enumerate() {
                for (b, t) in grid.iter().enumerate() {
                    w.write_record([p.name().to_string(), fmt_f64(*s), fmt_f64(*t), fmt_f64(k[(a, b)])])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One cross-product of two centered responses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Product {
    pub a: usize,
    pub b: usize,
    pub t: f64,
    pub t_prime: f64,
    /// Same level of g1, g2, and same curve.
    pub delta: [bool; 3],
    /// Same curve and same observation.
    pub delta_tt: bool,
    pub value: f64,
}

struct PointLabels {
    curve: Vec<usize>,
    g1: Vec<usize>,
    g2: Option<Vec<usize>>,
    by_g1: Vec<Vec<usize>>,
    by_g2: Option<Vec<Vec<usize>>>,
}

fn point_labels(cs: &CurveSet, design: &GroupingDesign) -> PointLabels {
    let curve = cs.point_curves();
    let g1: Vec<usize> = curve.iter().map(|&c| cs.level(c, Process::B)).collect();
    let mut by_g1 = vec![Vec::new(); cs.n_g1()];
    for (a, &i) in g1.iter().enumerate() {
        by_g1[i].push(a);
    }
    let (g2, by_g2) = if design.kind == DesignKind::Crossed {
        let g2: Vec<usize> = curve.iter().map(|&c| cs.level(c, Process::C)).collect();
        let mut by = vec![Vec::new(); cs.n_g2().unwrap_or(0)];
        for (a, &j) in g2.iter().enumerate() {
            by[j].push(a);
        }
        (Some(g2), Some(by))
    } else {
        (None, None)
    };
    PointLabels {
        curve,
        g1,
        g2,
        by_g1,
        by_g2,
    }
}

/// Streams every ordered pair `(a, b)` sharing g1 (or g2 in the crossed
/// design), self-pairs included.
pub fn enumerate_products<'a>(cs: &'a CurveSet, design: &GroupingDesign) -> impl Iterator<Item = Product> + 'a {
    let labels = std::sync::Arc::new(point_labels(cs, design));
    (0..cs.n_points()).flat_map(move |a| {
        let l = labels.clone();
        let i = l.g1[a];
        let same_g1: Vec<usize> = l.by_g1[i].clone();
        let other: Vec<usize> = match (&l.g2, &l.by_g2) {
            (Some(g2), Some(by)) => by[g2[a]].iter().cloned().filter(|&b| l.g1[b] != i).collect(),
            _ => Vec::new(),
        };
        let l2 = l.clone();
        same_g1.into_iter().chain(other).map(move |b| {
            let same_curve = l2.curve[a] == l2.curve[b];
            let same_g2 = l2.g2.as_ref().is_some_and(|g| g[a] == g[b]);
            Product {
                a,
                b,
                t: cs.t()[a],
                t_prime: cs.t()[b],
                delta: [l2.g1[a] == l2.g1[b], same_g2, same_curve],
                delta_tt: a == b,
                value: cs.y()[a] * cs.y()[b],
            }
        })
    })
}

/// Closed-form number of products: `Σ_i n_i² + Σ_j n_j² − Σ_ij n_ij²`.
pub fn product_count(cs: &CurveSet, design: &GroupingDesign) -> u64 {
    let labels = point_labels(cs, design);
    let sq = |v: &Vec<Vec<usize>>| v.iter().map(|g| (g.len() as u64).pow(2)).sum::<u64>();
    let mut total = sq(&labels.by_g1);
    if let (Some(by), Some(g2)) = (&labels.by_g2, &labels.g2) {
        total += sq(by);
        let mut cells = std::collections::HashMap::<(usize, usize), u64>::new();
        for a in 0..cs.n_points() {
            *cells.entry((labels.g1[a], g2[a])).or_default() += 1;
        }
        total -= cells.values().map(|n| n * n).sum::<u64>();
    }
    total
}

fn check_design(cs: &CurveSet, design: &GroupingDesign) -> Result<()> {
    let n = cs.n_curves();
    let [i, j, _] = design.levels;
    let crossed = design.kind == DesignKind::Crossed;
    if crossed && i == 1 && j == 1 {
        return Err(FlmmError::DegenerateDesign(
            "one level in every grouping variable: B and C surfaces are not identifiable".into(),
        ));
    }
    if i == n {
        return Err(FlmmError::DegenerateDesign(
            "every g1 level holds a single curve: B and E surfaces are not identifiable".into(),
        ));
    }
    if crossed && j == n {
        return Err(FlmmError::DegenerateDesign(
            "every g2 level holds a single curve: C and E surfaces are not identifiable".into(),
        ));
    }
    Ok(())
}

struct Layout {
    processes: Vec<Process>,
    k: usize,
}

impl Layout {
    fn kk(&self) -> usize {
        self.k * self.k
    }

    fn offset(&self, p: Process) -> Option<usize> {
        self.processes.iter().position(|q| *q == p).map(|i| i * self.kk())
    }

    fn sigma_col(&self) -> usize {
        self.processes.len() * self.kk()
    }

    fn ncols(&self) -> usize {
        self.sigma_col() + 1
    }
}

/// Streams every product into the normal equations, partitioned by the first
/// point. Used as the reference for the aggregated path.
pub fn accumulate_products(cs: &CurveSet, design: &GroupingDesign, basis: &SplineBasis) -> Result<NormalEquations> {
    let layout = Layout {
        processes: design.processes().to_vec(),
        k: basis.n_basis(),
    };
    let local = local_bases(cs, basis)?;
    let labels = point_labels(cs, design);
    let points: Vec<usize> = (0..cs.n_points()).collect();
    let chunks: Vec<&[usize]> = points.chunks(64).collect();
    let ncols = layout.ncols();
    let y = cs.y();
    Ok(accumulate_chunks_parallel(&chunks, ncols, |chunk, ne| {
        let mut row = SparseRow::with_capacity(ncols);
        for &a in chunk.iter() {
            let i = labels.g1[a];
            let other: Vec<usize> = match (&labels.g2, &labels.by_g2) {
                (Some(g2), Some(by)) => by[g2[a]].iter().cloned().filter(|&b| labels.g1[b] != i).collect(),
                _ => Vec::new(),
            };
            for &b in labels.by_g1[i].iter().chain(other.iter()) {
                let same = [
                    labels.g1[a] == labels.g1[b],
                    labels.g2.as_ref().is_some_and(|g| g[a] == g[b]),
                    labels.curve[a] == labels.curve[b],
                ];
                row.clear();
                for p in &layout.processes {
                    if same[p.index()] {
                        push_kron(&mut row, layout.offset(*p).unwrap(), layout.k, &local[a], &local[b]);
                    }
                }
                if a == b {
                    row.push(layout.sigma_col(), 1.0);
                }
                ne.add_row(&row, y[a] * y[b]);
            }
        }
    }))
}

fn push_kron(row: &mut SparseRow, offset: usize, k: usize, ma: &(usize, Vec<f64>), mb: &(usize, Vec<f64>)) {
    for (r, va) in ma.1.iter().enumerate() {
        for (s, vb) in mb.1.iter().enumerate() {
            row.push(offset + (ma.0 + r) * k + mb.0 + s, va * vb);
        }
    }
}

fn local_bases(cs: &CurveSet, basis: &SplineBasis) -> Result<Vec<(usize, Vec<f64>)>> {
    cs.t().iter().map(|&t| basis.eval_local(t)).collect()
}

/// Per-group sums: `A = Σ m mᵀ`, `v = Σ ỹ m`, `w = Σ ỹ²`, count.
struct GroupSums {
    a: DMatrix<f64>,
    v: DVector<f64>,
    w: f64,
    n: u64,
}

fn group_sums(n_groups: usize, label: impl Fn(usize) -> usize, local: &[(usize, Vec<f64>)], y: &[f64], k: usize) -> Vec<GroupSums> {
    let mut out: Vec<GroupSums> = (0..n_groups)
        .map(|_| GroupSums {
            a: DMatrix::zeros(k, k),
            v: DVector::zeros(k),
            w: 0.0,
            n: 0,
        })
        .collect();
    for (pt, (first, vals)) in local.iter().enumerate() {
        let g = &mut out[label(pt)];
        for (r, vr) in vals.iter().enumerate() {
            g.v[first + r] += y[pt] * vr;
            for (s, vs) in vals.iter().enumerate() {
                g.a[(first + r, first + s)] += vr * vs;
            }
        }
        g.w += y[pt] * y[pt];
        g.n += 1;
    }
    out
}

/// `Σ_g A_g ⊗ A_g`.
fn kron_sum(groups: &[GroupSums], k: usize) -> DMatrix<f64> {
    groups
        .par_iter()
        .fold(
            || DMatrix::zeros(k * k, k * k),
            |mut acc, g| {
                if g.n > 0 {
                    acc += g.a.kronecker(&g.a);
                }
                acc
            },
        )
        .reduce(|| DMatrix::zeros(k * k, k * k), |a, b| a + b)
}

fn kron_vec_sum(groups: &[GroupSums], k: usize) -> DVector<f64> {
    let mut out = DVector::zeros(k * k);
    for g in groups {
        out += g.v.kronecker(&g.v);
    }
    out
}

/// Normal equations of the product regression computed from per-group
/// sufficient statistics; algebraically identical to streaming all
/// products through [`accumulate_products`].
pub fn aggregate_products(cs: &CurveSet, design: &GroupingDesign, basis: &SplineBasis) -> Result<NormalEquations> {
    let layout = Layout {
        processes: design.processes().to_vec(),
        k: basis.n_basis(),
    };
    let k = layout.k;
    let kk = layout.kk();
    let local = local_bases(cs, basis)?;
    let labels = point_labels(cs, design);
    let y = cs.y();
    let by_g1 = group_sums(cs.n_g1(), |a| labels.g1[a], &local, y, k);
    let by_curve = group_sums(cs.n_curves(), |a| labels.curve[a], &local, y, k);
    let (by_g2, by_cell) = match &labels.g2 {
        Some(g2) => {
            let j = cs.n_g2().unwrap_or(0);
            (
                Some(group_sums(j, |a| g2[a], &local, y, k)),
                Some(group_sums(cs.n_g1() * j, |a| labels.g1[a] * j + g2[a], &local, y, k)),
            )
        }
        None => (None, None),
    };
    let group_for = |p: Process, q: Process| -> &Vec<GroupSums> {
        use Process::*;
        match (p, q) {
            (B, B) => &by_g1,
            (C, C) => by_g2.as_ref().unwrap(),
            (B, C) | (C, B) => by_cell.as_ref().unwrap(),
            _ => &by_curve,
        }
    };

    let mut ne = NormalEquations::zeros(layout.ncols());
    for (pi, &p) in layout.processes.iter().enumerate() {
        for &q in &layout.processes[pi..] {
            let block = kron_sum(group_for(p, q), k);
            let (op, oq) = (layout.offset(p).unwrap(), layout.offset(q).unwrap());
            ne.xtx.view_mut((op, oq), (kk, kk)).copy_from(&block);
            if op != oq {
                ne.xtx.view_mut((oq, op), (kk, kk)).copy_from(&block.transpose());
            }
        }
        let xty = kron_vec_sum(group_for(p, p), k);
        ne.xty.rows_mut(layout.offset(p).unwrap(), kk).copy_from(&xty);
    }
    let mut diag = DMatrix::<f64>::zeros(k, k);
    for g in &by_curve {
        diag += &g.a;
    }
    // column-major vec of the symmetric matrix equals the kron index k*K + l
    let sig = layout.sigma_col();
    for &p in &layout.processes {
        let o = layout.offset(p).unwrap();
        for idx in 0..kk {
            let v = diag[(idx / k, idx % k)];
            ne.xtx[(o + idx, sig)] = v;
            ne.xtx[(sig, o + idx)] = v;
        }
    }
    ne.xtx[(sig, sig)] = cs.n_points() as f64;
    ne.xty[sig] = y.iter().map(|v| v * v).sum();

    let w2 = |g: &Vec<GroupSums>| g.iter().map(|g| g.w * g.w).sum::<f64>();
    let n2 = |g: &Vec<GroupSums>| g.iter().map(|g| g.n * g.n).sum::<u64>();
    let mut yty = w2(&by_g1);
    let mut n = n2(&by_g1);
    if let (Some(g2), Some(cell)) = (&by_g2, &by_cell) {
        yty += w2(g2) - w2(cell);
        n = n + n2(g2) - n2(cell);
    }
    ne.yty = yty;
    ne.n = n as usize;
    Ok(ne)
}

/// Fits all surfaces and σ² jointly.
pub fn fit_covariances(cs: &CurveSet, design: &GroupingDesign, opts: &CovOptions) -> Result<CovarianceFit> {
    check_design(cs, design)?;
    let basis = SplineBasis::new(cs.domain(), opts.n_basis, opts.degree)?;
    let ne = aggregate_products(cs, design, &basis)?;
    fit_from_normal_equations(&ne, design, basis, cs.domain(), opts)
}

/// Solves the product regression from accumulated normal equations.
pub fn fit_from_normal_equations(
    ne: &NormalEquations,
    design: &GroupingDesign,
    basis: SplineBasis,
    domain: (f64, f64),
    opts: &CovOptions,
) -> Result<CovarianceFit> {
    let layout = Layout {
        processes: design.processes().to_vec(),
        k: basis.n_basis(),
    };
    let kk = layout.kk();
    let marginal = difference_penalty(layout.k, opts.penalty_order)?;
    let tensor = PenaltyMatrix::tensor(&marginal, &marginal);
    let shared = match opts.lambda {
        Some(l) => Smoothing::Fixed(l),
        None => Smoothing::Select,
    };
    let blocks: Vec<PenaltyBlock> = if opts.separate_lambdas || opts.surface_lambda.iter().any(Option::is_some) {
        layout
            .processes
            .iter()
            .map(|p| {
                let s = opts.surface_lambda[p.index()].map_or(shared, Smoothing::Fixed);
                PenaltyBlock::new(layout.offset(*p).unwrap(), tensor.clone(), s)
            })
            .collect()
    } else {
        let np = layout.processes.len();
        let mut m = DMatrix::zeros(np * kk, np * kk);
        for b in 0..np {
            m.view_mut((b * kk, b * kk), (kk, kk)).copy_from(&tensor.matrix);
        }
        vec![PenaltyBlock::new(
            0,
            PenaltyMatrix {
                order: None,
                matrix: m,
            },
            shared,
        )]
    };
    let fit = solve_penalized_normal(ne, &blocks, &opts.pls)?;
    if fit.method.is_degraded() {
        log::warn!("covariance normal equations solved via {:?}", fit.method);
    }
    let surfaces = layout
        .processes
        .iter()
        .map(|&p| {
            let o = layout.offset(p).unwrap();
            // coefficient (r, s) multiplies b_r(t) b_s(t')
            let c = DMatrix::from_fn(layout.k, layout.k, |r, s| fit.coefficients[o + r * layout.k + s]);
            (p, c)
        })
        .collect();
    let sigma2_raw = fit.coefficients[layout.sigma_col()];
    let negative = sigma2_raw < 0.0;
    if negative {
        log::warn!("negative error variance estimate {sigma2_raw} set to zero");
    }
    let lambdas = if blocks.len() == 1 {
        vec![fit.lambdas[0]; layout.processes.len()]
    } else {
        fit.lambdas.clone()
    };
    Ok(CovarianceFit {
        design: *design,
        basis,
        domain,
        surfaces,
        sigma2: sigma2_raw.max(0.0),
        sigma2_raw,
        negative_sigma2: negative,
        lambdas,
        n_products: ne.n as u64,
        method: fit.method,
    })
}
