use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{Assignment, Family, PointLaw, ScenarioConfig};
use crate::error::{FlmmError, Result};
use crate::fdata::{CurveKey, CurveSet, CurveSetBuilder, DesignKind, Process};

/// Shifted Legendre polynomial of degree `n`, orthonormal on `[0, 1]`.
pub fn legendre01(n: usize, u: f64) -> f64 {
    let x = 2.0 * u - 1.0;
    let (mut p0, mut p1) = (1.0, x);
    let p = match n {
        0 => 1.0,
        1 => x,
        _ => {
            for k in 1..n {
                let k = k as f64;
                let p2 = ((2.0 * k + 1.0) * x * p1 - k * p0) / (k + 1.0);
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    };
    (2.0 * n as f64 + 1.0).sqrt() * p
}

/// Fourier basis orthonormal on `[0, 1]`.
pub fn fourier01(n: usize, u: f64) -> f64 {
    use std::f64::consts::{SQRT_2, TAU};
    if n == 0 {
        return 1.0;
    }
    let m = n.div_ceil(2) as f64;
    if n % 2 == 1 {
        SQRT_2 * (TAU * m * u).sin()
    } else {
        SQRT_2 * (TAU * m * u).cos()
    }
}

/// Basis function of `family` rescaled to be orthonormal on `domain`.
pub fn eigenfunction(family: Family, order: usize, domain: (f64, f64), t: f64) -> f64 {
    let len = domain.1 - domain.0;
    let u = (t - domain.0) / len;
    let v = match family {
        Family::Legendre => legendre01(order, u),
        Family::Fourier => fourier01(order, u),
    };
    v / len.sqrt()
}

/// Centers the columns of `w`, removes their empirical correlation and sets
/// the empirical variances (divisor: number of rows) to `nu`.
pub fn whiten(w: &mut DMatrix<f64>, nu: &[f64]) -> Result<()> {
    let (l, n) = w.shape();
    if n == 0 {
        return Ok(());
    }
    if l <= n {
        return Err(FlmmError::DegenerateDesign(format!("{l} levels cannot be whitened over {n} components")));
    }
    for mut col in w.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let s = w.transpose() * &*w / l as f64;
    let chol = s
        .cholesky()
        .ok_or_else(|| FlmmError::Numerical("singular empirical weight covariance".into()))?;
    // W L⁻ᵀ where S = L Lᵀ
    let white = chol
        .l()
        .solve_lower_triangular(&w.transpose())
        .ok_or_else(|| FlmmError::Numerical("singular Cholesky factor".into()))?
        .transpose();
    *w = white;
    for (k, mut col) in w.column_iter_mut().enumerate() {
        col *= nu[k].sqrt();
    }
    Ok(())
}

/// True quantities behind one simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: ScenarioConfig,
    /// Drawn weights per process, `levels x components`.
    pub weights: [DMatrix<f64>; 3],
    /// Process curves at the observation points.
    pub curves_at_points: [Vec<f64>; 3],
    /// `μ(t, x) + Σ_X X(t)` at the observation points.
    pub signal: Vec<f64>,
}

impl GroundTruth {
    pub fn eigenvalues(&self, p: Process) -> &[f64] {
        self.config.processes.get(p).map_or(&[], |s| &s.eigenvalues)
    }

    /// Eigenfunctions on `grid`, one column per component.
    pub fn eigenfunctions(&self, p: Process, grid: &[f64]) -> DMatrix<f64> {
        match self.config.processes.get(p) {
            None => DMatrix::zeros(grid.len(), 0),
            Some(s) => DMatrix::from_fn(grid.len(), s.orders.len(), |g, k| {
                eigenfunction(s.family, s.orders[k], self.config.domain, grid[g])
            }),
        }
    }

    pub fn covariance(&self, p: Process, grid: &[f64]) -> DMatrix<f64> {
        let phi = self.eigenfunctions(p, grid);
        let nu = nalgebra::DVector::from_column_slice(self.eigenvalues(p));
        &phi * DMatrix::from_diagonal(&nu) * phi.transpose()
    }

    /// Term `p` of the mean (0 is the intercept, `c + 1` covariate `c`).
    pub fn mean_term(&self, p: usize, grid: &[f64]) -> Vec<f64> {
        let shape = if p == 0 {
            self.config.mean.intercept
        } else {
            self.config.mean.covariates[p - 1].effect
        };
        grid.iter().map(|&t| shape.eval(t)).collect()
    }

    pub fn n_mean_terms(&self) -> usize {
        1 + self.config.mean.covariates.len()
    }

    /// Mean specification matching the generating model.
    pub fn mean_spec(&self) -> String {
        let mut s = "t".to_string();
        for c in &self.config.mean.covariates {
            s.push_str(" + t:");
            s.push_str(&c.name);
        }
        s
    }
}

fn draw_weights(rng: &mut ChaCha8Rng, levels: usize, nu: &[f64], whiten_it: bool) -> Result<DMatrix<f64>> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let mut w = DMatrix::from_fn(levels, nu.len(), |_, _| n.sample(rng));
    if whiten_it {
        whiten(&mut w, nu)?;
    } else {
        for (k, mut col) in w.column_iter_mut().enumerate() {
            col *= nu[k].sqrt();
        }
    }
    Ok(w)
}

/// Draws replicate `replicate` of the scenario (seed `cfg.seed + replicate`).
pub fn generate(cfg: &ScenarioConfig, replicate: u64) -> Result<(CurveSet, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(replicate));
    let levels = cfg.levels();
    let mut weights: [DMatrix<f64>; 3] = [DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)];
    for p in Process::ALL {
        let nu = cfg.processes.get(p).map_or(&[][..], |s| &s.eigenvalues[..]);
        weights[p.index()] = draw_weights(&mut rng, levels[p.index()], nu, cfg.center_decorrelate)?;
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let sigma = cfg.sigma2.sqrt();
    let (a, b) = cfg.domain;
    let names: Vec<String> = cfg.mean.covariates.iter().map(|c| format!("x_{}", c.name)).collect();
    let mut builder = CurveSetBuilder::new(names);
    let mut curves: [Vec<f64>; 3] = Default::default();
    let mut signal = Vec::new();
    let mut curve = 0;
    for i in 0..cfg.i {
        for j in 0..cfg.j {
            for h in 0..cfg.h {
                let m = match cfg.points {
                    PointLaw::Fixed { n } => n,
                    PointLaw::Uniform { min, max } => rng.random_range(min..=max),
                };
                let mut t: Vec<f64> = (0..m).map(|_| rng.random_range(a..b)).collect();
                t.sort_by(|x, y| x.total_cmp(y));
                let x: Vec<f64> = cfg
                    .mean
                    .covariates
                    .iter()
                    .map(|c| match c.assign {
                        Assignment::G1Parity => (i % 2) as f64,
                        Assignment::G2Parity => (j % 2) as f64,
                        Assignment::RepParity => (h % 2) as f64,
                        Assignment::Uniform => rng.random_range(0.0..1.0),
                    })
                    .collect();
                let level = [i, if cfg.design == DesignKind::Crossed { j } else { 0 }, curve];
                let mut y = Vec::with_capacity(m);
                for &tv in &t {
                    let mut s = cfg.mean.intercept.eval(tv)
                        + cfg.mean.covariates.iter().zip(&x).map(|(c, xv)| xv * c.effect.eval(tv)).sum::<f64>();
                    for p in Process::ALL {
                        let Some(spec) = cfg.processes.get(p) else {
                            curves[p.index()].push(0.0);
                            continue;
                        };
                        let w = &weights[p.index()];
                        let v: f64 = spec
                            .orders
                            .iter()
                            .enumerate()
                            .map(|(k, &o)| w[(level[p.index()], k)] * eigenfunction(spec.family, o, cfg.domain, tv))
                            .sum();
                        curves[p.index()].push(v);
                        s += v;
                    }
                    signal.push(s);
                    y.push(s + sigma * unit.sample(&mut rng));
                }
                builder.push_curve(
                    CurveKey {
                        g1: i,
                        g2: Some(j),
                        rep: h,
                    },
                    x,
                    &t,
                    &y,
                );
                curve += 1;
            }
        }
    }
    let cs = builder.build(Some(cfg.domain))?;
    Ok((
        cs,
        GroundTruth {
            config: cfg.clone(),
            weights,
            curves_at_points: curves,
            signal,
        },
    ))
}
