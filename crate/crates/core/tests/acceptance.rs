//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Every tolerance is pinned below.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flmm::covfit::{enumerate_products, product_count};
use flmm::eigen::{decompose_matrices, eval_grid, select_components, EigenSystem, ProcessEigen, Truncation};
use flmm::fdata::{CurveKey, CurveSet, CurveSetBuilder, DesignKind, Process};
use flmm::pipeline::{fit_pipeline, PipelineOptions, PredictMode};
use flmm::predict::{predict_eblup, BlupSystem};
use flmm::sim::{run_replicate, run_study, ScenarioConfig, StudyOptions};

const SPARSE_REPLICATES: usize = 50;
const FAMM_REPLICATES: usize = 50;

// criterion 1: (quantity, process, component, reference value, absolute tolerance)
const SPARSE_TARGETS: &[(&str, Option<Process>, Option<usize>, f64, f64)] = &[
    ("nu", Some(Process::B), Some(0), 0.02, 0.03),
    ("nu", Some(Process::B), Some(1), 0.04, 0.03),
    ("nu", Some(Process::C), Some(0), 0.03, 0.03),
    ("nu", Some(Process::C), Some(1), 0.05, 0.03),
    ("nu", Some(Process::E), Some(0), 0.02, 0.03),
    ("nu", Some(Process::E), Some(1), 0.05, 0.03),
    ("phi", Some(Process::B), Some(0), 0.05, 0.04),
    ("phi", Some(Process::B), Some(1), 0.07, 0.04),
    ("K", Some(Process::B), None, 0.06, 0.04),
    ("K", Some(Process::E), None, 0.14, 0.06),
    ("mu", None, Some(0), 0.03, 0.03),
    ("Y", None, None, 0.09, 0.04),
];

const WOODBURY_INSTANCES: usize = 100;
const WOODBURY_MAX_POINTS: usize = 50;
const WOODBURY_MAX_WEIGHTS: usize = 12;
const WOODBURY_SIGMA2: [f64; 3] = [0.01, 0.3, 2.0];
const WOODBURY_REL_TOL: f64 = 1e-8;

const ORTHONORMALITY_TOL: f64 = 1e-8;

const SHARE_TABLE: ([f64; 2], [f64; 1], [f64; 3], f64) = ([10.83, 5.00], [16.44], [35.23, 13.93, 4.92], 10.39);
const SHARE_LEVEL: f64 = 0.95;
const SHARE_EXPECTED: [usize; 3] = [2, 1, 3];

const CLOSURE_TOL: f64 = 1e-10;
// eigenvalue inputs (x 1e-3) and percentage shares of a reference variance table
const TABLE_EIGENVALUES: [f64; 6] = [5.84, 3.23, 19.53, 7.59, 2.73, 3.94];
const TABLE_SHARES: [f64; 6] = [13.16, 7.29, 44.02, 17.11, 6.16, 8.88];
// inputs carry 3 significant digits and shares 2 decimals
const TABLE_SHARE_TOL: f64 = 0.02;

const KERNEL_D: usize = 100;
const KERNEL_EIGENVALUE_TOL: f64 = 1e-3;
const KERNEL_FUNCTION_TOL: f64 = 1e-2;

const PSD_TOL: f64 = -1e-10;

const COVERAGE_RANGE: (f64, f64) = (0.85, 0.99);

const PRODUCT_DESIGNS: usize = 20;

#[derive(Default)]
struct Outcome {
    lines: Vec<(usize, bool, String)>,
}

impl Outcome {
    fn report(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let line = format!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id, pass, line));
    }

    /// Prints in criterion order and returns the number of failures.
    fn print(mut self) -> usize {
        self.lines.sort_by_key(|l| l.0);
        for (_, _, line) in &self.lines {
            println!("{line}");
        }
        self.lines.iter().filter(|l| !l.1).count()
    }
}

fn max_orthonormality_error(es: &EigenSystem) -> f64 {
    let mut worst = 0.0f64;
    for pe in &es.processes {
        let phi = pe.retained_functions();
        let gram = phi.transpose() * &phi * es.spacing;
        let dev = gram - DMatrix::identity(pe.retained, pe.retained);
        worst = worst.max(dev.amax());
    }
    worst
}

fn closure_error(es: &EigenSystem) -> f64 {
    (es.variance_decomposition().share_sum() - 1.0).abs()
}

fn min_reconstruction_eigenvalue(es: &EigenSystem) -> f64 {
    let mut worst = f64::INFINITY;
    for pe in &es.processes {
        let nu = DMatrix::from_diagonal(&DVector::from_column_slice(&pe.values));
        let k = &pe.functions * nu * pe.functions.transpose();
        worst = worst.min(SymmetricEigen::new(k).eigenvalues.min());
    }
    worst
}

/// Every fitted or constructed eigen system is collected for criteria 3 and 5.
#[derive(Default)]
struct Collected {
    systems: Vec<EigenSystem>,
}

fn sparse_scenario(out: &mut Outcome, collected: &mut Collected) {
    let mut cfg = ScenarioConfig::sparse();
    cfg.replicates = SPARSE_REPLICATES;
    let opts = StudyOptions::default();
    let report = run_study(&cfg, &opts).expect("sparse study runs");
    let mut misses = Vec::new();
    let mut lines = Vec::new();
    for &(q, p, c, target, tol) in SPARSE_TARGETS {
        let v = report.average.get(q, p, c).unwrap_or(f64::NAN);
        let label = format!(
            "{q}{}{}",
            p.map_or(String::new(), |p| format!("^{p}")),
            c.map_or(String::new(), |c| format!("_{}", c + 1))
        );
        lines.push(format!("{label}={v:.3}"));
        if !((v - target).abs() <= tol) {
            misses.push(format!("{label}={v:.4} vs {target}±{tol}"));
        }
    }
    let s2 = report.average.get("sigma2", None, None).unwrap_or(f64::NAN);
    let pass = misses.is_empty() && report.failures.is_empty();
    let detail = format!(
        "{}/{} replicates; {}; sigma2={s2:.2} (ungated){}",
        report.succeeded,
        report.replicates,
        lines.join(" "),
        if misses.is_empty() {
            String::new()
        } else {
            format!("; outside tolerance: {}", misses.join(", "))
        }
    );
    out.report(1, "sparse scenario rrMSE", pass, detail);
    for r in 0..3 {
        let (_, state, _) = run_replicate(&cfg, &opts, r).expect("replicate");
        collected.systems.push(state.eigen);
    }
}

fn random_blup_system(rng: &mut ChaCha8Rng, sigma2: f64) -> BlupSystem {
    loop {
        let crossed = rng.random_bool(0.5);
        let n_b = rng.random_range(0..=2);
        let n_c = if crossed { rng.random_range(0..=2) } else { 0 };
        let n_e = rng.random_range(0..=2);
        let (i, j) = (rng.random_range(1..=3), if crossed { rng.random_range(1..=3) } else { 0 });
        let curves = rng.random_range(1..=4);
        let weights = i * n_b + j * n_c + curves * n_e;
        if weights == 0 || weights > WOODBURY_MAX_WEIGHTS {
            continue;
        }
        let mut point_levels: [Vec<usize>; 3] = Default::default();
        let curve_g1: Vec<usize> = (0..curves).map(|c| c % i).collect();
        let curve_g2: Vec<usize> = (0..curves).map(|c| if crossed { (c / i) % j } else { 0 }).collect();
        for c in 0..curves {
            let n = rng.random_range(1..=WOODBURY_MAX_POINTS / curves);
            for _ in 0..n {
                point_levels[0].push(curve_g1[c]);
                point_levels[1].push(curve_g2[c]);
                point_levels[2].push(c);
            }
        }
        let n = point_levels[2].len();
        let counts = [n_b, n_c, n_e];
        let mut phi: [DMatrix<f64>; 3] = Default::default();
        let mut nu: [Vec<f64>; 3] = Default::default();
        for x in 0..3 {
            phi[x] = DMatrix::from_fn(n, counts[x], |_, _| rng.random_range(-2.0..2.0));
            nu[x] = (0..counts[x]).map(|_| rng.random_range(0.05..2.0)).collect();
        }
        if !crossed {
            point_levels[1].clear();
        }
        return BlupSystem::new([i, j, curves], nu, sigma2, point_levels, phi).expect("valid instance");
    }
}

/// `G Φᵀ (σ² I + Φ G Φᵀ)⁻¹ ỹ` with Φ assembled from the documented column layout.
fn direct_oracle(sys: &BlupSystem, y: &DVector<f64>) -> DVector<f64> {
    let n = y.len();
    let mut offsets = [0; 3];
    for x in 1..3 {
        offsets[x] = offsets[x - 1] + sys.levels[x - 1] * sys.counts[x - 1];
    }
    let total = offsets[2] + sys.levels[2] * sys.counts[2];
    let mut phi = DMatrix::zeros(n, total);
    let mut g = DVector::zeros(total);
    for x in 0..3 {
        for l in 0..sys.levels[x] {
            for k in 0..sys.counts[x] {
                let col = offsets[x] + l * sys.counts[x] + k;
                g[col] = sys.nu[x][k];
                for a in 0..n {
                    if sys.point_levels[x][a] == l {
                        phi[(a, col)] = sys.phi[x][(a, k)];
                    }
                }
            }
        }
    }
    let gm = DMatrix::from_diagonal(&g);
    let v = DMatrix::identity(n, n) * sys.sigma2 + &phi * &gm * phi.transpose();
    let alpha = v.lu().solve(y).expect("V is nonsingular");
    gm * phi.transpose() * alpha
}

fn woodbury(out: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for inst in 0..WOODBURY_INSTANCES {
        let sigma2 = WOODBURY_SIGMA2[inst % WOODBURY_SIGMA2.len()];
        let sys = random_blup_system(&mut rng, sigma2);
        let y = DVector::from_fn(sys.n_points(), |_, _| rng.random_range(-3.0..3.0));
        let (w, _) = predict_eblup(&sys, y.as_slice()).expect("EBLUP solve");
        let direct = direct_oracle(&sys, &y);
        let rel = (w.stacked() - &direct).norm() / direct.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    out.report(
        2,
        "EBLUP solve vs direct form",
        worst <= WOODBURY_REL_TOL,
        format!("{WOODBURY_INSTANCES} instances, max relative error {worst:.2e} (tol {WOODBURY_REL_TOL:.0e})"),
    );
}

fn random_kernels(collected: &mut Collected) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let d = rng.random_range(10..=60);
        let r = rng.random_range(1..=5);
        let mut surfaces = Vec::new();
        for p in [Process::B, Process::C, Process::E] {
            let a = DMatrix::from_fn(d, r, |_, _| rng.random_range(-1.0..1.0));
            surfaces.push((p, &a * a.transpose()));
        }
        let sigma2 = rng.random_range(0.0..0.5);
        let es = decompose_matrices((0.0, 1.0), &surfaces, sigma2, Truncation::Level(0.9)).expect("random kernel");
        collected.systems.push(es);
    }
}

fn orthonormality(out: &mut Outcome, collected: &Collected) {
    let worst = collected.systems.iter().map(max_orthonormality_error).fold(0.0, f64::max);
    out.report(
        3,
        "orthonormality of retained eigenfunctions",
        worst <= ORTHONORMALITY_TOL,
        format!(
            "{} decompositions, max |a·ΦᵀΦ - I| = {worst:.2e} (tol {ORTHONORMALITY_TOL:.0e})",
            collected.systems.len()
        ),
    );
}

fn truncation_table(out: &mut Outcome) {
    let (b, c, e, s2) = SHARE_TABLE;
    let got = select_components([&b, &c, &e], s2, 100.0, SHARE_LEVEL);
    out.report(
        4,
        "truncation on the reference share table",
        got == SHARE_EXPECTED,
        format!("L={SHARE_LEVEL} selects {got:?}, expected {SHARE_EXPECTED:?}"),
    );
}

fn table_system(values: [f64; 6], remainder: f64) -> EigenSystem {
    let d = 10;
    let pe = |process, values: Vec<f64>, retained| ProcessEigen {
        process,
        functions: DMatrix::zeros(d, values.len()),
        values,
        retained,
    };
    EigenSystem {
        domain: (0.0, 1.0),
        grid: eval_grid((0.0, 1.0), d),
        spacing: 1.0 / d as f64,
        processes: vec![
            pe(Process::B, vec![values[0], values[1]], 2),
            pe(Process::E, vec![values[2], values[3], values[4], remainder], 3),
        ],
        sigma2: values[5],
        truncation: Truncation::Fixed([2, 0, 3]),
    }
}

fn closure(out: &mut Outcome, collected: &Collected) {
    let worst = collected.systems.iter().map(closure_error).fold(0.0, f64::max);
    // The listed shares share one denominator; it exceeds the listed inputs by
    // the eigenvalues left out of the table, which enter as one remainder term.
    let totals: Vec<f64> = TABLE_EIGENVALUES.iter().zip(TABLE_SHARES).map(|(v, s)| v / (s / 100.0)).collect();
    let total = totals.iter().sum::<f64>() / totals.len() as f64;
    let remainder = total - TABLE_EIGENVALUES.iter().sum::<f64>();
    let es = table_system(TABLE_EIGENVALUES, remainder);
    let vd = es.variance_decomposition();
    let mut shares: Vec<f64> = vd.components.iter().filter(|c| c.retained).map(|c| 100.0 * c.share).collect();
    shares.push(100.0 * vd.sigma2_share);
    let table_dev = shares.iter().zip(TABLE_SHARES).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let spread = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - totals.iter().cloned().fold(f64::INFINITY, f64::min);
    let pass = worst <= CLOSURE_TOL && table_dev <= TABLE_SHARE_TOL && closure_error(&es) <= CLOSURE_TOL;
    out.report(
        5,
        "variance decomposition closure",
        pass,
        format!(
            "{} fits, max |Σshare - 1| = {worst:.1e} (tol {CLOSURE_TOL:.0e}); table shares reproduced within {table_dev:.3} pp \
             (tol {TABLE_SHARE_TOL}) with implied total {total:.2}e-3 (spread {spread:.3}e-3, unlisted remainder {remainder:.2}e-3)",
            collected.systems.len()
        ),
    );
}

fn known_kernel(out: &mut Outcome, collected: &mut Collected) {
    let p1 = |t: f64| 3f64.sqrt() * (2.0 * t - 1.0);
    let p2 = |t: f64| 5f64.sqrt() * (6.0 * t * t - 6.0 * t + 1.0);
    let grid = eval_grid((0.0, 1.0), KERNEL_D);
    let k = DMatrix::from_fn(KERNEL_D, KERNEL_D, |i, j| 2.0 * p1(grid[i]) * p1(grid[j]) + p2(grid[i]) * p2(grid[j]));
    let es = decompose_matrices((0.0, 1.0), &[(Process::B, k)], 0.0, Truncation::Fixed([2, 0, 0])).expect("kernel");
    let e = es.get(Process::B).expect("B present");
    let nu_err = (e.values[0] - 2.0).abs().max((e.values[1] - 1.0).abs());
    let mut fn_err = 0.0f64;
    for (c, f) in [(0usize, &p1 as &dyn Fn(f64) -> f64), (1, &p2)] {
        let l2 = |sign: f64| {
            (grid.iter().enumerate().map(|(i, t)| (sign * e.functions[(i, c)] - f(*t)).powi(2)).sum::<f64>() * es.spacing).sqrt()
        };
        fn_err = fn_err.max(l2(1.0).min(l2(-1.0)));
    }
    out.report(
        6,
        "known separable kernel",
        nu_err <= KERNEL_EIGENVALUE_TOL && fn_err <= KERNEL_FUNCTION_TOL,
        format!(
            "D={KERNEL_D}: eigenvalue error {nu_err:.2e} (tol {KERNEL_EIGENVALUE_TOL:.0e}), L2 error {fn_err:.2e} (tol {KERNEL_FUNCTION_TOL:.0e})"
        ),
    );
    collected.systems.push(es);
}

fn clamping(out: &mut Outcome, collected: &mut Collected) {
    // Tiny crossed designs often give a negative raw error variance.
    let mut cfg = ScenarioConfig::sparse();
    cfg.i = 12;
    cfg.j = 10;
    cfg.h = 2;
    cfg.seed = 11;
    let opts = PipelineOptions {
        truncation: Truncation::Fixed([2, 2, 2]),
        ..Default::default()
    };
    let mut cases = 0;
    let mut clamped = true;
    let mut min_eig = f64::INFINITY;
    for r in 0..20 {
        let (cs, _) = flmm::sim::generate(&cfg, r).expect("generate");
        let state = fit_pipeline(&cs, &opts).expect("fit");
        if !state.covariance.negative_sigma2 {
            continue;
        }
        cases += 1;
        clamped &= state.covariance.sigma2_raw < 0.0 && state.covariance.sigma2 == 0.0 && state.eigen.sigma2 == 0.0;
        min_eig = min_eig.min(min_reconstruction_eigenvalue(&state.eigen));
        collected.systems.push(state.eigen);
    }
    // indefinite kernel: 1·f f' - 0.5·g g'
    let grid = eval_grid((0.0, 1.0), 50);
    let g = |t: f64| 3f64.sqrt() * (2.0 * t - 1.0);
    let k = DMatrix::from_fn(50, 50, |i, j| 1.0 - 0.5 * g(grid[i]) * g(grid[j]));
    let es = decompose_matrices((0.0, 1.0), &[(Process::B, k)], 0.0, Truncation::Level(1.0)).expect("indefinite kernel");
    let trimmed = es.processes.iter().all(|p| p.values.iter().all(|v| *v > 0.0));
    min_eig = min_eig.min(min_reconstruction_eigenvalue(&es));
    collected.systems.push(es);
    out.report(
        7,
        "sigma2 clamping and eigenvalue trimming",
        cases > 0 && clamped && trimmed && min_eig >= PSD_TOL,
        format!("{cases} negative-estimate fits clamped to 0: {clamped}; negative eigenvalues trimmed: {trimmed}; min reconstruction eigenvalue {min_eig:.2e} (tol {PSD_TOL:.0e})"),
    );
}

fn famm(out: &mut Outcome, collected: &mut Collected) {
    let mut cfg = ScenarioConfig::fri_famm();
    cfg.replicates = FAMM_REPLICATES;
    let mut opts = StudyOptions::default();
    opts.pipeline.predict = PredictMode::Famm;
    let report = run_study(&cfg, &opts).expect("FAMM study runs");
    let terms = 1 + cfg.mean.covariates.len();
    let mut wi = 0.0;
    let mut joint = 0.0;
    let mut covs = Vec::new();
    for p in 0..terms {
        wi += report.average.get("mu", None, Some(p)).unwrap_or(f64::NAN) / terms as f64;
        joint += report.average.get("mu_famm", None, Some(p)).unwrap_or(f64::NAN) / terms as f64;
        covs.push(report.average.get("coverage_famm", None, Some(p)).unwrap_or(f64::NAN));
    }
    let cov_ok = covs.iter().all(|c| (COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(c));
    out.report(
        8,
        "joint fit improves the mean and bands cover",
        report.failures.is_empty() && joint <= wi && cov_ok,
        format!(
            "{}/{} replicates; mean rrMSE joint {joint:.4} vs independence {wi:.4}; coverage {} (range {:?})",
            report.succeeded,
            report.replicates,
            covs.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>().join("/"),
            COVERAGE_RANGE
        ),
    );
    let (_, state, _) = run_replicate(&cfg, &opts, 0).expect("replicate");
    collected.systems.push(state.eigen);
}

fn random_design(rng: &mut ChaCha8Rng) -> (CurveSet, DesignKind) {
    let crossed = rng.random_bool(0.7);
    let i = rng.random_range(1..=5);
    let j = rng.random_range(1..=4);
    let h = rng.random_range(1..=3);
    let mut b = CurveSetBuilder::new(vec![]);
    for g1 in 0..i {
        for g2 in 0..j {
            for rep in 0..h {
                if rng.random_bool(0.2) && !(g1 == 0 && g2 == 0) {
                    continue;
                }
                let n = rng.random_range(1..=6);
                let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let key = CurveKey {
                    g1,
                    g2: crossed.then_some(g2),
                    rep: if crossed { rep } else { g2 * h + rep },
                };
                b.push_curve(key, vec![], &t, &y);
            }
        }
    }
    let kind = if crossed { DesignKind::Crossed } else { DesignKind::SingleFri };
    (b.build(Some((0.0, 1.0))).expect("design"), kind)
}

fn product_counts(out: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    let mut total = 0u64;
    for _ in 0..PRODUCT_DESIGNS {
        let (cs, kind) = random_design(&mut rng);
        let design = cs.design(kind).expect("grouping");
        let curves = cs.point_curves();
        let mut brute = 0u64;
        for a in 0..cs.n_points() {
            for b in 0..cs.n_points() {
                let (ka, kb) = (cs.key(curves[a]), cs.key(curves[b]));
                if ka.g1 == kb.g1 || (ka.g2.is_some() && ka.g2 == kb.g2) {
                    brute += 1;
                }
            }
        }
        let closed = product_count(&cs, &design);
        let listed = enumerate_products(&cs, &design).count() as u64;
        if closed != brute || listed != brute {
            mismatches += 1;
        }
        total += brute;
    }
    out.report(
        9,
        "product count identity",
        mismatches == 0,
        format!("{PRODUCT_DESIGNS} random designs ({total} products), {mismatches} mismatches against pair enumeration"),
    );
}

fn main() {
    let mut out = Outcome::default();
    let mut collected = Collected::default();
    sparse_scenario(&mut out, &mut collected);
    woodbury(&mut out);
    random_kernels(&mut collected);
    known_kernel(&mut out, &mut collected);
    clamping(&mut out, &mut collected);
    famm(&mut out, &mut collected);
    truncation_table(&mut out);
    orthonormality(&mut out, &collected);
    closure(&mut out, &collected);
    product_counts(&mut out);
    let failed = out.print();
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
