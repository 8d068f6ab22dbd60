//! C ABI for `flmm`.
//!
//! Objects cross the boundary as opaque handles (`FlmmCurves`, `FlmmFit`)
//! that must be released with their `_free` function. Every fallible call
//! returns an `FlmmStatus`; on failure `flmm_last_error` describes the cause
//! for the calling thread.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flmm::eigen::Truncation;
use flmm::error::FlmmError;
use flmm::fdata::{CurveKey, CurveSet, CurveSetBuilder, DesignKind, Process, Schema};
use flmm::meanfit::MeanSpec;
use flmm::pipeline::{fit_pipeline, PipelineOptions, PipelineState, PredictMode};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    DegenerateDesign = 5,
    Numerical = 6,
    NoComponents = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlmmDesign {
    Fri = 0,
    Crossed = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlmmProcess {
    B = 0,
    C = 1,
    E = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlmmPredict {
    Eblup = 0,
    Famm = 1,
    Both = 2,
}

/// Fit settings. Obtain defaults from `flmm_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FlmmOptions {
    pub design: FlmmDesign,
    pub k_mean: usize,
    pub k_cov: usize,
    pub grid_d: usize,
    pub var_level: f64,
    /// Fixed component counts (B, C, E); used when `fixed_components` is nonzero.
    pub n_components: [usize; 3],
    pub fixed_components: i32,
    pub predict: FlmmPredict,
}

/// A validated set of curves.
pub struct FlmmCurves(CurveSet);

/// A fitted model.
pub struct FlmmFit(PipelineState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &FlmmError) -> FlmmStatus {
    match e {
        FlmmError::Io(_) => FlmmStatus::Io,
        FlmmError::Schema(_) | FlmmError::Validation { .. } | FlmmError::Csv(_) | FlmmError::Json(_) => {
            FlmmStatus::Parse
        }
        FlmmError::DegenerateDesign(_) => FlmmStatus::DegenerateDesign,
        FlmmError::NoComponents | FlmmError::NoSignal => FlmmStatus::NoComponents,
        FlmmError::Numerical(_) | FlmmError::ZeroDenominator => FlmmStatus::Numerical,
        FlmmError::InvalidData(_) | FlmmError::OutOfDomain { .. } | FlmmError::Dimension(_) | FlmmError::Config(_) => {
            FlmmStatus::InvalidArgument
        }
    }
}

fn guard<F: FnOnce() -> Result<(), (FlmmStatus, String)>>(f: F) -> FlmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlmmStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            FlmmStatus::Panic
        }
    }
}

fn lift(e: FlmmError) -> (FlmmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (FlmmStatus, String) {
    (FlmmStatus::NullPointer, format!("{name} is null"))
}

fn process_of(p: FlmmProcess) -> Process {
    match p {
        FlmmProcess::B => Process::B,
        FlmmProcess::C => Process::C,
        FlmmProcess::E => Process::E,
    }
}

fn copy_out(src: &[f64], out: *mut f64, len: usize, written: *mut usize) -> Result<(), (FlmmStatus, String)> {
    if !written.is_null() {
        // SAFETY: checked non-null; caller provides a writable usize.
        unsafe { *written = src.len() };
    }
    if len < src.len() {
        return Err((
            FlmmStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: `out` has room for `len >= src.len()` values per the contract.
    unsafe { std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len()) };
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn flmm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn flmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn flmm_options_default() -> FlmmOptions {
    FlmmOptions {
        design: FlmmDesign::Crossed,
        k_mean: 8,
        k_cov: 5,
        grid_d: 100,
        var_level: 0.95,
        n_components: [0; 3],
        fixed_components: 0,
        predict: FlmmPredict::Eblup,
    }
}

/// Loads curves from a CSV file with the default column layout
/// (`curve_id,g1,g2,rep,t,y`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flmm_curves_from_csv(path: *const c_char, out: *mut *mut FlmmCurves) -> FlmmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (FlmmStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let cs = CurveSet::load(Path::new(p), &Schema::default()).map_err(lift)?;
        *out = Box::into_raw(Box::new(FlmmCurves(cs)));
        Ok(())
    })
}

/// Builds curves from `n` observations. `g1` and `g2` are 0-based level
/// codes. Rows sharing `(g1, g2, rep)` form one
/// curve; `g2` may be NULL for the single-intercept design.
///
/// # Safety
/// `g1`, `rep`, `t`, `y` (and `g2` unless NULL) must point to `n` values;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flmm_curves_from_arrays(
    n: usize,
    g1: *const u32,
    g2: *const u32,
    rep: *const u32,
    t: *const f64,
    y: *const f64,
    out: *mut *mut FlmmCurves,
) -> FlmmStatus {
    guard(|| {
        for (p, name) in [(g1.is_null(), "g1"), (rep.is_null(), "rep"), (t.is_null(), "t"), (y.is_null(), "y")] {
            if p {
                return Err(null(name));
            }
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 {
            return Err((FlmmStatus::InvalidArgument, "no observations".into()));
        }
        let g1 = std::slice::from_raw_parts(g1, n);
        let g2 = (!g2.is_null()).then(|| std::slice::from_raw_parts(g2, n));
        let rep = std::slice::from_raw_parts(rep, n);
        let t = std::slice::from_raw_parts(t, n);
        let y = std::slice::from_raw_parts(y, n);
        let mut order = Vec::new();
        let mut rows: HashMap<(u32, Option<u32>, u32), (Vec<f64>, Vec<f64>)> = HashMap::new();
        for k in 0..n {
            let key = (g1[k], g2.map(|g| g[k]), rep[k]);
            let entry = rows.entry(key).or_insert_with(|| {
                order.push(key);
                (Vec::new(), Vec::new())
            });
            entry.0.push(t[k]);
            entry.1.push(y[k]);
        }
        let mut b = CurveSetBuilder::new(vec![]);
        for key in order {
            let (ts, ys) = &rows[&key];
            let ck = CurveKey {
                g1: key.0 as usize,
                g2: key.1.map(|g| g as usize),
                rep: key.2 as usize,
            };
            b.push_curve(ck, vec![], ts, ys);
        }
        let cs = b.build(None).map_err(lift)?;
        *out = Box::into_raw(Box::new(FlmmCurves(cs)));
        Ok(())
    })
}

/// # Safety
/// `curves` must come from an `flmm_curves_*` constructor, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn flmm_curves_free(curves: *mut FlmmCurves) {
    if !curves.is_null() {
        drop(Box::from_raw(curves));
    }
}

/// # Safety
/// `curves` must be a live handle; `n_curves` and `n_points` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn flmm_curves_size(
    curves: *const FlmmCurves,
    n_curves: *mut usize,
    n_points: *mut usize,
) -> FlmmStatus {
    guard(|| {
        let cs = &curves.as_ref().ok_or_else(|| null("curves"))?.0;
        if !n_curves.is_null() {
            *n_curves = cs.n_curves();
        }
        if !n_points.is_null() {
            *n_points = cs.n_points();
        }
        Ok(())
    })
}

/// Runs mean, covariance, eigen and prediction steps once. `opts` may be NULL
/// for defaults.
///
/// # Safety
/// `curves` must be a live handle; `opts` NULL or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flmm_fit(
    curves: *const FlmmCurves,
    opts: *const FlmmOptions,
    out: *mut *mut FlmmFit,
) -> FlmmStatus {
    guard(|| {
        let cs = &curves.as_ref().ok_or_else(|| null("curves"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let o = opts.as_ref().copied().unwrap_or_else(|| flmm_options_default());
        let mut po = PipelineOptions {
            design: match o.design {
                FlmmDesign::Fri => DesignKind::SingleFri,
                FlmmDesign::Crossed => DesignKind::Crossed,
            },
            mean_spec: MeanSpec::intercept_only(),
            grid_d: o.grid_d,
            truncation: if o.fixed_components != 0 {
                Truncation::Fixed(o.n_components)
            } else {
                Truncation::Level(o.var_level)
            },
            predict: match o.predict {
                FlmmPredict::Eblup => PredictMode::Eblup,
                FlmmPredict::Famm => PredictMode::Famm,
                FlmmPredict::Both => PredictMode::Both,
            },
            ..Default::default()
        };
        po.mean.n_basis = o.k_mean;
        po.cov.n_basis = o.k_cov;
        let state = fit_pipeline(cs, &po).map_err(lift)?;
        *out = Box::into_raw(Box::new(FlmmFit(state)));
        Ok(())
    })
}

/// # Safety
/// `fit` must come from `flmm_fit`, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn flmm_fit_free(fit: *mut FlmmFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Estimated error variance.
///
/// # Safety
/// `fit` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flmm_fit_sigma2(fit: *const FlmmFit, out: *mut f64) -> FlmmStatus {
    guard(|| {
        let s = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = s.eigen.sigma2;
        Ok(())
    })
}

/// Number of retained components of `process` (0 when absent).
///
/// # Safety
/// `fit` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flmm_fit_n_components(
    fit: *const FlmmFit,
    process: FlmmProcess,
    out: *mut usize,
) -> FlmmStatus {
    guard(|| {
        let s = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = s.eigen.retained(process_of(process));
        Ok(())
    })
}

/// Copies the evaluation grid. `written` receives the required length even
/// when the buffer is too small.
///
/// # Safety
/// `fit` must be a live handle; `out` must hold `len` values; `written` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn flmm_fit_grid(fit: *const FlmmFit, out: *mut f64, len: usize, written: *mut usize) -> FlmmStatus {
    guard(|| {
        let s = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        copy_out(&s.eigen.grid, out, len, written)
    })
}

/// Copies the retained eigenvalues of `process`.
///
/// # Safety
/// As for `flmm_fit_grid`.
#[no_mangle]
pub unsafe extern "C" fn flmm_fit_eigenvalues(
    fit: *const FlmmFit,
    process: FlmmProcess,
    out: *mut f64,
    len: usize,
    written: *mut usize,
) -> FlmmStatus {
    guard(|| {
        let s = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        let v = s.eigen.get(process_of(process)).map_or(&[][..], |pe| pe.retained_values());
        copy_out(v, out, len, written)
    })
}

/// Copies eigenfunction `k` (0-based) of `process` on the grid.
///
/// # Safety
/// As for `flmm_fit_grid`.
#[no_mangle]
pub unsafe extern "C" fn flmm_fit_eigenfunction(
    fit: *const FlmmFit,
    process: FlmmProcess,
    k: usize,
    out: *mut f64,
    len: usize,
    written: *mut usize,
) -> FlmmStatus {
    guard(|| {
        let s = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        let pe = s
            .eigen
            .get(process_of(process))
            .filter(|pe| k < pe.retained)
            .ok_or_else(|| (FlmmStatus::InvalidArgument, format!("component {k} is not retained")))?;
        let col: Vec<f64> = pe.functions.column(k).iter().copied().collect();
        copy_out(&col, out, len, written)
    })
}

/// Copies fitted values at every observation, in input order of the curve set.
///
/// # Safety
/// As for `flmm_fit_grid`.
#[no_mangle]
pub unsafe extern "C" fn flmm_fit_fitted(fit: *const FlmmFit, out: *mut f64, len: usize, written: *mut usize) -> FlmmStatus {
    guard(|| {
        let s = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        let p = s
            .prediction()
            .ok_or_else(|| (FlmmStatus::NoComponents, "no prediction available".to_string()))?;
        copy_out(&p.fitted, out, len, written)
    })
}
