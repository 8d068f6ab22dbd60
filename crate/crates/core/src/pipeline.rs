//! Steps 1 to 4 chained together, plus the refinement loop.

use serde::{Deserialize, Serialize};

use crate::covfit::{fit_covariances, CovOptions, CovarianceFit};
use crate::eigen::{decompose, EigenSystem, Truncation, VarianceDecomposition};
use crate::error::{FlmmError, Result};
use crate::fdata::{CurveSet, DesignKind, GroupingDesign};
use crate::meanfit::{fit_mean, MeanModel, MeanOptions, MeanSpec};
use crate::predict::{build_blup_system, fit_famm, predict_eblup, FammFit, FammOptions, PredictMethod, PredictionResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    Eblup,
    Famm,
    Both,
}

impl PredictMode {
    pub fn eblup(self) -> bool {
        matches!(self, PredictMode::Eblup | PredictMode::Both)
    }

    pub fn famm(self) -> bool {
        matches!(self, PredictMode::Famm | PredictMode::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub design: DesignKind,
    pub mean_spec: MeanSpec,
    pub mean: MeanOptions,
    pub cov: CovOptions,
    pub grid_d: usize,
    pub truncation: Truncation,
    pub predict: PredictMode,
    pub famm: FammOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            design: DesignKind::Crossed,
            mean_spec: MeanSpec::intercept_only(),
            mean: MeanOptions::default(),
            cov: CovOptions::default(),
            grid_d: 100,
            truncation: Truncation::Level(0.95),
            predict: PredictMode::Eblup,
            famm: FammOptions::default(),
        }
    }
}

/// Everything produced by one pass.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub design: GroupingDesign,
    pub mean: MeanModel,
    pub covariance: CovarianceFit,
    pub eigen: EigenSystem,
    pub decomposition: VarianceDecomposition,
    pub eblup: Option<PredictionResult>,
    pub famm: Option<FammFit>,
    /// Refinement passes run after the first.
    pub iterations: usize,
    /// Relative mean change of every refinement pass.
    pub mean_changes: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PipelineState {
    /// Prediction used for refinement and reporting (EBLUP when available).
    pub fn prediction(&self) -> Option<&PredictionResult> {
        self.eblup.as_ref().or(self.famm.as_ref().map(|f| &f.prediction))
    }
}

fn warn(warnings: &mut Vec<String>, msg: String) {
    log::warn!("{msg}");
    warnings.push(msg);
}

/// Steps 2 to 4 given a mean.
fn downstream(cs: &CurveSet, design: GroupingDesign, mean: MeanModel, opts: &PipelineOptions) -> Result<PipelineState> {
    let mut warnings = mean.warnings.clone();
    let centered = cs.center_responses(&mean)?;
    let covariance = fit_covariances(&centered, &design, &opts.cov)?;
    if covariance.negative_sigma2 {
        warn(
            &mut warnings,
            format!("negative error variance estimate {} clamped to 0", covariance.sigma2_raw),
        );
    }
    let eigen = decompose(&covariance, opts.grid_d, opts.truncation)?;
    let decomposition = eigen.variance_decomposition();
    let mut eblup = None;
    if opts.predict.eblup() {
        if eigen.total_retained() == 0 {
            warn(&mut warnings, "no retained components; EBLUP skipped".into());
        } else {
            let sys = build_blup_system(&centered, &eigen, &design)?;
            let (weights, method) = predict_eblup(&sys, centered.y())?;
            if method.is_degraded() {
                warn(&mut warnings, format!("EBLUP system solved via {method:?}"));
            }
            let mean_points = mean.predict_points(cs)?;
            eblup = Some(PredictionResult::assemble(PredictMethod::Eblup, &sys, weights, &mean_points, method));
        }
    }
    let famm = if opts.predict.famm() {
        Some(fit_famm(cs, &eigen, &design, &opts.mean_spec, &opts.mean, &opts.famm)?)
    } else {
        None
    };
    Ok(PipelineState {
        design,
        mean,
        covariance,
        eigen,
        decomposition,
        eblup,
        famm,
        iterations: 0,
        mean_changes: Vec::new(),
        warnings,
    })
}

/// One full pass over the four estimation steps.
pub fn fit_pipeline(cs: &CurveSet, opts: &PipelineOptions) -> Result<PipelineState> {
    let design = cs.design(opts.design)?;
    let mean = fit_mean(cs, &opts.mean_spec, &opts.mean)?;
    downstream(cs, design, mean, opts)
}

/// Stacked values of every mean term on the eigen grid.
fn mean_on_grid(mean: &MeanModel, grid: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(mean.n_terms() * grid.len());
    for p in 0..mean.n_terms() {
        out.extend(mean.term_values(p, grid)?);
    }
    Ok(out)
}

/// Refinement: remove the predicted random curves, refit the mean and rerun
/// the later steps. Stops once the relative change of the mean on the grid
/// falls below `tol`, after `max_iters` passes, or when the change grows two
/// passes in a row.
pub fn iterate(cs: &CurveSet, state: PipelineState, opts: &PipelineOptions, max_iters: usize, tol: f64) -> Result<PipelineState> {
    if !(tol >= 0.0) {
        return Err(FlmmError::OutOfDomain {
            name: "tol",
            value: tol,
            domain: "[0, inf]".into(),
        });
    }
    let mut state = state;
    let mut growth = 0;
    for _ in 0..max_iters {
        let Some(pred) = state.prediction() else {
            warn(&mut state.warnings, "no prediction available; refinement stopped".into());
            break;
        };
        let y: Vec<f64> = (0..cs.n_points())
            .map(|a| cs.y()[a] - pred.random_points.iter().map(|r| r[a]).sum::<f64>())
            .collect();
        let reduced = cs.with_responses(y)?;
        let mean = fit_mean(&reduced, &opts.mean_spec, &opts.mean)?;
        let before = mean_on_grid(&state.mean, &state.eigen.grid)?;
        let after = mean_on_grid(&mean, &state.eigen.grid)?;
        let num: f64 = before.iter().zip(&after).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = before.iter().map(|a| a * a).sum::<f64>().sqrt();
        let change = if den > 0.0 { num / den } else { num };

        let mut next = downstream(cs, state.design, mean, opts)?;
        next.iterations = state.iterations + 1;
        next.mean_changes = std::mem::take(&mut state.mean_changes);
        let mut warnings = std::mem::take(&mut state.warnings);
        for w in next.warnings.drain(..) {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        next.warnings = warnings;
        if let Some(&last) = next.mean_changes.last() {
            growth = if change > last { growth + 1 } else { 0 };
        }
        next.mean_changes.push(change);
        state = next;
        log::info!("refinement pass {}: relative mean change {change:.3e}", state.iterations);
        if change < tol {
            break;
        }
        if growth >= 2 {
            warn(
                &mut state.warnings,
                format!("refinement diverging after {} passes; stopped", state.iterations),
            );
            break;
        }
    }
    Ok(state)
}
