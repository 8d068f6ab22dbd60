use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::generate::{generate, GroundTruth};
use super::metrics::{rrmse_eigenfunction, rrmse_function, rrmse_scalar, rrmse_surface, rrmse_vector};
use crate::eigen::Truncation;
use crate::error::Result;
use crate::fdata::{fmt_f64, CurveSet, Process};
use crate::meanfit::MeanSpec;
use crate::pipeline::{fit_pipeline, iterate, PipelineOptions, PipelineState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrmseEntry {
    /// `mu`, `mu_famm`, `coverage_famm`, `K`, `phi`, `nu`, `xi`, `X`, `Y`,
    /// `sigma2` or `sigma2_abs`.
    pub quantity: String,
    pub process: Option<Process>,
    /// Mean term or eigen component (0-based).
    pub component: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RrmseReport {
    pub entries: Vec<RrmseEntry>,
}

impl RrmseReport {
    fn push(&mut self, quantity: &str, process: Option<Process>, component: Option<usize>, value: f64) {
        self.entries.push(RrmseEntry {
            quantity: quantity.into(),
            process,
            component,
            value,
        });
    }

    pub fn get(&self, quantity: &str, process: Option<Process>, component: Option<usize>) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.quantity == quantity && e.process == process && e.component == component)
            .map(|e| e.value)
    }

    /// Entry-wise average; entries missing from some reports are averaged
    /// over the reports that have them.
    pub fn average(reports: &[RrmseReport]) -> RrmseReport {
        let mut out = RrmseReport::default();
        let mut counts: Vec<usize> = Vec::new();
        for r in reports {
            for e in &r.entries {
                match out
                    .entries
                    .iter()
                    .position(|o| o.quantity == e.quantity && o.process == e.process && o.component == e.component)
                {
                    Some(i) => {
                        out.entries[i].value += e.value;
                        counts[i] += 1;
                    }
                    None => {
                        out.entries.push(e.clone());
                        counts.push(1);
                    }
                }
            }
        }
        for (e, n) in out.entries.iter_mut().zip(counts) {
            e.value /= n as f64;
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["quantity", "process", "component", "value"])?;
        for e in &self.entries {
            w.write_record([
                e.quantity.clone(),
                e.process.map_or(String::new(), |p| p.to_string()),
                e.component.map_or(String::new(), |k| (k + 1).to_string()),
                fmt_f64(e.value),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Table layout: one row per quantity and component, one column per
    /// process (`-` for process-free quantities).
    pub fn write_table_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows: Vec<(String, Option<usize>)> = Vec::new();
        for e in &self.entries {
            let key = (e.quantity.clone(), e.component);
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["quantity", "component", "B", "C", "E", "-"])?;
        for (q, k) in rows {
            let mut rec = vec![q.clone(), k.map_or(String::new(), |k| (k + 1).to_string())];
            for p in [Some(Process::B), Some(Process::C), Some(Process::E), None] {
                rec.push(self.get(&q, p, k).map_or(String::new(), fmt_f64));
            }
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores one fitted pipeline against the truth.
pub fn score(truth: &GroundTruth, state: &PipelineState) -> Result<RrmseReport> {
    let mut r = RrmseReport::default();
    let grid = &state.eigen.grid;
    for p in 0..truth.n_mean_terms() {
        let t = truth.mean_term(p, grid);
        r.push("mu", None, Some(p), rrmse_function(&t, &state.mean.term_values(p, grid)?)?);
        if let Some(f) = &state.famm {
            r.push("mu_famm", None, Some(p), rrmse_function(&t, &f.mean.term_values(p, grid)?)?);
            let bands = f.term_bands(&f.mean.design.terms[p].label);
            let hit = bands.iter().zip(&t).filter(|(b, v)| b.lo <= **v && **v <= b.hi).count();
            r.push("coverage_famm", None, Some(p), hit as f64 / bands.len().max(1) as f64);
        }
    }
    let pred = state.prediction();
    for p in Process::ALL {
        let x = p.index();
        let nu_true = truth.eigenvalues(p);
        if nu_true.is_empty() {
            continue;
        }
        let est_surface = state.covariance.evaluate_surface(p, grid)?;
        r.push("K", Some(p), None, rrmse_surface(&truth.covariance(p, grid), &est_surface)?);
        let phi_true = truth.eigenfunctions(p, grid);
        let est = state.eigen.get(p);
        let retained = est.map_or(0, |e| e.retained);
        for k in 0..nu_true.len() {
            let wt: Vec<f64> = truth.weights[x].column(k).iter().cloned().collect();
            if k < retained {
                let e = est.expect("retained components exist");
                let (err, sign) = rrmse_eigenfunction(phi_true.column(k).as_slice(), e.functions.column(k).as_slice())?;
                r.push("phi", Some(p), Some(k), err);
                r.push("nu", Some(p), Some(k), rrmse_scalar(nu_true[k], e.values[k])?);
                if let Some(pred) = pred {
                    let we: Vec<f64> = pred.weights.get(p).column(k).iter().map(|v| sign * v).collect();
                    r.push("xi", Some(p), Some(k), rrmse_vector(&wt, &we)?);
                }
            } else {
                // component missing from the fit: estimate is zero
                r.push("phi", Some(p), Some(k), 1.0);
                r.push("nu", Some(p), Some(k), 1.0);
                r.push("xi", Some(p), Some(k), 1.0);
            }
        }
        if let Some(pred) = pred {
            r.push("X", Some(p), None, rrmse_vector(&truth.curves_at_points[x], &pred.random_points[x])?);
        }
    }
    if let Some(pred) = pred {
        r.push("Y", None, None, rrmse_vector(&truth.signal, &pred.fitted)?);
    }
    let s2 = truth.config.sigma2;
    if s2 > 0.0 {
        r.push("sigma2", None, None, rrmse_scalar(s2, state.covariance.sigma2)?);
    } else {
        r.push("sigma2_abs", None, None, state.covariance.sigma2.abs());
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    /// Design, mean specification and truncation are overwritten per scenario.
    pub pipeline: PipelineOptions,
    /// Fix the truncation lags at the true component counts; otherwise
    /// truncate by `pipeline.truncation`.
    pub fixed_truncation: bool,
    pub iterate: usize,
    pub tol: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            pipeline: PipelineOptions::default(),
            fixed_truncation: true,
            iterate: 0,
            tol: 1e-4,
        }
    }
}

impl StudyOptions {
    /// Pipeline options adapted to the scenario.
    pub fn pipeline_for(&self, cfg: &ScenarioConfig, truth: &GroundTruth) -> Result<PipelineOptions> {
        let mut o = self.pipeline.clone();
        o.design = cfg.design;
        o.mean_spec = MeanSpec::parse(&truth.mean_spec())?;
        if self.fixed_truncation {
            let p = &cfg.processes;
            o.truncation = Truncation::Fixed([p.count(Process::B), p.count(Process::C), p.count(Process::E)]);
        }
        Ok(o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub replicates: usize,
    pub succeeded: usize,
    pub failures: Vec<ReplicateFailure>,
    pub average: RrmseReport,
    pub per_replicate: Vec<Option<RrmseReport>>,
}

impl StudyReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}

/// Generates, fits and scores one replicate.
pub fn run_replicate(cfg: &ScenarioConfig, opts: &StudyOptions, replicate: usize) -> Result<(CurveSet, PipelineState, RrmseReport)> {
    let (cs, truth) = generate(cfg, replicate as u64)?;
    let po = opts.pipeline_for(cfg, &truth)?;
    let mut state = fit_pipeline(&cs, &po)?;
    if opts.iterate > 0 {
        state = iterate(&cs, state, &po, opts.iterate, opts.tol)?;
    }
    let report = score(&truth, &state)?;
    Ok((cs, state, report))
}

/// Runs every replicate in parallel. Failed replicates are listed and left
/// out of the average.
pub fn run_study(cfg: &ScenarioConfig, opts: &StudyOptions) -> Result<StudyReport> {
    cfg.validate()?;
    let results: Vec<Result<RrmseReport>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, opts, r).map(|(_, _, rep)| rep))
        .collect();
    let mut failures = Vec::new();
    let mut per_replicate = Vec::with_capacity(results.len());
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rep) => per_replicate.push(Some(rep)),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                failures.push(ReplicateFailure {
                    replicate: r,
                    kind: e.kind().into(),
                    message: e.to_string(),
                });
                per_replicate.push(None);
            }
        }
    }
    let ok: Vec<RrmseReport> = per_replicate.iter().flatten().cloned().collect();
    Ok(StudyReport {
        replicates: cfg.replicates,
        succeeded: ok.len(),
        failures,
        average: RrmseReport::average(&ok),
        per_replicate,
    })
}
