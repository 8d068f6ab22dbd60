//! Command-line front end: `fit`, `simulate` and `decompose`.
//!
//! Settings come from three layers. Built-in defaults are overridden by a
//! `--config` TOML file, which is overridden by flags given explicitly on
//! the command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::covfit::{CovOptions, CovarianceFit};
use crate::eigen::{decompose, EigenSystem, Truncation};
use crate::error::{FlmmError, Result};
use crate::fdata::{CurveSet, DesignKind, Schema};
use crate::meanfit::{MeanOptions, MeanSpec};
use crate::pipeline::{fit_pipeline, iterate, PipelineOptions, PredictMode};
use crate::sim::{run_study, ScenarioConfig, StudyOptions};

#[derive(Debug, Parser)]
#[command(name = "flmm", version, about = "Functional linear mixed models for sparse curves")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate mean, covariances, eigen system and predictions from a curve file.
    Fit(Flags),
    /// Run a simulation study and write the error report.
    Simulate(Flags),
    /// Eigen-decompose a saved covariance fit (`covariance.json`).
    Decompose(Flags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Simulate(_) => "simulate",
            Command::Decompose(_) => "decompose",
        }
    }

    fn flags(&self) -> &Flags {
        match self {
            Command::Fit(f) | Command::Simulate(f) | Command::Decompose(f) => f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignArg {
    Fri,
    Crossed,
}

impl From<DesignArg> for DesignKind {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::Fri => DesignKind::SingleFri,
            DesignArg::Crossed => DesignKind::Crossed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictArg {
    Eblup,
    Famm,
    Both,
}

impl From<PredictArg> for PredictMode {
    fn from(p: PredictArg) -> Self {
        match p {
            PredictArg::Eblup => PredictMode::Eblup,
            PredictArg::Famm => PredictMode::Famm,
            PredictArg::Both => PredictMode::Both,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML file with any of the settings below (flags take precedence).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Curve file (fit) or covariance.json (decompose).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub design: Option<DesignArg>,
    /// Mean terms, e.g. "t + t:a + t:a:b".
    #[arg(long)]
    pub mean: Option<String>,
    #[arg(long)]
    pub k_mean: Option<usize>,
    #[arg(long)]
    pub k_cov: Option<usize>,
    /// Evaluation grid size for the eigen decomposition.
    #[arg(long)]
    pub grid_d: Option<usize>,
    /// Explained-variance level for truncation.
    #[arg(long)]
    pub var_level: Option<f64>,
    /// Fixed truncation lags "NB,NC,NE" (overrides --var-level).
    #[arg(long)]
    pub n_components: Option<String>,
    #[arg(long, value_enum)]
    pub predict: Option<PredictArg>,
    /// Refinement passes after the first fit.
    #[arg(long)]
    pub iterate: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Scenario for `simulate`: `sparse` (default), `fri-famm` or a TOML file.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Domain "a,b" of the curves (default: observed range).
    #[arg(long)]
    pub domain: Option<String>,
    /// Share one smoothing parameter across the covariance surfaces.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shared_cov_lambda: Option<bool>,
}

/// Settings as read from a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub design: Option<DesignArg>,
    pub mean: Option<String>,
    pub k_mean: Option<usize>,
    pub k_cov: Option<usize>,
    pub grid_d: Option<usize>,
    pub var_level: Option<f64>,
    pub n_components: Option<[usize; 3]>,
    pub predict: Option<PredictMode>,
    pub iterate: Option<usize>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub scenario: Option<PathBuf>,
    pub replicates: Option<usize>,
    pub domain: Option<(f64, f64)>,
    pub shared_cov_lambda: Option<bool>,
}

/// Fully resolved settings of one run, echoed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub design: DesignKind,
    pub mean: String,
    pub k_mean: usize,
    pub k_cov: usize,
    pub grid_d: usize,
    pub var_level: f64,
    pub n_components: Option<[usize; 3]>,
    pub predict: PredictMode,
    pub iterate: usize,
    pub tol: f64,
    pub seed: u64,
    pub threads: usize,
    pub scenario: Option<PathBuf>,
    pub replicates: Option<usize>,
    pub domain: Option<(f64, f64)>,
    pub shared_cov_lambda: bool,
}

fn parse_components(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(FlmmError::Config(format!("--n-components expects NB,NC,NE, got '{s}'")));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .map_err(|_| FlmmError::Config(format!("invalid component count '{p}'")))?;
    }
    Ok(out)
}

fn parse_domain(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || FlmmError::Config(format!("--domain expects a,b, got '{s}'"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    Ok((a, b))
}

impl RunConfig {
    /// Merges defaults, the config file and explicit flags.
    pub fn resolve(command: &str, flags: &Flags) -> Result<RunConfig> {
        let file = match &flags.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str::<FileConfig>(&text).map_err(|e| FlmmError::Config(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        let n_components = match &flags.n_components {
            Some(s) => Some(parse_components(s)?),
            None => file.n_components,
        };
        let domain = match &flags.domain {
            Some(s) => Some(parse_domain(s)?),
            None => file.domain,
        };
        let cfg = RunConfig {
            command: command.into(),
            input: flags.input.clone().or(file.input),
            output_dir: flags
                .output_dir
                .clone()
                .or(file.output_dir)
                .unwrap_or_else(|| PathBuf::from("flmm_out")),
            design: flags.design.or(file.design).unwrap_or(DesignArg::Crossed).into(),
            mean: flags.mean.clone().or(file.mean).unwrap_or_else(|| "t".into()),
            k_mean: flags.k_mean.or(file.k_mean).unwrap_or(8),
            k_cov: flags.k_cov.or(file.k_cov).unwrap_or(5),
            grid_d: flags.grid_d.or(file.grid_d).unwrap_or(100),
            var_level: flags.var_level.or(file.var_level).unwrap_or(0.95),
            n_components,
            predict: flags.predict.map(PredictMode::from).or(file.predict).unwrap_or(PredictMode::Eblup),
            iterate: flags.iterate.or(file.iterate).unwrap_or(0),
            tol: flags.tol.or(file.tol).unwrap_or(1e-4),
            seed: flags.seed.or(file.seed).unwrap_or(1),
            threads: flags.threads.or(file.threads).unwrap_or(0),
            scenario: flags.scenario.clone().or(file.scenario),
            replicates: flags.replicates.or(file.replicates),
            domain,
            shared_cov_lambda: flags.shared_cov_lambda.or(file.shared_cov_lambda).unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &'static str, v: f64, ok: bool, domain: &str| {
            if ok {
                Ok(())
            } else {
                Err(FlmmError::OutOfDomain {
                    name,
                    value: v,
                    domain: domain.into(),
                })
            }
        };
        range("k_mean", self.k_mean as f64, self.k_mean >= 4, "[4, inf)")?;
        range("k_cov", self.k_cov as f64, self.k_cov >= 4, "[4, inf)")?;
        range("grid_d", self.grid_d as f64, self.grid_d >= 10, "[10, inf)")?;
        range("var_level", self.var_level, self.var_level > 0.0 && self.var_level <= 1.0, "(0, 1]")?;
        range("tol", self.tol, self.tol >= 0.0, "[0, inf]")?;
        if let Some(r) = self.replicates {
            range("replicates", r as f64, r >= 1, "[1, inf)")?;
        }
        if let Some((a, b)) = self.domain {
            if !(a < b) {
                return Err(FlmmError::Config(format!("invalid domain [{a}, {b}]")));
            }
        }
        MeanSpec::parse(&self.mean)?;
        match self.command.as_str() {
            "fit" | "decompose" if self.input.is_none() => {
                Err(FlmmError::Config(format!("{} requires --input", self.command)))
            }
            _ => Ok(()),
        }
    }

    pub fn pipeline_options(&self) -> Result<PipelineOptions> {
        Ok(PipelineOptions {
            design: self.design,
            mean_spec: MeanSpec::parse(&self.mean)?,
            mean: MeanOptions {
                n_basis: self.k_mean,
                ..Default::default()
            },
            cov: CovOptions {
                n_basis: self.k_cov,
                separate_lambdas: !self.shared_cov_lambda,
                ..Default::default()
            },
            grid_d: self.grid_d,
            truncation: self.truncation(),
            predict: self.predict,
            famm: Default::default(),
        })
    }

    pub fn truncation(&self) -> Truncation {
        match self.n_components {
            Some(n) => Truncation::Fixed(n),
            None => Truncation::Level(self.var_level),
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    target: String,
    argv: Vec<String>,
    config: &'a RunConfig,
    seed: u64,
    artifacts: Vec<String>,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ErrorReport {
    command: String,
    kind: String,
    message: String,
}

struct Outputs {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Outputs> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.into());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let f = std::fs::File::create(self.path(name))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), value)?;
        Ok(())
    }
}

fn write_eigen(out: &mut Outputs, es: &EigenSystem) -> Result<()> {
    es.write_csv(out.path("eigenfunctions.csv"))?;
    out.json("eigen.json", es)?;
    es.variance_decomposition().write_json(out.path("variance_decomposition.json"))?;
    Ok(())
}

fn cmd_fit(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let schema = Schema {
        domain: cfg.domain,
        ..Default::default()
    };
    let input = cfg.input.as_ref().expect("validated");
    let cs = CurveSet::load(input, &schema)?;
    let opts = cfg.pipeline_options()?;
    let mut state = fit_pipeline(&cs, &opts)?;
    if cfg.iterate > 0 {
        state = iterate(&cs, state, &opts, cfg.iterate, cfg.tol)?;
    }
    let grid = state.eigen.grid.clone();
    state.mean.write_coefficients_csv(out.path("mean_coefficients.csv"))?;
    state.mean.write_terms_csv(out.path("mean_terms.csv"), &grid)?;
    state.covariance.write_surfaces_csv(out.path("covariance_surfaces.csv"), &grid)?;
    out.json("covariance.json", &state.covariance)?;
    write_eigen(out, &state.eigen)?;
    if let Some(p) = &state.eblup {
        p.write_weights_csv(out.path("weights_eblup.csv"), &cs)?;
        p.write_fitted_csv(out.path("fitted_eblup.csv"), &cs)?;
    }
    if let Some(f) = &state.famm {
        f.prediction.write_weights_csv(out.path("weights_famm.csv"), &cs)?;
        f.prediction.write_fitted_csv(out.path("fitted_famm.csv"), &cs)?;
        f.mean.write_terms_csv(out.path("mean_terms_famm.csv"), &grid)?;
        f.write_bands_csv(out.path("bands_famm.csv"))?;
    }
    if state.iterations > 0 {
        out.json("iterations.json", &state.mean_changes)?;
    }
    Ok(state.warnings)
}

fn cmd_decompose(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let input = cfg.input.as_ref().expect("validated");
    let text = std::fs::read_to_string(input)?;
    let fit: CovarianceFit = serde_json::from_str(&text)?;
    let es = decompose(&fit, cfg.grid_d, cfg.truncation())?;
    write_eigen(out, &es)?;
    Ok(vec![])
}

fn cmd_simulate(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let mut scenario = match &cfg.scenario {
        None => ScenarioConfig::sparse(),
        Some(p) if p.as_os_str() == "sparse" => ScenarioConfig::sparse(),
        Some(p) if p.as_os_str() == "fri-famm" => ScenarioConfig::fri_famm(),
        Some(p) => ScenarioConfig::load(p)?,
    };
    scenario.seed = cfg.seed;
    if let Some(r) = cfg.replicates {
        scenario.replicates = r;
    }
    scenario.validate()?;
    std::fs::write(out.path("scenario.toml"), scenario.to_toml_string()?)?;
    let opts = StudyOptions {
        pipeline: cfg.pipeline_options()?,
        fixed_truncation: cfg.n_components.is_none(),
        iterate: cfg.iterate,
        tol: cfg.tol,
    };
    let report = run_study(&scenario, &opts)?;
    report.write_json(out.path("report.json"))?;
    report.average.write_csv(out.path("rrmse.csv"))?;
    report.average.write_table_csv(out.path("rrmse_table.csv"))?;
    let warnings = report
        .failures
        .iter()
        .map(|f| format!("replicate {} failed ({}): {}", f.replicate, f.kind, f.message))
        .collect();
    if report.succeeded == 0 {
        return Err(FlmmError::Numerical("every replicate failed".into()));
    }
    Ok(warnings)
}

fn exit_code(e: &FlmmError) -> i32 {
    match e {
        FlmmError::Config(_) | FlmmError::OutOfDomain { .. } => 2,
        _ => 1,
    }
}

fn execute(command: &Command, argv: &[String]) -> std::result::Result<(), (Option<PathBuf>, FlmmError)> {
    let flags = command.flags();
    let cfg = RunConfig::resolve(command.name(), flags).map_err(|e| (flags.output_dir.clone(), e))?;
    let dir = cfg.output_dir.clone();
    let fail = |e| (Some(dir.clone()), e);
    if cfg.threads > 0 {
        // fails only when a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let mut out = Outputs::new(&dir).map_err(fail)?;
    let warnings = match command {
        Command::Fit(_) => cmd_fit(&cfg, &mut out),
        Command::Simulate(_) => cmd_simulate(&cfg, &mut out),
        Command::Decompose(_) => cmd_decompose(&cfg, &mut out),
    }
    .map_err(fail)?;
    let mut artifacts = out.artifacts.clone();
    artifacts.push("manifest.json".into());
    let manifest = Manifest {
        tool: "flmm",
        version: env!("CARGO_PKG_VERSION"),
        target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        argv: argv.to_vec(),
        config: &cfg,
        seed: cfg.seed,
        artifacts,
        warnings,
    };
    let f = std::fs::File::create(dir.join("manifest.json")).map_err(|e| fail(e.into()))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest).map_err(|e| fail(e.into()))?;
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command, &argv) {
        Ok(()) => 0,
        Err((dir, e)) => {
            eprintln!("error: {e}");
            if let Some(dir) = dir {
                let report = ErrorReport {
                    command: cli.command.name().into(),
                    kind: e.kind().into(),
                    message: e.to_string(),
                };
                if std::fs::create_dir_all(&dir).is_ok() {
                    if let Ok(f) = std::fs::File::create(dir.join("error.json")) {
                        let _ = serde_json::to_writer_pretty(f, &report);
                    }
                }
            }
            exit_code(&e)
        }
    }
}
