use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlmmError, Result};
use crate::fdata::{DesignKind, Process};

/// Number of observation points per curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PointLaw {
    Fixed { n: usize },
    /// Discrete uniform on `min..=max`.
    Uniform { min: usize, max: usize },
}

/// Univariate functions used for mean terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Zero,
    Constant { value: f64 },
    Linear { intercept: f64, slope: f64 },
    /// `sin(t) + t`
    SinPlusT,
    /// `amplitude * sin(2π frequency t)`
    Sine { amplitude: f64, frequency: f64 },
    /// `amplitude * cos(2π frequency t)`
    Cosine { amplitude: f64, frequency: f64 },
}

impl Shape {
    pub fn eval(&self, t: f64) -> f64 {
        use std::f64::consts::TAU;
        match *self {
            Shape::Zero => 0.0,
            Shape::Constant { value } => value,
            Shape::Linear { intercept, slope } => intercept + slope * t,
            Shape::SinPlusT => t.sin() + t,
            Shape::Sine { amplitude, frequency } => amplitude * (TAU * frequency * t).sin(),
            Shape::Cosine { amplitude, frequency } => amplitude * (TAU * frequency * t).cos(),
        }
    }
}

/// How a scalar covariate is assigned to curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// `g1 mod 2`
    G1Parity,
    /// `g2 mod 2` (the replicate index when there is no `g2`)
    G2Parity,
    /// `rep mod 2`
    RepParity,
    /// Uniform on `[0, 1]`, drawn per curve.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub assign: Assignment,
    /// Varying coefficient multiplying the covariate.
    pub effect: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanConfig {
    pub intercept: Shape,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Shifted Legendre polynomials of the given degrees.
    Legendre,
    /// Index 0 is the constant, `2m - 1` is `√2 sin(2πmu)`, `2m` is `√2 cos(2πmu)`.
    Fourier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub family: Family,
    pub orders: Vec<usize>,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpecs {
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<ProcessSpec>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<ProcessSpec>,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<ProcessSpec>,
}

impl ProcessSpecs {
    pub fn get(&self, p: Process) -> Option<&ProcessSpec> {
        match p {
            Process::B => self.b.as_ref(),
            Process::C => self.c.as_ref(),
            Process::E => self.e.as_ref(),
        }
    }

    pub fn count(&self, p: Process) -> usize {
        self.get(p).map_or(0, |s| s.eigenvalues.len())
    }
}

/// A synthetic scenario. In the single-intercept design every `g1` level
/// holds `j * h` curves and `g2` is kept only as a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub design: DesignKind,
    pub i: usize,
    pub j: usize,
    pub h: usize,
    pub points: PointLaw,
    pub domain: (f64, f64),
    pub mean: MeanConfig,
    pub processes: ProcessSpecs,
    pub sigma2: f64,
    pub seed: u64,
    pub replicates: usize,
    #[serde(default = "default_true")]
    pub center_decorrelate: bool,
}

fn default_true() -> bool {
    true
}

impl ScenarioConfig {
    /// The sparse crossed scenario: `I = J = 40`, `H = 3`, 3 to 10 points per
    /// curve, `ν_k = 2/k`, `σ² = 0.05`, `μ(t) = sin(t) + t`.
    pub fn sparse() -> ScenarioConfig {
        let nu = vec![2.0, 1.0];
        ScenarioConfig {
            design: DesignKind::Crossed,
            i: 40,
            j: 40,
            h: 3,
            points: PointLaw::Uniform { min: 3, max: 10 },
            domain: (0.0, 1.0),
            mean: MeanConfig {
                intercept: Shape::SinPlusT,
                covariates: vec![],
            },
            processes: ProcessSpecs {
                b: Some(ProcessSpec {
                    family: Family::Legendre,
                    orders: vec![0, 2],
                    eigenvalues: nu.clone(),
                }),
                c: Some(ProcessSpec {
                    family: Family::Legendre,
                    orders: vec![1, 3],
                    eigenvalues: nu.clone(),
                }),
                e: Some(ProcessSpec {
                    family: Family::Fourier,
                    orders: vec![1, 2],
                    eigenvalues: nu,
                }),
            },
            sigma2: 0.05,
            seed: 1,
            replicates: 200,
            center_decorrelate: true,
        }
    }

    /// Single-intercept scenario shaped like a small phonetics study: 9
    /// speakers with 16 words x 5 repetitions each, 22 to 57 points per curve,
    /// eigenvalues and error variance of a fitted speech-production model and
    /// a binary covariate that alternates over words.
    pub fn fri_famm() -> ScenarioConfig {
        ScenarioConfig {
            design: DesignKind::SingleFri,
            i: 9,
            j: 16,
            h: 5,
            points: PointLaw::Uniform { min: 22, max: 57 },
            domain: (0.0, 1.0),
            mean: MeanConfig {
                intercept: Shape::Sine {
                    amplitude: 0.2,
                    frequency: 0.5,
                },
                covariates: vec![CovariateSpec {
                    name: "a".into(),
                    assign: Assignment::G2Parity,
                    effect: Shape::Cosine {
                        amplitude: 0.1,
                        frequency: 1.0,
                    },
                }],
            },
            processes: ProcessSpecs {
                b: Some(ProcessSpec {
                    family: Family::Legendre,
                    orders: vec![0, 1],
                    eigenvalues: vec![5.84e-3, 3.23e-3],
                }),
                c: None,
                e: Some(ProcessSpec {
                    family: Family::Fourier,
                    orders: vec![0, 1, 2],
                    eigenvalues: vec![19.53e-3, 7.59e-3, 2.73e-3],
                }),
            },
            sigma2: 3.94e-3,
            seed: 1,
            replicates: 200,
            center_decorrelate: true,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig = toml::from_str(s).map_err(|e| FlmmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FlmmError::Config(e.to_string()))
    }

    pub fn n_curves(&self) -> usize {
        self.i * self.j * self.h
    }

    /// Number of levels of each process.
    pub fn levels(&self) -> [usize; 3] {
        match self.design {
            DesignKind::SingleFri => [self.i, 0, self.n_curves()],
            DesignKind::Crossed => [self.i, self.j, self.n_curves()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlmmError::Config(m));
        if self.i == 0 || self.j == 0 || self.h == 0 {
            return bad("i, j and h must be at least 1".into());
        }
        match self.points {
            PointLaw::Fixed { n } if n == 0 => return bad("point count must be at least 1".into()),
            PointLaw::Uniform { min, max } if min == 0 || min > max => {
                return bad(format!("invalid point-count bounds {min}..={max}"))
            }
            _ => {}
        }
        if !(self.domain.0 < self.domain.1) || !self.domain.0.is_finite() || !self.domain.1.is_finite() {
            return bad(format!("invalid domain [{}, {}]", self.domain.0, self.domain.1));
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return bad(format!("sigma2 must be nonnegative, got {}", self.sigma2));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.design == DesignKind::SingleFri && self.processes.c.is_some() {
            return bad("process C requires the crossed design".into());
        }
        let levels = self.levels();
        for p in Process::ALL {
            let Some(s) = self.processes.get(p) else { continue };
            if s.orders.len() != s.eigenvalues.len() {
                return bad(format!("process {p}: {} orders for {} eigenvalues", s.orders.len(), s.eigenvalues.len()));
            }
            let mut o = s.orders.clone();
            o.sort_unstable();
            o.dedup();
            if o.len() != s.orders.len() {
                return bad(format!("process {p}: repeated eigenfunction order"));
            }
            if s.eigenvalues.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return bad(format!("process {p}: eigenvalues must be positive"));
            }
            if s.eigenvalues.windows(2).any(|w| w[1] > w[0]) {
                return bad(format!("process {p}: eigenvalues must be in descending order"));
            }
            if self.center_decorrelate && levels[p.index()] <= s.eigenvalues.len() {
                return bad(format!(
                    "process {p}: {} levels cannot be decorrelated over {} components",
                    levels[p.index()],
                    s.eigenvalues.len()
                ));
            }
        }
        let mut names: Vec<&str> = self.mean.covariates.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.mean.covariates.len() {
            return bad("repeated covariate name".into());
        }
        Ok(())
    }
}
