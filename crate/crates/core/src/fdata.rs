//! Irregularly sampled curves with a one- or two-way grouping structure.
//!
//! Points are stored curve by curve in a compressed layout: the observations
//! of curve `c` live in `t[offsets[c]..offsets[c + 1]]` (and likewise `y`).

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlmmError, Result};
use crate::meanfit::MeanModel;

/// The three latent processes of the crossed model: speaker-level intercept
/// `B`, word-level intercept `C`, and the curve-level smooth residual `E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Process {
    B,
    C,
    E,
}

impl Process {
    pub const ALL: [Process; 3] = [Process::B, Process::C, Process::E];

    pub fn index(self) -> usize {
        match self {
            Process::B => 0,
            Process::C => 1,
            Process::E => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Process::B => "B",
            Process::C => "C",
            Process::E => "E",
        }
    }
}

impl std::fmt::Display for Process {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Process {
    type Err = FlmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" | "b" => Ok(Process::B),
            "C" | "c" => Ok(Process::C),
            "E" | "e" => Ok(Process::E),
            other => Err(FlmmError::Config(format!("unknown process '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    /// One functional random intercept (`B`) plus the smooth residual `E`.
    #[serde(alias = "fri")]
    SingleFri,
    /// Crossed intercepts `B` and `C` plus `E`.
    Crossed,
}

impl std::str::FromStr for DesignKind {
    type Err = FlmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fri" | "single" | "single-fri" => Ok(DesignKind::SingleFri),
            "crossed" | "crossed-fris" => Ok(DesignKind::Crossed),
            other => Err(FlmmError::Config(format!("unknown design '{other}'"))),
        }
    }
}

/// Which random processes a design contains and how many levels each has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingDesign {
    pub kind: DesignKind,
    /// Level counts `[L^B, L^C, L^E]`; `L^C = 0` for the single-intercept design.
    pub levels: [usize; 3],
}

impl GroupingDesign {
    pub fn processes(&self) -> &'static [Process] {
        match self.kind {
            DesignKind::SingleFri => &[Process::B, Process::E],
            DesignKind::Crossed => &Process::ALL,
        }
    }

    pub fn has(&self, p: Process) -> bool {
        self.processes().contains(&p)
    }

    pub fn levels(&self, p: Process) -> usize {
        self.levels[p.index()]
    }
}

/// Identity of one curve inside the grouping structure (dense 0-based indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurveKey {
    pub g1: usize,
    pub g2: Option<usize>,
    pub rep: usize,
}

/// Original string labels kept for reporting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub curve: Vec<String>,
    pub g1: Vec<String>,
    pub g2: Vec<String>,
}

/// Column names used when reading a curve file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub curve_id: String,
    pub g1: String,
    pub g2: Option<String>,
    pub rep: Option<String>,
    pub t: String,
    pub y: String,
    /// Covariate columns; `None` picks up every column whose name starts with `x_`.
    pub covariates: Option<Vec<String>>,
    /// Declared domain; defaults to the observed range of `t`.
    pub domain: Option<(f64, f64)>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            curve_id: "curve_id".into(),
            g1: "g1".into(),
            g2: Some("g2".into()),
            rep: Some("rep".into()),
            t: "t".into(),
            y: "y".into(),
            covariates: None,
            domain: None,
        }
    }
}

/// A set of irregularly observed curves.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    keys: Vec<CurveKey>,
    offsets: Vec<usize>,
    t: Vec<f64>,
    y: Vec<f64>,
    covariate_names: Vec<String>,
    covariates: Vec<Vec<f64>>,
    domain: (f64, f64),
    n_g1: usize,
    n_g2: Option<usize>,
    labels: LabelTable,
}

impl CurveSet {
    pub fn n_curves(&self) -> usize {
        self.keys.len()
    }

    /// Total number of observation points.
    pub fn n_points(&self) -> usize {
        self.t.len()
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn domain_length(&self) -> f64 {
        self.domain.1 - self.domain.0
    }

    pub fn n_g1(&self) -> usize {
        self.n_g1
    }

    pub fn n_g2(&self) -> Option<usize> {
        self.n_g2
    }

    pub fn key(&self, curve: usize) -> CurveKey {
        self.keys[curve]
    }

    pub fn keys(&self) -> &[CurveKey] {
        &self.keys
    }

    pub fn range(&self, curve: usize) -> std::ops::Range<usize> {
        self.offsets[curve]..self.offsets[curve + 1]
    }

    pub fn curve_t(&self, curve: usize) -> &[f64] {
        &self.t[self.range(curve)]
    }

    pub fn curve_y(&self, curve: usize) -> &[f64] {
        &self.y[self.range(curve)]
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariates(&self, curve: usize) -> &[f64] {
        &self.covariates[curve]
    }

    pub fn labels(&self) -> &LabelTable {
        &self.labels
    }

    /// Curve index owning each observation point.
    pub fn point_curves(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_points());
        for c in 0..self.n_curves() {
            out.extend(std::iter::repeat_n(c, self.range(c).len()));
        }
        out
    }

    /// Grouping level of `curve` for `process`.
    pub fn level(&self, curve: usize, process: Process) -> usize {
        let key = self.keys[curve];
        match process {
            Process::B => key.g1,
            Process::C => key.g2.expect("crossed design requires g2"),
            Process::E => curve,
        }
    }

    pub fn design(&self, kind: DesignKind) -> Result<GroupingDesign> {
        let levels = match kind {
            DesignKind::SingleFri => [self.n_g1, 0, self.n_curves()],
            DesignKind::Crossed => {
                let j = self.n_g2.ok_or_else(|| {
                    FlmmError::DegenerateDesign("crossed design requires g2 on every point".into())
                })?;
                [self.n_g1, j, self.n_curves()]
            }
        };
        Ok(GroupingDesign { kind, levels })
    }

    /// Copy with the responses replaced.
    pub fn with_responses(&self, y: Vec<f64>) -> Result<CurveSet> {
        if y.len() != self.y.len() {
            return Err(FlmmError::Dimension(format!(
                "expected {} responses, got {}",
                self.y.len(),
                y.len()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(FlmmError::Validation {
                row: i,
                message: "non-finite response".into(),
            });
        }
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }

    /// Subtracts the fitted mean `mu(t, x)` from every response.
    pub fn center_responses(&self, mean: &MeanModel) -> Result<CurveSet> {
        let fitted = mean.predict_points(self)?;
        let y = self.y.iter().zip(fitted.iter()).map(|(y, m)| y - m).collect();
        self.with_responses(y)
    }

    /// Reads a comma-separated curve file.
    pub fn load(path: impl AsRef<Path>, schema: &Schema) -> Result<CurveSet> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_reader(file, schema)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, schema: &Schema) -> Result<CurveSet> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let require = |name: &str| find(name).ok_or_else(|| FlmmError::Schema(format!("missing column '{name}'")));

        let c_curve = require(&schema.curve_id)?;
        let c_g1 = require(&schema.g1)?;
        let c_t = require(&schema.t)?;
        let c_y = require(&schema.y)?;
        let c_g2 = schema.g2.as_deref().and_then(find);
        let c_rep = schema.rep.as_deref().and_then(find);
        let cov_names: Vec<String> = match &schema.covariates {
            Some(names) => names.clone(),
            None => headers.iter().filter(|h| h.starts_with("x_")).map(String::from).collect(),
        };
        let c_cov: Vec<usize> = cov_names.iter().map(|n| require(n)).collect::<Result<_>>()?;

        let mut builder = CurveSetBuilder::new(cov_names);
        let mut g1_index: HashMap<String, usize> = HashMap::new();
        let mut g2_index: HashMap<String, usize> = HashMap::new();
        let mut curve_index: HashMap<String, usize> = HashMap::new();
        let mut labels = LabelTable::default();
        let mut reps: Vec<Option<String>> = Vec::new();

        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            // header is line 1
            let row = i + 2;
            let field = |c: usize| record.get(c).unwrap_or("").to_string();
            let parse = |c: usize, what: &str| -> Result<f64> {
                let raw = field(c);
                let v: f64 = raw.parse().map_err(|_| FlmmError::Validation {
                    row,
                    message: format!("cannot parse {what} '{raw}'"),
                })?;
                if !v.is_finite() {
                    return Err(FlmmError::Validation {
                        row,
                        message: format!("non-finite {what}"),
                    });
                }
                Ok(v)
            };
            let t = parse(c_t, "t")?;
            let y = parse(c_y, "y")?;
            if let Some((lo, hi)) = schema.domain {
                if t < lo || t > hi {
                    return Err(FlmmError::Validation {
                        row,
                        message: format!("t = {t} outside declared domain [{lo}, {hi}]"),
                    });
                }
            }
            let x: Vec<f64> = c_cov
                .iter()
                .zip(builder.covariate_names.iter())
                .map(|(&c, name)| parse(c, name))
                .collect::<Result<_>>()?;

            let g1_label = field(c_g1);
            let next = g1_index.len();
            let g1 = *g1_index.entry(g1_label.clone()).or_insert_with(|| {
                labels.g1.push(g1_label.clone());
                next
            });
            let g2 = match c_g2 {
                Some(c) => {
                    let label = field(c);
                    let next = g2_index.len();
                    Some(*g2_index.entry(label.clone()).or_insert_with(|| {
                        labels.g2.push(label.clone());
                        next
                    }))
                }
                None => None,
            };
            let rep_label = c_rep.map(field);

            let curve_label = field(c_curve);
            match curve_index.get(&curve_label) {
                Some(&c) => {
                    let key = builder.keys[c];
                    if key.g1 != g1 || key.g2 != g2 || reps[c] != rep_label {
                        return Err(FlmmError::Validation {
                            row,
                            message: format!("curve '{curve_label}' has inconsistent grouping indices"),
                        });
                    }
                    if builder.covariates[c] != x {
                        return Err(FlmmError::Validation {
                            row,
                            message: format!("curve '{curve_label}' has inconsistent covariates"),
                        });
                    }
                    builder.points[c].push((t, y));
                }
                None => {
                    let c = builder.keys.len();
                    curve_index.insert(curve_label.clone(), c);
                    labels.curve.push(curve_label);
                    reps.push(rep_label);
                    builder.keys.push(CurveKey { g1, g2, rep: 0 });
                    builder.covariates.push(x);
                    builder.points.push(vec![(t, y)]);
                }
            }
        }

        // Dense repetition indices within each (g1, g2) cell.
        let mut cell_reps: HashMap<(usize, Option<usize>), HashMap<Option<String>, usize>> = HashMap::new();
        let mut cell_count: HashMap<(usize, Option<usize>), usize> = HashMap::new();
        for (c, key) in builder.keys.iter_mut().enumerate() {
            let cell = (key.g1, key.g2);
            key.rep = match &reps[c] {
                Some(label) => {
                    let map = cell_reps.entry(cell).or_default();
                    let next = map.len();
                    *map.entry(Some(label.clone())).or_insert(next)
                }
                None => {
                    let n = cell_count.entry(cell).or_insert(0);
                    *n += 1;
                    *n - 1
                }
            };
        }

        let mut cs = builder.build(schema.domain)?;
        if c_g2.is_none() {
            cs.n_g2 = None;
        }
        cs.labels = labels;
        Ok(cs)
    }

    /// Writes the curve set with the loader's default schema, numbers in
    /// 17 significant digits.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["curve_id".to_string(), "g1".into()];
        if self.n_g2.is_some() {
            header.push("g2".into());
        }
        header.extend(["rep".to_string(), "t".into(), "y".into()]);
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for c in 0..self.n_curves() {
            let key = self.keys[c];
            for p in self.range(c) {
                let mut rec = vec![self.curve_label(c), self.g1_label(key.g1)];
                if let Some(g2) = key.g2 {
                    rec.push(self.g2_label(g2));
                }
                rec.push(key.rep.to_string());
                rec.push(fmt_f64(self.t[p]));
                rec.push(fmt_f64(self.y[p]));
                rec.extend(self.covariates[c].iter().map(|v| fmt_f64(*v)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn curve_label(&self, c: usize) -> String {
        self.labels.curve.get(c).cloned().unwrap_or_else(|| c.to_string())
    }

    pub fn g1_label(&self, i: usize) -> String {
        self.labels.g1.get(i).cloned().unwrap_or_else(|| i.to_string())
    }

    pub fn g2_label(&self, j: usize) -> String {
        self.labels.g2.get(j).cloned().unwrap_or_else(|| j.to_string())
    }
}

/// Formats a float with 17 significant digits (exact round-trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Incremental construction of a [`CurveSet`] from in-memory curves.
#[derive(Debug, Clone, Default)]
pub struct CurveSetBuilder {
    covariate_names: Vec<String>,
    keys: Vec<CurveKey>,
    covariates: Vec<Vec<f64>>,
    points: Vec<Vec<(f64, f64)>>,
}

impl CurveSetBuilder {
    pub fn new(covariate_names: Vec<String>) -> Self {
        CurveSetBuilder {
            covariate_names,
            ..Default::default()
        }
    }

    pub fn push_curve(&mut self, key: CurveKey, covariates: Vec<f64>, t: &[f64], y: &[f64]) -> &mut Self {
        assert_eq!(t.len(), y.len(), "t and y must have equal length");
        self.keys.push(key);
        self.covariates.push(covariates);
        self.points.push(t.iter().cloned().zip(y.iter().cloned()).collect());
        self
    }

    pub fn build(self, domain: Option<(f64, f64)>) -> Result<CurveSet> {
        let n = self.keys.len();
        if n == 0 {
            return Err(FlmmError::InvalidData("no curves".into()));
        }
        let p = self.covariate_names.len();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut t = Vec::new();
        let mut y = Vec::new();
        for (c, pts) in self.points.iter().enumerate() {
            if pts.is_empty() {
                return Err(FlmmError::InvalidData(format!("curve {c} has no observations")));
            }
            if self.covariates[c].len() != p {
                return Err(FlmmError::Dimension(format!(
                    "curve {c} has {} covariates, expected {p}",
                    self.covariates[c].len()
                )));
            }
            for &(ti, yi) in pts {
                if !ti.is_finite() || !yi.is_finite() {
                    return Err(FlmmError::Validation {
                        row: t.len(),
                        message: "non-finite t or y".into(),
                    });
                }
                t.push(ti);
                y.push(yi);
            }
            offsets.push(t.len());
        }
        let observed = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let domain = domain.unwrap_or(observed);
        if !(domain.0 < domain.1) {
            return Err(FlmmError::InvalidData(format!(
                "degenerate domain [{}, {}]",
                domain.0, domain.1
            )));
        }
        if let Some(i) = t.iter().position(|&v| v < domain.0 || v > domain.1) {
            return Err(FlmmError::Validation {
                row: i,
                message: format!("t = {} outside domain [{}, {}]", t[i], domain.0, domain.1),
            });
        }
        let n_g1 = self.keys.iter().map(|k| k.g1 + 1).max().unwrap_or(0);
        let all_g2 = self.keys.iter().all(|k| k.g2.is_some());
        let any_g2 = self.keys.iter().any(|k| k.g2.is_some());
        if any_g2 && !all_g2 {
            return Err(FlmmError::InvalidData("g2 present on some curves but not all".into()));
        }
        let n_g2 = all_g2.then(|| self.keys.iter().filter_map(|k| k.g2).max().unwrap_or(0) + 1);
        Ok(CurveSet {
            keys: self.keys,
            offsets,
            t,
            y,
            covariate_names: self.covariate_names,
            covariates: self.covariates,
            domain,
            n_g1,
            n_g2,
            labels: LabelTable::default(),
        })
    }
}
