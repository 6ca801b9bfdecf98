//! Experiment orchestration: plain-text specs, a catalog of cross-module
//! comparisons, Bonferroni-corrected verdicts and CSV/JSON reports.
//!
//! A spec file holds one section per experiment:
//!
//! ```text
//! # comments start with '#'
//! [many-to-few-k1]
//! replicates = 100000
//! seed = 7
//! threshold = 3
//! output = results
//! L = 5
//! t = 1, 2          # comma-separated values form a grid
//! ```
//!
//! `replicates`, `seed`, `threshold`, `output` and `targets` are reserved; every
//! other key is an experiment parameter. List-valued parameters separate their
//! entries with spaces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbm::{many_to_few_lhs, run_reversed, run_to, BbmConfig, Harmonics, ReversedProcess};
use crate::csbp::{entrance_law_check, offdiagonal_mass_mc, reduced_count, BranchingMechanism, LaplaceFlow, ReducedRates};
use crate::csbp::csbp_moments;
use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::quad::{linear_fit, GaussLegendre};
use crate::rng::{derive_seed, stream};
use crate::spectral::{gap_scaling, solve_slp, GreenFunction, LimitSolution, Potential};
use crate::spine::{discounted_occupation, jump_moment_limit, k_spine, KSpineBudget, ReversedMomentTable, SpineConfig};
use crate::stats::{bonferroni_threshold, z_score, Accumulator};
use crate::ultrametric::Composition;

/// Description of a catalog entry.
#[derive(Clone, Debug)]
pub struct ExperimentInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub targets: &'static [&'static str],
    pub default_replicates: u64,
    /// Parameter names with their default values.
    pub params: &'static [(&'static str, &'static str)],
}

pub const CATALOG: &[ExperimentInfo] = &[
    ExperimentInfo {
        name: "spectral-gap",
        summary: "slope of log(lambda_inf - lambda_1(L)) against L versus -2 beta",
        targets: &["spectral"],
        default_replicates: 1,
        params: &[("height", "4"), ("edge", "1"), ("ls", "10 14 18 22"), ("rel_tol", "0.1")],
    },
    ExperimentInfo {
        name: "green-check",
        summary: "spine resolvent closed form versus discounted spine occupation",
        targets: &["spectral", "spine"],
        default_replicates: 2000,
        params: &[
            ("potential", "step:4"),
            ("L", "10"),
            ("xi", "1"),
            ("x", "3"),
            ("y", "2 4.5"),
            ("delta", "0.25"),
            ("horizon", "12"),
            ("dt", "2e-3"),
        ],
    },
    ExperimentInfo {
        name: "many-to-few-k1",
        summary: "E_x[sum h(X_v(t))] / (h(x) e^{-wt}) = 1",
        targets: &["bbm", "spectral"],
        default_replicates: 100_000,
        params: &[("potential", "zero"), ("L", "5"), ("x", "2"), ("t", "2")],
    },
    ExperimentInfo {
        name: "many-to-few-k2",
        summary: "BBM distinct-pair sum versus 2 h(x) times the 2-spine moment",
        targets: &["bbm", "spine"],
        default_replicates: 100_000,
        params: &[("potential", "zero"), ("L", "5"), ("x", "2"), ("t", "2"), ("spine_outer", "20000")],
    },
    ExperimentInfo {
        name: "reduced-martingale",
        summary: "unit mean of W_{s,t} and the compensation identity for the reduced process",
        targets: &["csbp"],
        default_replicates: 100_000,
        params: &[("t", "1"), ("s", "0.5"), ("d", "1"), ("alpha", "1.5"), ("c", "1")],
    },
    ExperimentInfo {
        name: "csbp-moment-oracle",
        summary: "second-moment recursion versus off-diagonal mass of reduced trees",
        targets: &["csbp"],
        default_replicates: 100_000,
        params: &[("d", "1"), ("t", "1")],
    },
    ExperimentInfo {
        name: "entrance-law",
        summary: "E[exp(-theta W_t)] versus 1 - u_t(theta ubar_t e^{bt}) / ubar_t",
        targets: &["csbp"],
        default_replicates: 100_000,
        params: &[("d", "1"), ("t", "1"), ("thetas", "0.5 1 2")],
    },
    ExperimentInfo {
        name: "reversed-martingale",
        summary: "E_z[W<-_t] = h<-(z) and the reversed Green closed form versus quadrature",
        targets: &["bbm"],
        default_replicates: 20_000,
        params: &[("alpha", "1.5"), ("edge", "1"), ("z", "1 3"), ("times", "1 5 10"), ("green_y", "0.5 2 6"), ("green_tol", "1e-8")],
    },
    ExperimentInfo {
        name: "jump-moment-scaling",
        summary: "ratio of limit jump moments at 2A and A versus 2^{k - alpha}",
        targets: &["spine", "bbm"],
        default_replicates: 1,
        params: &[("alpha", "1.5"), ("edge", "1"), ("a", "1"), ("ks", "2 3"), ("tol", "1e-6")],
    },
    ExperimentInfo {
        name: "size-tail-trend",
        summary: "regression of log P(Zbar_t > z0) on log N versus -1/(alpha - 1)",
        targets: &["bbm", "spectral"],
        default_replicates: 200_000,
        params: &[
            ("alpha", "1.8"),
            ("edge", "1"),
            ("a", "1"),
            ("t", "0.1"),
            ("x0", "1"),
            ("z0", "0.01"),
            ("ns", "100 1000 10000"),
            ("min_survivors", "10"),
            ("rel_tol", "0.25"),
        ],
    },
];

pub fn experiment_info(name: &str) -> Result<&'static ExperimentInfo> {
    CATALOG.iter().find(|e| e.name == name).ok_or_else(|| Error::UnknownExperiment(name.to_string()))
}

/// One experiment section of a spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub targets: Vec<String>,
    /// Parameter values; several values per key form a Cartesian grid.
    pub grid: BTreeMap<String, Vec<String>>,
    pub replicates: u64,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Nominal two-sided z threshold before the Bonferroni correction.
    pub threshold: f64,
}

impl ExperimentSpec {
    /// Spec with the catalog defaults for `name`.
    pub fn new(name: &str) -> Result<Self> {
        let info = experiment_info(name)?;
        Ok(Self {
            name: name.to_string(),
            targets: info.targets.iter().map(|s| s.to_string()).collect(),
            grid: BTreeMap::new(),
            replicates: info.default_replicates,
            seed: 1,
            output: None,
            threshold: 3.0,
        })
    }

    pub fn with_param(mut self, key: &str, value: &str) -> Self {
        self.grid.insert(key.to_string(), vec![value.to_string()]);
        self
    }

    pub fn with_replicates(mut self, n: u64) -> Self {
        self.replicates = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Parses every section of a spec file.
    pub fn parse_file(text: &str) -> Result<Vec<Self>> {
        let mut specs: Vec<Self> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| at(format!("unterminated section header `{line}`")))?.trim();
                specs.push(Self::new(name).map_err(|e| at(e.to_string()))?);
                continue;
            }
            let spec = specs.last_mut().ok_or_else(|| at("key outside a section".into()))?;
            let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "replicates" => spec.replicates = value.parse().map_err(|_| at(format!("bad replicate count `{value}`")))?,
                "seed" => spec.seed = value.parse().map_err(|_| at(format!("bad seed `{value}`")))?,
                "threshold" => spec.threshold = value.parse().map_err(|_| at(format!("bad threshold `{value}`")))?,
                "output" => spec.output = Some(PathBuf::from(value)),
                "targets" => spec.targets = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                _ => {
                    let values: Vec<String> = value.split(',').map(|s| s.trim().to_string()).collect();
                    if values.iter().any(|v| v.is_empty()) {
                        return Err(at(format!("empty value for `{key}`")));
                    }
                    spec.grid.insert(key.to_string(), values);
                }
            }
        }
        if specs.is_empty() {
            return Err(Error::Config("spec file contains no experiment section".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }

    pub fn validate(&self) -> Result<()> {
        let info = experiment_info(&self.name)?;
        if self.replicates == 0 {
            return Err(Error::Config(format!("{}: replicate count must be positive", self.name)));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!("{}: threshold must be positive, got {}", self.name, self.threshold)));
        }
        for key in self.grid.keys() {
            if !info.params.iter().any(|(k, _)| k == key) {
                let known: Vec<&str> = info.params.iter().map(|(k, _)| *k).collect();
                return Err(Error::Config(format!("{}: unknown parameter `{key}` (known: {})", self.name, known.join(", "))));
            }
        }
        for t in &self.targets {
            if !["spectral", "ultrametric", "csbp", "bbm", "spine", "harness"].contains(&t.as_str()) {
                return Err(Error::Config(format!("{}: unknown module target `{t}`", self.name)));
            }
        }
        for p in self.points() {
            p.check_numeric(info)?;
        }
        Ok(())
    }

    /// Grid points in lexicographic key order, defaults filled in.
    pub fn points(&self) -> Vec<Params> {
        let info = match experiment_info(&self.name) {
            Ok(i) => i,
            Err(_) => return vec![],
        };
        let mut points = vec![BTreeMap::new()];
        for (key, default) in info.params {
            let values: Vec<String> = self.grid.get(*key).cloned().unwrap_or_else(|| vec![default.to_string()]);
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.insert(key.to_string(), v.clone());
                        q
                    })
                })
                .collect();
        }
        points.into_iter().map(Params).collect()
    }
}

/// Parameter values of one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct Params(pub BTreeMap<String, String>);

impl Params {
    fn raw(&self, key: &str) -> Result<&str> {
        self.0.get(key).map(|s| s.as_str()).ok_or_else(|| Error::Config(format!("missing parameter `{key}`")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| Error::Config(format!("parameter `{key}` is not a number: `{v}`")))
    }

    pub fn list(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.raw(key)?;
        let xs: std::result::Result<Vec<f64>, _> = v.split_whitespace().map(|s| s.parse::<f64>()).collect();
        match xs {
            Ok(xs) if !xs.is_empty() => Ok(xs),
            _ => Err(Error::Config(format!("parameter `{key}` is not a list of numbers: `{v}`"))),
        }
    }

    pub fn potential(&self, key: &str) -> Result<Potential> {
        parse_potential(self.raw(key)?)
    }

    fn check_numeric(&self, info: &ExperimentInfo) -> Result<()> {
        for (key, default) in info.params {
            let is_list = default.contains(' ');
            let r = if *key == "potential" {
                self.potential(key).map(|_| ())
            } else if is_list {
                self.list(key).map(|_| ())
            } else {
                self.f64(key).map(|_| ())
            };
            r.map_err(|e| Error::Config(format!("{}: {e}", info.name)))?;
        }
        Ok(())
    }

    /// Short hex digest of the canonical `key=value` listing.
    pub fn hash(&self, experiment: &str) -> String {
        let mut h = Sha256::new();
        h.update(experiment.as_bytes());
        for (k, v) in &self.0 {
            h.update(format!(";{k}={v}").as_bytes());
        }
        let d = h.finalize();
        d[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// `zero`, `step:H`, `step:H:edge` or `alpha:A` (the unit-width step whose
/// half-line problem has the given alpha).
pub fn parse_potential(text: &str) -> Result<Potential> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number `{s}` in potential `{text}`")));
    let pot = match parts.as_slice() {
        ["zero"] => Potential::Zero,
        ["step", h] => Potential::step(num(h)?),
        ["step", h, e] => Potential::Step { height: num(h)?, edge: num(e)? },
        ["alpha", a] => Potential::step_for_alpha(num(a)?, 1.0)?,
        _ => return Err(Error::Config(format!("unknown potential `{text}` (zero, step:H[:edge], alpha:A)"))),
    };
    pot.validate()?;
    Ok(pot)
}

/// `feller:d`, `stable:c:alpha`, `cutoff:a:alpha` or `linear:b`.
pub fn parse_mechanism(text: &str) -> Result<BranchingMechanism> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number `{s}` in mechanism `{text}`")));
    let mech = match parts.as_slice() {
        ["feller", d] => BranchingMechanism::feller(num(d)?),
        ["stable", c, a] => BranchingMechanism::alpha_stable(num(c)?, num(a)?)?,
        ["cutoff", a, alpha] => BranchingMechanism::cutoff_lebesgue(num(a)?, num(alpha)?)?,
        ["linear", b] => BranchingMechanism::linear(num(b)?),
        _ => return Err(Error::Config(format!("unknown mechanism `{text}` (feller:d, stable:c:alpha, cutoff:a:alpha, linear:b)"))),
    };
    mech.validate()?;
    Ok(mech)
}

/// Deviation measured in standard errors, or in units of a fixed tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Statistical,
    Tolerance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_z(z: f64, threshold: f64) -> Self {
        if z.abs() <= threshold {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// Non-finite floats are written as JSON null and read back as NaN.
mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One comparison row of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub experiment: String,
    pub params_hash: String,
    pub label: String,
    pub kind: Kind,
    #[serde(with = "nullable")]
    pub lhs: f64,
    #[serde(with = "nullable")]
    pub lhs_se: f64,
    #[serde(with = "nullable")]
    pub rhs: f64,
    #[serde(with = "nullable")]
    pub rhs_se: f64,
    /// Used by tolerance rows: `z = (lhs - rhs) / tolerance`.
    #[serde(with = "nullable")]
    pub tolerance: f64,
    #[serde(with = "nullable")]
    pub z: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    pub note: String,
}

/// Comparison before thresholds are assigned.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub label: String,
    pub kind: Kind,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub tolerance: f64,
    pub note: String,
}

impl Comparison {
    pub fn statistical(label: impl Into<String>, lhs: f64, lhs_se: f64, rhs: f64, rhs_se: f64) -> Self {
        Self { label: label.into(), kind: Kind::Statistical, lhs, lhs_se, rhs, rhs_se, tolerance: f64::NAN, note: String::new() }
    }

    pub fn tolerance(label: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        Self { label: label.into(), kind: Kind::Tolerance, lhs, lhs_se: 0.0, rhs, rhs_se: 0.0, tolerance, note: String::new() }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn z(&self) -> f64 {
        match self.kind {
            Kind::Statistical => z_score(self.lhs, self.lhs_se, self.rhs, self.rhs_se),
            Kind::Tolerance => (self.lhs - self.rhs) / self.tolerance,
        }
    }
}

/// Summary written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub pass: usize,
    pub fail: usize,
    pub records: Vec<ComparisonRecord>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.fail == 0 && self.pass > 0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// CSV with a header row and RFC 4180 quoting.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv: {e}")))
    }

    /// Writes `<dir>/<experiment>.csv` and `<dir>/<experiment>.json`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let unwritable = |e: std::io::Error| Error::Unwritable(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(unwritable)?;
        let csv_path = dir.join(format!("{}.csv", self.experiment));
        let json_path = dir.join(format!("{}.json", self.experiment));
        fs::write(&csv_path, self.to_csv()?).map_err(unwritable)?;
        fs::write(&json_path, self.to_json()?).map_err(unwritable)?;
        Ok((csv_path, json_path))
    }
}

/// Hex SHA-256 of a byte string (used for output digests).
pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Runs one experiment; the Bonferroni family is the experiment itself.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    Ok(run_suite(std::slice::from_ref(spec))?.remove(0))
}

/// Runs every experiment, then applies a Bonferroni correction across all
/// statistical comparisons of the suite and writes the outputs.
pub fn run_suite(specs: &[ExperimentSpec]) -> Result<Vec<Report>> {
    for s in specs {
        s.validate()?;
    }
    let mut raw: Vec<Vec<(String, Comparison)>> = Vec::with_capacity(specs.len());
    for s in specs {
        let mut rows = Vec::new();
        for (i, p) in s.points().iter().enumerate() {
            // Each grid point gets its own seed so points are independent.
            let seed = derive_seed(s.seed, &format!("{}#{i}", s.name));
            let hash = p.hash(&s.name);
            for c in dispatch(&s.name, p, s.replicates, seed)? {
                rows.push((hash.clone(), c));
            }
        }
        raw.push(rows);
    }
    let m = raw.iter().flatten().filter(|(_, c)| c.kind == Kind::Statistical).count();
    let mut reports = Vec::with_capacity(specs.len());
    for (s, rows) in specs.iter().zip(raw) {
        let records: Vec<ComparisonRecord> = rows
            .into_iter()
            .map(|(hash, c)| {
                let threshold = match c.kind {
                    Kind::Statistical => bonferroni_threshold(s.threshold, m),
                    Kind::Tolerance => 1.0,
                };
                let z = c.z();
                ComparisonRecord {
                    experiment: s.name.clone(),
                    params_hash: hash,
                    verdict: if c.note.starts_with("insufficient") { Verdict::Fail } else { Verdict::from_z(z, threshold) },
                    label: c.label,
                    kind: c.kind,
                    lhs: c.lhs,
                    lhs_se: c.lhs_se,
                    rhs: c.rhs,
                    rhs_se: c.rhs_se,
                    tolerance: c.tolerance,
                    z,
                    threshold,
                    note: c.note,
                }
            })
            .collect();
        let pass = records.iter().filter(|r| r.verdict == Verdict::Pass).count();
        let report = Report { experiment: s.name.clone(), pass, fail: records.len() - pass, records };
        if let Some(dir) = &s.output {
            report.write(dir)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Outcome of re-checking a written report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyOutcome {
    pub experiment: String,
    pub pass: usize,
    pub fail: usize,
    /// Rows whose stored verdict disagrees with `|z| <= threshold`, or whose
    /// z is not reproduced by the stored estimates.
    pub mismatched: Vec<String>,
    pub counts_consistent: bool,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        self.mismatched.is_empty() && self.counts_consistent && self.fail == 0
    }
}

/// Re-derives every verdict of a JSON report from its stored numbers.
pub fn verify(text: &str) -> Result<VerifyOutcome> {
    let report: Report = serde_json::from_str(text)?;
    let mut mismatched = Vec::new();
    for r in &report.records {
        let c = Comparison { label: r.label.clone(), kind: r.kind, lhs: r.lhs, lhs_se: r.lhs_se, rhs: r.rhs, rhs_se: r.rhs_se, tolerance: r.tolerance, note: r.note.clone() };
        let z = c.z();
        let same_z = (z.is_nan() && r.z.is_nan()) || (!z.is_finite() && r.z.is_nan()) || (z - r.z).abs() <= 1e-9 * z.abs().max(1.0);
        let expected = if r.note.starts_with("insufficient") { Verdict::Fail } else { Verdict::from_z(r.z, r.threshold) };
        if !same_z || expected != r.verdict {
            mismatched.push(r.label.clone());
        }
    }
    let pass = report.records.iter().filter(|r| r.verdict == Verdict::Pass).count();
    let fail = report.records.len() - pass;
    Ok(VerifyOutcome { experiment: report.experiment, pass, fail, mismatched, counts_consistent: pass == report.pass && fail == report.fail })
}

fn dispatch(name: &str, p: &Params, n: u64, seed: u64) -> Result<Vec<Comparison>> {
    let n = n as usize;
    match name {
        "spectral-gap" => spectral_gap(p),
        "green-check" => green_check(p, n, seed),
        "many-to-few-k1" => many_to_few_k1(p, n, seed),
        "many-to-few-k2" => many_to_few_k2(p, n, seed),
        "reduced-martingale" => reduced_martingale(p, n, seed),
        "csbp-moment-oracle" => csbp_moment_oracle(p, n, seed),
        "entrance-law" => entrance_law(p, n, seed),
        "reversed-martingale" => reversed_martingale(p, n, seed),
        "jump-moment-scaling" => jump_moment_scaling(p),
        "size-tail-trend" => {
            let cfg = SizeTailConfig::from_params(p, n)?;
            Ok(size_tail_trend(&cfg, seed)?.comparisons(p.f64("rel_tol")?))
        }
        other => Err(Error::UnknownExperiment(other.to_string())),
    }
}

fn spectral_gap(p: &Params) -> Result<Vec<Comparison>> {
    let pot = Potential::Step { height: p.f64("height")?, edge: p.f64("edge")? };
    let g = gap_scaling(&pot, &p.list("ls")?)?;
    let target = -2.0 * g.beta;
    Ok(vec![Comparison::tolerance("slope", g.slope, target, p.f64("rel_tol")? * 2.0 * g.beta)])
}

fn green_check(p: &Params, n: usize, seed: u64) -> Result<Vec<Comparison>> {
    let sol = solve_slp(&p.potential("potential")?, p.f64("L")?, 1e-12)?;
    let cfg = SpineConfig::new(&sol)?.with_dt(p.f64("dt")?)?;
    let (xi, x, delta, horizon) = (p.f64("xi")?, p.f64("x")?, p.f64("delta")?, p.f64("horizon")?);
    let green = GreenFunction::new(&sol, xi)?;
    let rule = GaussLegendre::new(24);
    let mut out = Vec::new();
    for (j, y) in p.list("y")?.into_iter().enumerate() {
        let (acc, _) = discounted_occupation(&cfg, xi, x, y, delta, horizon, n, derive_seed(seed, &format!("y{j}")))?;
        // Window average of the resolvent; the kink at y = x is a panel break.
        let (a, b) = (y - delta, y + delta);
        let mut breaks = vec![a];
        if x > a && x < b {
            breaks.push(x);
        }
        breaks.push(b);
        let mut exact = 0.0;
        for w in breaks.windows(2) {
            let mut err = None;
            exact += rule.integrate(w[0], w[1], |s| green.eval(x, s).unwrap_or_else(|e| {
                err = Some(e);
                0.0
            }));
            if let Some(e) = err {
                return Err(e);
            }
        }
        exact /= 2.0 * delta;
        // Mass discounted beyond the horizon is at most e^{-xi T} / (xi 2 delta).
        let tail = (-xi * horizon).exp() / (xi * 2.0 * delta);
        let c = Comparison::statistical(format!("occupation y={y}"), acc.mean, acc.stderr(), exact, 0.0);
        out.push(if tail > 0.1 * acc.stderr() { c.with_note(format!("horizon tail {tail:.2e}")) } else { c });
    }
    Ok(out)
}

fn bbm_setup(p: &Params) -> Result<(crate::spectral::SpectralSolution, BbmConfig, Harmonics)> {
    let sol = solve_slp(&p.potential("potential")?, p.f64("L")?, 1e-12)?;
    let cfg = BbmConfig::from_solution(&sol)?;
    let h = Harmonics::new(&sol);
    Ok((sol, cfg, h))
}

fn many_to_few_k1(p: &Params, n: usize, seed: u64) -> Result<Vec<Comparison>> {
    let (sol, cfg, h) = bbm_setup(p)?;
    let (x, t) = (p.f64("x")?, p.f64("t")?);
    let acc = many_to_few_lhs(&cfg, &h, x, 1, t, &Functional::one(1), n, seed)?;
    let scale = h.h(x) * (-sol.w * t).exp();
    Ok(vec![Comparison::statistical("normalized first moment", acc.mean / scale, acc.stderr() / scale, 1.0, 0.0)])
}

fn many_to_few_k2(p: &Params, n: usize, seed: u64) -> Result<Vec<Comparison>> {
    let (sol, cfg, h) = bbm_setup(p)?;
    let (x, t) = (p.f64("x")?, p.f64("t")?);
    let lhs = many_to_few_lhs(&cfg, &h, x, 2, t, &Functional::one(2), n, derive_seed(seed, "bbm"))?;
    let spine = SpineConfig::new(&sol)?;
    let outer = p.f64("spine_outer")? as usize;
    let est = k_spine(&spine, x, 2, t, &Functional::one(2), &KSpineBudget::with_outer(outer.max(1)), derive_seed(seed, "spine"))?;
    let scale = 2.0 * h.h(x);
    Ok(vec![Comparison::statistical("distinct pairs", lhs.mean, lhs.stderr(), scale * est.value, scale * est.stderr)])
}

fn reduced_martingale(p: &Params, n: usize, seed: u64) -> Result<Vec<Comparison>> {
    let (t, s) = (p.f64("t")?, p.f64("s")?);
    let mechs = [
        ("feller", BranchingMechanism::feller(p.f64("d")?)),
        ("stable", BranchingMechanism::alpha_stable(p.f64("c")?, p.f64("alpha")?)?),
    ];
    let mut out = Vec::new();
    for (tag, mech) in mechs {
        let flow = LaplaceFlow::new(&mech)?;
        let rates = ReducedRates::new(&flow, t)?;
        let label = format!("reduced-{tag}");
        let zs: Result<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| Ok(reduced_count(&rates, s, &mut stream(seed, &label, i as u64))? as f64))
            .collect();
        let zs = zs?;
        let c = rates.compensation(s);
        let w = Accumulator::from_slice(&zs.iter().map(|z| c * z).collect::<Vec<_>>());
        out.push(Comparison::statistical(format!("{tag} mean W"), w.mean, w.stderr(), 1.0, 0.0));
        let z = Accumulator::from_slice(&zs);
        let ratio = flow.ubar(s)? / flow.ubar(t)?;
        out.push(Comparison::statistical(format!("{tag} mean Z"), z.mean, z.stderr(), ratio, 0.0));
    }
    Ok(out)
}

fn csbp_moment_oracle(p: &Params, n: usize, seed: u64) -> Result<Vec<Comparison>> {
    let mech = BranchingMechanism::feller(p.f64("d")?);
    let t = p.f64("t")?;
    let g = Functional::indicator(Composition(vec![1, 1]), 0.0)?;
    let rhs = csbp_moments(&mech, 2, t, &g)?;
    let acc = offdiagonal_mass_mc(&mech, t, n, seed)?;
    Ok(vec![Comparison::statistical("off-diagonal mass", acc.mean, acc.stderr(), rhs, 0.0)])
}

fn entrance_law(p: &Params, n: usize, seed: u64) -> Result<Vec<Comparison>> {
    let mech = BranchingMechanism::feller(p.f64("d")?);
    let rows = entrance_law_check(&mech, p.f64("t")?, &p.list("thetas")?, n, seed)?;
    Ok(rows.into_iter().map(|r| Comparison::statistical(format!("theta={}", r.theta), r.lhs, r.lhs_se, r.rhs, 0.0)).collect())
}

fn reversed_setup(p: &Params) -> Result<ReversedProcess> {
    let lim = LimitSolution::new(&Potential::step_for_alpha(p.f64("alpha")?, p.f64("edge")?)?)?;
    ReversedProcess::from_limit(&lim)
}

fn reversed_martingale(p: &Params, n: usize, seed: u64) -> Result<Vec<Comparison>> {
    let proc = reversed_setup(p)?;
    let mut times = p.list("times")?;
    times.sort_by(|a, b| a.total_cmp(b));
    let horizon = *times.last().unwrap();
    let schedule = &times[..times.len() - 1];
    let mut out = Vec::new();
    for (j, z) in p.list("z")?.into_iter().enumerate() {
        let label = format!("reversed-martingale-{j}");
        let ws: Result<Vec<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| Ok(run_reversed(&proc, z, horizon, schedule, &mut stream(seed, &label, i as u64))?.w))
            .collect();
        let ws = ws?;
        for (k, &t) in times.iter().enumerate() {
            let acc = Accumulator::from_slice(&ws.iter().map(|w| w[k]).collect::<Vec<_>>());
            out.push(Comparison::statistical(format!("W z={z} t={t}"), acc.mean, acc.stderr(), proc.h(z), 0.0));
        }
    }
    let tol = p.f64("green_tol")?;
    for z in p.list("z")? {
        for y in p.list("green_y")? {
            let closed = proc.green(z, y)?;
            let quad = proc.green_quadrature(z, y)?;
            out.push(Comparison::tolerance(format!("green z={z} y={y}"), closed, quad, tol * closed.abs().max(1.0)));
        }
    }
    Ok(out)
}

fn jump_moment_scaling(p: &Params) -> Result<Vec<Comparison>> {
    let proc = reversed_setup(p)?;
    let ks: Vec<usize> = p.list("ks")?.into_iter().map(|k| k as usize).collect();
    let kmax = ks.iter().copied().max().unwrap_or(2);
    let table = ReversedMomentTable::new(&proc, kmax, 1.0, 1.0 / 256.0)?;
    let a = p.f64("a")?;
    let tol = p.f64("tol")?;
    let mut out = Vec::new();
    for k in ks {
        let m1 = jump_moment_limit(&proc, k, a, &table)?;
        let m2 = jump_moment_limit(&proc, k, 2.0 * a, &table)?;
        let target = 2f64.powf(k as f64 - proc.alpha);
        out.push(Comparison::tolerance(format!("ratio k={k}"), m2 / m1, target, tol * target));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Size-tail trend

/// Inputs of the size-tail regression.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SizeTailConfig {
    pub alpha: f64,
    pub edge: f64,
    pub a: f64,
    pub t: f64,
    pub x0: f64,
    pub z0: f64,
    pub ns: Vec<f64>,
    pub replicates: usize,
    pub min_survivors: usize,
}

impl SizeTailConfig {
    pub fn from_params(p: &Params, replicates: usize) -> Result<Self> {
        Ok(Self {
            alpha: p.f64("alpha")?,
            edge: p.f64("edge")?,
            a: p.f64("a")?,
            t: p.f64("t")?,
            x0: p.f64("x0")?,
            z0: p.f64("z0")?,
            ns: p.list("ns")?,
            replicates,
            min_survivors: p.f64("min_survivors")? as usize,
        })
    }
}

/// Tail estimates at one value of `N`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SizeTailRow {
    pub n: f64,
    pub l: f64,
    pub horizon: f64,
    pub replicates: usize,
    /// Replicates with `Zbar_t > z0`.
    pub hits: usize,
    pub p: f64,
    pub p_se: f64,
    /// `P(Zbar_t > c z0)` for `c` in `{1/2, 1, 2, 4}`; non-increasing in `c`.
    pub p_by_level: Vec<(f64, f64)>,
    /// `sum h_inf(X_v) / N^gamma` of every surviving replicate.
    pub survivor_mass: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SizeTailReport {
    pub gamma: f64,
    pub rows: Vec<SizeTailRow>,
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    pub insufficient: bool,
    /// Rank-size slope of the pooled survivor masses over the middle of the
    /// sample (log of empirical survival against log mass).
    pub mass_tail_slope: f64,
}

impl SizeTailReport {
    pub fn comparisons(&self, rel_tol: f64) -> Vec<Comparison> {
        let c = Comparison { lhs_se: self.slope_se, ..Comparison::tolerance("slope", self.slope, -self.gamma, rel_tol * self.gamma) };
        vec![if self.insufficient { c.with_note("insufficient statistics") } else { c }]
    }
}

/// Estimates `P_x(Zbar_t > z0)` with `Zbar_t = #alive(tN) / N^gamma` on
/// `[0, L_{N,A}]` and regresses `log P` on `log N` with binomial weights.
pub fn size_tail_trend(cfg: &SizeTailConfig, seed: u64) -> Result<SizeTailReport> {
    if cfg.ns.len() < 3 {
        return Err(Error::Invalid(format!("need at least 3 values of N, got {}", cfg.ns.len())));
    }
    if cfg.replicates == 0 || !(cfg.t > 0.0) || !(cfg.z0 > 0.0) || !(cfg.a >= 1.0) {
        return Err(Error::Invalid("size-tail trend needs replicates > 0, t > 0, z0 > 0 and A >= 1".into()));
    }
    let pot = Potential::step_for_alpha(cfg.alpha, cfg.edge)?;
    let limit = LimitSolution::new(&pot)?;
    if limit.regime() != crate::spectral::Regime::SemiPushed {
        return Err(Error::Regime(format!("alpha = {} is not semi-pushed", cfg.alpha)));
    }
    let gamma = 1.0 / (limit.alpha - 1.0);
    let levels = [0.5, 1.0, 2.0, 4.0];
    let mut rows = Vec::new();
    for (j, &n) in cfg.ns.iter().enumerate() {
        if !(n > 1.0) {
            return Err(Error::Invalid(format!("N must exceed 1, got {n}")));
        }
        let l = n.ln() / (2.0 * limit.beta) + cfg.a.ln() / (limit.mu - limit.beta);
        if !(cfg.x0 > 0.0 && cfg.x0 < l) {
            return Err(Error::Domain(format!("x0 = {} outside (0, {l}) at N = {n}", cfg.x0)));
        }
        let sol = solve_slp(&pot, l, 1e-12)?;
        let bbm = BbmConfig::from_solution(&sol)?;
        let h = Harmonics::new(&sol);
        let horizon = cfg.t * n;
        let scale = n.powf(gamma);
        let label = format!("size-tail-{j}");
        let out: Result<Vec<(f64, f64)>> = (0..cfg.replicates)
            .into_par_iter()
            .map(|i| {
                let sys = run_to(&bbm, cfg.x0, horizon, false, &mut stream(seed, &label, i as u64))?;
                let mass: f64 = sys.positions().iter().map(|&x| h.h_inf(x).unwrap_or(0.0)).sum();
                Ok((sys.size() as f64 / scale, mass / scale))
            })
            .collect();
        let out = out?;
        let frac = |c: f64| out.iter().filter(|(z, _)| *z > c * cfg.z0).count();
        let hits = frac(1.0);
        let m = cfg.replicates as f64;
        let p = hits as f64 / m;
        rows.push(SizeTailRow {
            n,
            l,
            horizon,
            replicates: cfg.replicates,
            hits,
            p,
            p_se: (p * (1.0 - p) / m).sqrt(),
            p_by_level: levels.iter().map(|&c| (c, frac(c) as f64 / m)).collect(),
            survivor_mass: out.iter().filter(|(z, _)| *z > 0.0).map(|(_, w)| *w).collect(),
        });
    }
    let insufficient = rows.iter().any(|r| r.hits < cfg.min_survivors.max(1));
    let usable: Vec<&SizeTailRow> = rows.iter().filter(|r| r.hits > 0).collect();
    let (slope, slope_se, intercept) = if usable.len() >= 2 {
        let xs: Vec<f64> = usable.iter().map(|r| r.n.ln()).collect();
        let ys: Vec<f64> = usable.iter().map(|r| r.p.ln()).collect();
        // Delta-method variance of log p.
        let ws: Vec<f64> = usable.iter().map(|r| r.hits as f64 / (1.0 - r.p).max(1e-12)).collect();
        weighted_fit(&xs, &ys, &ws)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    let mut pooled: Vec<f64> = rows.iter().flat_map(|r| r.survivor_mass.iter().copied()).filter(|&w| w > 0.0).collect();
    pooled.sort_by(|a, b| a.total_cmp(b));
    Ok(SizeTailReport { gamma, rows, slope, slope_se, intercept, insufficient, mass_tail_slope: rank_size_slope(&pooled) })
}

/// Weighted least squares; returns `(slope, slope stderr, intercept)`.
fn weighted_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * (x - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    (slope, (1.0 / sxx).sqrt(), my - slope * mx)
}

fn rank_size_slope(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n < 20 {
        return f64::NAN;
    }
    let (lo, hi) = (n / 5, 4 * n / 5);
    let xs: Vec<f64> = sorted[lo..hi].iter().map(|w| w.ln()).collect();
    let ys: Vec<f64> = (lo..hi).map(|i| ((n - i) as f64 / n as f64).ln()).collect();
    linear_fit(&xs, &ys).1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_and_grid() {
        let text = "# suite\n[many-to-few-k1]\nreplicates = 10\nseed = 4\nt = 1, 2\nL = 5 # trailing\n\n[spectral-gap]\nls = 10 12 14 16\n";
        let specs = ExperimentSpec::parse_file(text).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].replicates, 10);
        assert_eq!(specs[0].seed, 4);
        assert_eq!(specs[0].points().len(), 2);
        assert_eq!(specs[1].points()[0].list("ls").unwrap(), vec![10.0, 12.0, 14.0, 16.0]);
    }

    #[test]
    fn zero_replicates_is_a_validation_error() {
        let err = ExperimentSpec::parse_file("[entrance-law]\nreplicates = 0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn unknown_names_and_keys_are_rejected() {
        assert!(matches!(ExperimentSpec::parse_file("[no-such]\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentSpec::new("no-such"), Err(Error::UnknownExperiment(_))));
        assert!(ExperimentSpec::parse_file("[entrance-law]\nfoo = 1\n").is_err());
        assert!(ExperimentSpec::parse_file("[entrance-law]\nt = abc\n").is_err());
        assert!(ExperimentSpec::parse_file("t = 1\n").is_err());
    }

    #[test]
    fn potentials() {
        assert!(matches!(parse_potential("zero").unwrap(), Potential::Zero));
        assert!(matches!(parse_potential("step:4:0.5").unwrap(), Potential::Step { edge, .. } if edge == 0.5));
        assert!(parse_potential("alpha:1.5").is_ok());
        assert!(parse_potential("ramp").is_err());
        assert!(parse_potential("step:4:2").is_err());
        assert!(parse_mechanism("feller:1").is_ok());
        assert!(parse_mechanism("stable:1:1.5").is_ok());
        assert!(parse_mechanism("stable:1").is_err());
    }

    #[test]
    fn verdict_follows_threshold() {
        assert_eq!(Verdict::from_z(-2.9, 3.0), Verdict::Pass);
        assert_eq!(Verdict::from_z(3.1, 3.0), Verdict::Fail);
        assert_eq!(Verdict::from_z(f64::NAN, 3.0), Verdict::Fail);
    }

    #[test]
    fn params_hash_depends_on_values() {
        let s = ExperimentSpec::new("entrance-law").unwrap();
        let a = s.points()[0].hash("entrance-law");
        let b = s.clone().with_param("t", "2").points()[0].hash("entrance-law");
        assert_ne!(a, b);
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn verify_detects_tampering() {
        let spec = ExperimentSpec::new("jump-moment-scaling").unwrap();
        let report = run_experiment(&spec).unwrap();
        assert!(report.all_pass(), "{report:?}");
        let json = report.to_json().unwrap();
        assert!(verify(&json).unwrap().ok());
        let mut bad = report.clone();
        bad.records[0].verdict = Verdict::Fail;
        bad.records[0].lhs += 1.0;
        let v = verify(&bad.to_json().unwrap()).unwrap();
        assert!(!v.ok());
        assert!(!v.counts_consistent);
    }

    #[test]
    fn weighted_fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|x| 0.5 - 2.0 * x).collect();
        let (s, _, i) = weighted_fit(&x, &y, &[1.0, 3.0, 2.0, 1.0]);
        assert!((s + 2.0).abs() < 1e-12 && (i - 0.5).abs() < 1e-12);
    }
}
