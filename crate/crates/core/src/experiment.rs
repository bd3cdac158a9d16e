//! Declarative experiment configs, the scenario registry and the runner.
//!
//! A config is a TOML document. Every quantity is expressed in the units
//! declared by the optional `[units]` table (`time` = physical length of
//! one dimensionless time unit); the runner converts to dimensionless
//! values before simulating, so a rescaled config reproduces its
//! dimensionless twin exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterfn::{FilterFunction, FrequencyGrid};
use crate::fisher::{
    build_fio_with, fio_rank, mle_monte_carlo, numerical_rank, DirectionalModel, FisherRow, WeightConvention,
    RANK_TOLERANCE,
};
use crate::modulation::ModulationSet;
use crate::ocf::{best_solution, optimize_restarts, Control, OcfBudget, OcfProblem, OcfSolution, Objective};
use crate::probe::{split_seed, stream_rng, survival_probability, NoiseModel};
use crate::quad::mean_stderr;
use crate::reconstruct::{
    repeat_fidelity, repetition_seed, AsMethod, Protocol, ProtocolConfig, ProtocolSetup, Retention, ScanPoint,
};
use crate::spectra::{CompositeSignal, LorentzianComponent, SpectralDensity};
use crate::tracking::{control_filter, track_fo, track_ocf, TrackingRun, TrackingSettings};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which simulation a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// Every `(protocol, Γ, T)` combination, optimum per `(protocol, Γ)`.
    Protocols,
    /// FO with multi-qubit probes, one entry per qubit count.
    QubitScan,
    /// Optimal-control filters.
    Ocf,
    /// Coefficient tracking of a two-component signal.
    Tracking,
    /// Fisher operator ranks, directional bounds and Monte Carlo checks.
    Fisher,
}

impl Pipeline {
    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Protocols => "protocols",
            Pipeline::QubitScan => "qubit-scan",
            Pipeline::Ocf => "ocf",
            Pipeline::Tracking => "tracking",
            Pipeline::Fisher => "fisher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    /// Physical duration of one dimensionless time unit.
    pub time: f64,
    /// Name of the physical time unit, e.g. `"us"`.
    pub time_label: String,
}

/// Lorentzian components, or a two-column `frequency,value` CSV.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumDecl {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<LorentzianComponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDecl {
    /// Frequency spacing `dω`.
    #[serde(default = "default_step")]
    pub step: f64,
    /// Upper end of the grid and of `∫₀^∞`; defaults to `5 max(ω_max, ω_c)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_int_max: Option<f64>,
}

impl Default for GridDecl {
    fn default() -> Self {
        Self {
            step: default_step(),
            omega_int_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseDecl {
    /// Dephasing rates; the protocol pipeline scans all of them.
    #[serde(default = "default_gamma")]
    pub gamma: Vec<f64>,
    #[serde(default = "default_dp")]
    pub dp_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<u64>,
}

impl Default for NoiseDecl {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            dp_max: default_dp(),
            shots: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolDecl {
    pub kind: Protocol,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_omega_c")]
    pub omega_c: f64,
    /// Defaults to `1.15 ω_c` for FO and `ω_c` for AS.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_max: Option<f64>,
    #[serde(default = "default_one")]
    pub qubits: usize,
    /// Candidate operation times.
    pub durations: Vec<f64>,
    #[serde(default)]
    pub retention: Retention,
    #[serde(default)]
    pub as_method: AsMethod,
}

impl ProtocolDecl {
    pub fn omega_max(&self) -> f64 {
        self.omega_max.unwrap_or(match self.kind {
            Protocol::Fo => 1.15 * self.omega_c,
            Protocol::As => self.omega_c,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QubitEntry {
    pub qubits: usize,
    pub durations: Vec<f64>,
    /// Overrides `noise.dp_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp_max: Option<f64>,
    /// Overrides `noise.gamma[0]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QubitScanDecl {
    /// Multiply the single-qubit dephasing rate by `N` (GHZ probes).
    #[serde(default)]
    pub collective_dephasing: bool,
    pub entries: Vec<QubitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcfScanDecl {
    pub qubits: Vec<usize>,
    pub durations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcfDecl {
    /// Discrete probes to optimise at every main duration.
    #[serde(default)]
    pub qubits: Vec<usize>,
    /// Also optimise a continuous phase modulation.
    #[serde(default)]
    pub continuous: bool,
    pub durations: Vec<f64>,
    #[serde(default = "default_omega_c")]
    pub omega_c: f64,
    #[serde(default = "default_one_f")]
    pub penalty_weight: f64,
    #[serde(default = "default_ocf_grid_max")]
    pub grid_max: f64,
    #[serde(default = "default_ocf_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub budget: OcfBudget,
    /// Extra duration scan for selected qubit counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<OcfScanDecl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingDecl {
    pub s1: Vec<LorentzianComponent>,
    pub s2: Vec<LorentzianComponent>,
    pub omega_osc: f64,
    #[serde(default = "default_tracking_duration")]
    pub duration: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_block")]
    pub k_block: usize,
    #[serde(default = "default_fo_omega_max")]
    pub omega_max: f64,
    #[serde(default = "default_omega_c")]
    pub omega_c: f64,
    #[serde(default)]
    pub retention: Retention,
    /// Discrete OCF probes used for the pair method.
    #[serde(default)]
    pub ocf_qubits: Vec<usize>,
    #[serde(default)]
    pub ocf_budget: OcfBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherDecl {
    /// Random Lorentzian-mixture directions besides the spectrum itself.
    #[serde(default = "default_directions")]
    pub random_directions: usize,
    #[serde(default = "default_shots")]
    pub shots: u64,
    /// Monte Carlo repeats of the maximum-likelihood check; 0 skips it.
    #[serde(default = "default_mc")]
    pub monte_carlo_repeats: usize,
    #[serde(default)]
    pub convention: WeightConvention,
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    #[serde(default)]
    pub description: String,
    pub pipeline: Pipeline,
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Also write a gnuplot script next to the CSV files.
    #[serde(default)]
    pub plot: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<Units>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumDecl>,
    #[serde(default)]
    pub grid: GridDecl,
    #[serde(default)]
    pub noise: NoiseDecl,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub protocols: Vec<ProtocolDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qubit_scan: Option<QubitScanDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocf: Option<OcfDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking: Option<TrackingDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher: Option<FisherDecl>,
    /// Directory against which a relative spectrum CSV path is resolved.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_step() -> f64 {
    0.005
}
fn default_gamma() -> Vec<f64> {
    vec![0.0]
}
fn default_dp() -> f64 {
    0.01
}
fn default_filters() -> usize {
    20
}
fn default_omega_c() -> f64 {
    10.0
}
fn default_fo_omega_max() -> f64 {
    11.5
}
fn default_one() -> usize {
    1
}
fn default_one_f() -> f64 {
    1.0
}
fn default_ocf_grid_max() -> f64 {
    30.0
}
fn default_ocf_grid_points() -> usize {
    1501
}
fn default_tracking_duration() -> f64 {
    5.0
}
fn default_horizon() -> f64 {
    500.0
}
fn default_block() -> usize {
    10
}
fn default_directions() -> usize {
    5
}
fn default_shots() -> u64 {
    10_000
}
fn default_mc() -> usize {
    500
}
fn default_repetitions() -> usize {
    100
}

/// Conversion from declared units to dimensionless values.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scale(f64);

impl Scale {
    fn time(self, t: f64) -> f64 {
        t / self.0
    }
    fn freq(self, w: f64) -> f64 {
        w * self.0
    }
    fn rate(self, g: f64) -> f64 {
        g * self.0
    }
    fn component(self, c: &LorentzianComponent) -> LorentzianComponent {
        LorentzianComponent {
            amplitude: c.amplitude,
            center: c.center * self.0,
            width_scale: c.width_scale / (self.0 * self.0),
        }
    }
}

/// A validation failure attached to a key path such as `protocols[1].durations`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

fn issue(key: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        key: key.into(),
        message: message.into(),
    }
}

fn check_positive(key: String, values: &[f64]) -> std::result::Result<(), ConfigIssue> {
    if values.is_empty() {
        return Err(issue(key, "must not be empty"));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(issue(key, format!("{v} is not a positive finite number")));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses and validates; diagnostics carry line numbers.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.check().map_err(|i| {
            let line = locate(text, &i.key).map_or(String::new(), |l| format!("line {l}: "));
            Error::Config(format!("{line}`{}`: {}", i.key, i.message))
        })?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|i| Error::Config(format!("`{}`: {}", i.key, i.message)))
    }

    fn scale(&self) -> Scale {
        Scale(self.units.as_ref().map_or(1.0, |u| u.time))
    }

    /// Semantic checks run before any simulation.
    pub fn check(&self) -> std::result::Result<(), ConfigIssue> {
        if self.scenario.trim().is_empty() {
            return Err(issue("scenario", "must not be empty"));
        }
        if self.repetitions == 0 {
            return Err(issue("repetitions", "must be at least 1"));
        }
        if let Some(u) = &self.units {
            if !(u.time > 0.0 && u.time.is_finite()) {
                return Err(issue("units.time", "must be positive"));
            }
        }
        if !(self.grid.step > 0.0 && self.grid.step.is_finite()) {
            return Err(issue("grid.step", "must be positive"));
        }
        if let Some(w) = self.grid.omega_int_max {
            check_positive("grid.omega_int_max".into(), &[w])?;
        }
        if self.noise.gamma.is_empty() {
            return Err(issue("noise.gamma", "must not be empty"));
        }
        if let Some(g) = self.noise.gamma.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return Err(issue("noise.gamma", format!("{g} is negative or not finite")));
        }
        if !(0.0..0.5).contains(&self.noise.dp_max) {
            return Err(issue("noise.dp_max", "must lie in [0, 0.5)"));
        }
        if self.noise.shots == Some(0) {
            return Err(issue("noise.shots", "must be positive"));
        }
        if let Some(s) = &self.spectrum {
            match (s.components.is_empty(), &s.csv) {
                (true, None) => return Err(issue("spectrum", "declare `components` or `csv`")),
                (false, Some(_)) => return Err(issue("spectrum", "`components` and `csv` are exclusive")),
                _ => {}
            }
            for (i, c) in s.components.iter().enumerate() {
                LorentzianComponent::new(c.amplitude, c.center, c.width_scale)
                    .map_err(|e| issue(format!("spectrum.components[{i}]"), e.to_string()))?;
            }
        }
        let needs_spectrum = !matches!(self.pipeline, Pipeline::Tracking);
        if needs_spectrum && self.spectrum.is_none() {
            return Err(issue("spectrum", format!("required by the `{}` pipeline", self.pipeline.name())));
        }
        let sc = self.scale();
        for (i, p) in self.protocols.iter().enumerate() {
            check_positive(format!("protocols[{i}].durations"), &p.durations)?;
            self.protocol_config(p, p.qubits, sc)
                .validate()
                .map_err(|e| issue(format!("protocols[{i}]"), e.to_string()))?;
        }
        match self.pipeline {
            Pipeline::Protocols | Pipeline::Fisher => {
                if self.protocols.is_empty() {
                    return Err(issue("protocols", "at least one protocol is required"));
                }
            }
            Pipeline::QubitScan => {
                if self.protocols.len() != 1 || self.protocols[0].kind != Protocol::Fo {
                    return Err(issue("protocols", "a qubit scan needs exactly one FO protocol template"));
                }
                let q = self.qubit_scan.as_ref().ok_or_else(|| issue("qubit_scan", "section is required"))?;
                if q.entries.is_empty() {
                    return Err(issue("qubit_scan.entries", "must not be empty"));
                }
                for (i, e) in q.entries.iter().enumerate() {
                    if e.qubits == 0 {
                        return Err(issue(format!("qubit_scan.entries[{i}].qubits"), "must be at least 1"));
                    }
                    check_positive(format!("qubit_scan.entries[{i}].durations"), &e.durations)?;
                    if let Some(dp) = e.dp_max {
                        if !(0.0..0.5).contains(&dp) {
                            return Err(issue(format!("qubit_scan.entries[{i}].dp_max"), "must lie in [0, 0.5)"));
                        }
                    }
                    if let Some(g) = e.gamma {
                        if !(g >= 0.0 && g.is_finite()) {
                            return Err(issue(format!("qubit_scan.entries[{i}].gamma"), "must be non-negative"));
                        }
                    }
                }
            }
            Pipeline::Ocf => {
                let o = self.ocf.as_ref().ok_or_else(|| issue("ocf", "section is required"))?;
                check_positive("ocf.durations".into(), &o.durations)?;
                if o.qubits.is_empty() && !o.continuous {
                    return Err(issue("ocf.qubits", "no discrete probe and `continuous = false`"));
                }
                if o.qubits.contains(&0) {
                    return Err(issue("ocf.qubits", "qubit counts must be at least 1"));
                }
                if o.grid_points < 2 || !(o.grid_max > o.omega_c && o.omega_c > 0.0) {
                    return Err(issue("ocf.grid_max", "need omega_c in (0, grid_max) and at least two points"));
                }
                if !(o.penalty_weight >= 0.0) {
                    return Err(issue("ocf.penalty_weight", "must be non-negative"));
                }
                check_budget("ocf.budget", &o.budget)?;
                if let Some(s) = &o.scan {
                    check_positive("ocf.scan.durations".into(), &s.durations)?;
                    if s.qubits.is_empty() || s.qubits.contains(&0) {
                        return Err(issue("ocf.scan.qubits", "need qubit counts of at least 1"));
                    }
                }
            }
            Pipeline::Tracking => {
                let t = self.tracking.as_ref().ok_or_else(|| issue("tracking", "section is required"))?;
                if t.s1.is_empty() || t.s2.is_empty() {
                    return Err(issue("tracking.s1", "both components need at least one Lorentzian"));
                }
                check_positive("tracking.duration".into(), &[t.duration])?;
                check_positive("tracking.horizon".into(), &[t.horizon])?;
                check_positive("tracking.omega_osc".into(), &[t.omega_osc])?;
                if t.k_block < 2 {
                    return Err(issue("tracking.k_block", "must be at least 2"));
                }
                if t.horizon < t.duration * t.k_block as f64 {
                    return Err(issue("tracking.horizon", "shorter than one FO block"));
                }
                if t.ocf_qubits.contains(&0) {
                    return Err(issue("tracking.ocf_qubits", "qubit counts must be at least 1"));
                }
                check_budget("tracking.ocf_budget", &t.ocf_budget)?;
            }
        }
        if self.pipeline == Pipeline::Fisher {
            let f = self.fisher.as_ref().ok_or_else(|| issue("fisher", "section is required"))?;
            if f.shots == 0 {
                return Err(issue("fisher.shots", "must be positive"));
            }
            if f.monte_carlo_repeats == 1 {
                return Err(issue("fisher.monte_carlo_repeats", "use 0 to skip or at least 2"));
            }
        }
        Ok(())
    }

    fn protocol_config(&self, p: &ProtocolDecl, qubits: usize, sc: Scale) -> ProtocolConfig {
        ProtocolConfig {
            protocol: p.kind,
            filters: p.filters,
            omega_max: sc.freq(p.omega_max()),
            omega_c: sc.freq(p.omega_c),
            qubits,
            grid_step: sc.freq(self.grid.step),
            omega_int_max: self.grid.omega_int_max.map(|w| sc.freq(w)),
            retention: p.retention,
            as_method: p.as_method,
        }
    }

    /// Dimensionless spectrum.
    pub fn build_spectrum(&self) -> Result<SpectralDensity> {
        let decl = self
            .spectrum
            .as_ref()
            .ok_or_else(|| Error::Config("`spectrum` is not declared".into()))?;
        let sc = self.scale();
        match &decl.csv {
            Some(path) => {
                let path = match &self.base_dir {
                    Some(d) if path.is_relative() => d.join(path),
                    _ => path.clone(),
                };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("spectrum csv {}: {e}", path.display())))?;
                let (f, v) = parse_two_columns(&text)
                    .map_err(|m| Error::Config(format!("spectrum csv {}: {m}", path.display())))?;
                SpectralDensity::from_grid(f.into_iter().map(|w| sc.freq(w)).collect(), v)
            }
            None => Ok(SpectralDensity::lorentzians(
                decl.components.iter().map(|c| sc.component(c)).collect(),
            )),
        }
    }

    /// Every pulse modulation the reconstruction pipelines of this config
    /// apply, in dimensionless time.
    pub fn modulations(&self) -> Result<Vec<ModulationSet>> {
        let sc = self.scale();
        let mut out = Vec::new();
        match self.pipeline {
            Pipeline::Protocols | Pipeline::Fisher => {
                for p in &self.protocols {
                    let cfg = self.protocol_config(p, p.qubits, sc);
                    for &t in &p.durations {
                        out.extend(cfg.modulations(sc.time(t))?);
                    }
                }
            }
            Pipeline::QubitScan => {
                let p = &self.protocols[0];
                for e in &self.qubit_scan.as_ref().expect("validated").entries {
                    let cfg = self.protocol_config(p, e.qubits, sc);
                    for &t in &e.durations {
                        out.extend(cfg.modulations(sc.time(t))?);
                    }
                }
            }
            Pipeline::Ocf | Pipeline::Tracking => {}
        }
        Ok(out)
    }
}

fn check_budget(key: &str, b: &OcfBudget) -> std::result::Result<(), ConfigIssue> {
    if b.superiterations == 0 || b.inner_evaluations == 0 || b.basis_size == 0 || b.time_samples < 2 || b.restarts == 0 {
        return Err(issue(key, "every budget entry must be positive (time_samples at least 2)"));
    }
    Ok(())
}

fn parse_two_columns(text: &str) -> std::result::Result<(Vec<f64>, Vec<f64>), String> {
    let mut f = Vec::new();
    let mut v = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (a, b) = match (cols.next(), cols.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(format!("line {}: expected two columns", n + 1)),
        };
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(a), Ok(b)) => {
                f.push(a);
                v.push(b);
            }
            _ if f.is_empty() => continue,
            _ => return Err(format!("line {}: not a number", n + 1)),
        }
    }
    Ok((f, v))
}

/// 1-based line of a key path like `qubit_scan.entries[2].dp_max`.
fn locate(text: &str, path: &str) -> Option<usize> {
    let parts: Vec<&str> = path.split('.').collect();
    let lines: Vec<&str> = text.lines().collect();
    let header = |l: &str| -> Option<String> {
        let t = l.trim();
        let inner = t.strip_prefix("[[").and_then(|s| s.strip_suffix("]]"))
            .or_else(|| t.strip_prefix('[').and_then(|s| s.strip_suffix(']')))?;
        Some(inner.rsplit('.').next().unwrap_or(inner).trim().to_string())
    };
    let split = |p: &str| -> (String, usize) {
        match p.split_once('[') {
            Some((n, rest)) => (n.to_string(), rest.trim_end_matches(']').parse().unwrap_or(0)),
            None => (p.to_string(), 0),
        }
    };
    let mut start = 0;
    let mut found = None;
    for part in &parts[..parts.len() - 1] {
        let (name, idx) = split(part);
        let hit = lines
            .iter()
            .enumerate()
            .skip(start)
            .filter(|(_, l)| header(l).as_deref() == Some(name.as_str()))
            .nth(idx);
        match hit {
            Some((i, _)) => {
                start = i + 1;
                found = Some(i + 1);
            }
            None => continue,
        }
    }
    let (leaf, _) = split(parts[parts.len() - 1]);
    for (i, l) in lines.iter().enumerate().skip(start) {
        if start > 0 && header(l).is_some() {
            break;
        }
        let t = l.trim_start();
        if let Some(rest) = t.strip_prefix(leaf.as_str()) {
            if rest.trim_start().starts_with('=') {
                return Some(i + 1);
            }
        }
        if header(l).as_deref() == Some(leaf.as_str()) {
            return Some(i + 1);
        }
    }
    found
}

// ---------------------------------------------------------------------------
// Registry

/// A named, static scenario.
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    build: fn() -> ExperimentConfig,
}

impl Preset {
    pub fn config(&self) -> ExperimentConfig {
        (self.build)()
    }
}

const PRESETS: &[Preset] = &[
    Preset {
        name: "fig2-fidelity-vs-time",
        description: "FO fidelity vs operation time at gamma 0.4, dp_max 0.01",
        build: fig2,
    },
    Preset {
        name: "fig3-fidelity-vs-gamma",
        description: "FO and AS fidelity at the optimal time for gamma in [0, 0.5]",
        build: fig3,
    },
    Preset {
        name: "fig4-dephasing0",
        description: "FO and AS reconstructions at gamma 0, dp_max 0.01, K 20",
        build: fig4,
    },
    Preset {
        name: "fig5-dephasing4",
        description: "FO (T 2) and AS (T 5) reconstructions at gamma 0.4, dp_max 0.01",
        build: fig5,
    },
    Preset {
        name: "fig6-leakage-vs-nqubits",
        description: "multi-qubit FO fidelity vs N on the three-Lorentzian leakage spectrum",
        build: fig6,
    },
    Preset {
        name: "fig8-ocf-lorentzian",
        description: "optimal-control filters for a single Lorentzian: fidelity vs N and vs T",
        build: fig8,
    },
    Preset {
        name: "fig10-ocf-double",
        description: "optimal-control filters for the double Lorentzian with 1, 6 qubits and continuous control",
        build: fig10,
    },
    Preset {
        name: "fig12-tracking-slow",
        description: "coefficient tracking at omega_osc 0.004 pi: FO blocks vs OCF pairs",
        build: fig12,
    },
    Preset {
        name: "fig13-tracking-fast",
        description: "coefficient tracking at omega_osc 0.01 pi: FO blocks vs OCF pairs",
        build: fig13,
    },
    Preset {
        name: "ion-chain",
        description: "trapped-ion GHZ probes (ms units): fidelity vs N with per-N preparation error",
        build: ion_chain,
    },
    Preset {
        name: "nv-center",
        description: "NV centre in microsecond units, the rescaled twin of fig5-dephasing4",
        build: nv_center,
    },
    Preset {
        name: "fisher-bounds",
        description: "Fisher operator rank, directional information and Cramer-Rao checks for FO filters",
        build: fisher_bounds,
    },
];

/// Presets in registry order.
pub fn presets() -> &'static [Preset] {
    PRESETS
}

/// `(name, description)` for every preset.
pub fn list_scenarios() -> Vec<(&'static str, &'static str)> {
    PRESETS.iter().map(|p| (p.name, p.description)).collect()
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    PRESETS.iter().find(|p| p.name == name).map(Preset::config)
}

fn lor(amplitude: f64, center: f64, width_scale: f64) -> LorentzianComponent {
    LorentzianComponent {
        amplitude,
        center,
        width_scale,
    }
}

fn single() -> Vec<LorentzianComponent> {
    vec![lor(1.0, 2.0, 1.0)]
}

fn double() -> Vec<LorentzianComponent> {
    vec![lor(1.0, 2.0, 1.0), lor(0.7, 6.0, 2.0)]
}

fn triple() -> Vec<LorentzianComponent> {
    vec![lor(1.0, 2.0, 1.0), lor(0.7, 6.0, 2.0), lor(5.0, 20.0, 1.0)]
}

const FO_TIMES: [f64; 6] = [1.0, 2.0, 3.0, 5.0, 7.0, 10.0];
const AS_TIMES: [f64; 9] = [3.0, 5.0, 7.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0];
const MASTER_SEED: u64 = 20_170_601;

fn base(name: &str, description: &str, pipeline: Pipeline) -> ExperimentConfig {
    ExperimentConfig {
        scenario: name.into(),
        description: description.into(),
        pipeline,
        seed: MASTER_SEED,
        repetitions: 100,
        output_dir: None,
        plot: true,
        units: None,
        spectrum: Some(SpectrumDecl {
            components: double(),
            csv: None,
        }),
        grid: GridDecl::default(),
        noise: NoiseDecl::default(),
        protocols: Vec::new(),
        qubit_scan: None,
        ocf: None,
        tracking: None,
        fisher: None,
        base_dir: None,
    }
}

fn fo(durations: &[f64]) -> ProtocolDecl {
    ProtocolDecl {
        kind: Protocol::Fo,
        filters: 20,
        omega_c: 10.0,
        omega_max: Some(11.5),
        qubits: 1,
        durations: durations.to_vec(),
        retention: Retention::default(),
        as_method: AsMethod::Binned,
    }
}

fn as_(durations: &[f64]) -> ProtocolDecl {
    ProtocolDecl {
        kind: Protocol::As,
        omega_max: Some(10.0),
        ..fo(durations)
    }
}

fn fig2() -> ExperimentConfig {
    let mut c = base("fig2-fidelity-vs-time", PRESETS[0].description, Pipeline::Protocols);
    c.noise.gamma = vec![0.4];
    c.protocols = vec![fo(&FO_TIMES)];
    c
}

fn fig3() -> ExperimentConfig {
    let mut c = base("fig3-fidelity-vs-gamma", PRESETS[1].description, Pipeline::Protocols);
    c.noise.gamma = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    c.protocols = vec![fo(&FO_TIMES), as_(&AS_TIMES)];
    c
}

fn fig4() -> ExperimentConfig {
    let mut c = base("fig4-dephasing0", PRESETS[2].description, Pipeline::Protocols);
    c.protocols = vec![fo(&FO_TIMES), as_(&AS_TIMES)];
    c
}

fn fig5() -> ExperimentConfig {
    let mut c = base("fig5-dephasing4", PRESETS[3].description, Pipeline::Protocols);
    c.noise.gamma = vec![0.4];
    c.protocols = vec![fo(&[2.0]), as_(&[5.0])];
    c
}

fn fig6() -> ExperimentConfig {
    let mut c = base("fig6-leakage-vs-nqubits", PRESETS[4].description, Pipeline::QubitScan);
    c.spectrum = Some(SpectrumDecl {
        components: triple(),
        csv: None,
    });
    c.protocols = vec![fo(&[5.0])];
    c.qubit_scan = Some(QubitScanDecl {
        collective_dephasing: false,
        entries: (1..=6)
            .map(|n| QubitEntry {
                qubits: n,
                durations: vec![2.0, 3.0, 5.0],
                dp_max: None,
                gamma: None,
            })
            .collect(),
    });
    c
}

fn ocf_decl(qubits: Vec<usize>, restarts: usize, scan: Option<OcfScanDecl>) -> OcfDecl {
    OcfDecl {
        qubits,
        continuous: true,
        durations: vec![5.0],
        omega_c: 10.0,
        penalty_weight: 1.0,
        grid_max: 30.0,
        grid_points: 1501,
        budget: OcfBudget {
            restarts,
            ..OcfBudget::default()
        },
        scan,
    }
}

fn fig8() -> ExperimentConfig {
    let mut c = base("fig8-ocf-lorentzian", PRESETS[5].description, Pipeline::Ocf);
    c.spectrum = Some(SpectrumDecl {
        components: single(),
        csv: None,
    });
    c.repetitions = 1;
    c.ocf = Some(ocf_decl(
        vec![1, 2, 3, 4, 5, 6],
        10,
        Some(OcfScanDecl {
            qubits: vec![1, 4],
            durations: (1..=10).map(f64::from).collect(),
        }),
    ));
    c
}

fn fig10() -> ExperimentConfig {
    let mut c = base("fig10-ocf-double", PRESETS[6].description, Pipeline::Ocf);
    c.repetitions = 1;
    c.ocf = Some(ocf_decl(vec![1, 6], 4, None));
    c
}

fn tracking(name: &str, description: &str, omega_osc: f64) -> ExperimentConfig {
    let mut c = base(name, description, Pipeline::Tracking);
    c.spectrum = None;
    c.repetitions = 20;
    c.noise.dp_max = 0.001;
    c.grid.omega_int_max = Some(57.5);
    c.tracking = Some(TrackingDecl {
        s1: single(),
        s2: double(),
        omega_osc,
        duration: 5.0,
        horizon: 500.0,
        k_block: 10,
        omega_max: 11.5,
        omega_c: 10.0,
        retention: Retention::default(),
        ocf_qubits: vec![1, 6],
        ocf_budget: OcfBudget {
            restarts: 4,
            ..OcfBudget::default()
        },
    });
    c
}

fn fig12() -> ExperimentConfig {
    tracking("fig12-tracking-slow", PRESETS[7].description, 0.004 * std::f64::consts::PI)
}

fn fig13() -> ExperimentConfig {
    tracking("fig13-tracking-fast", PRESETS[8].description, 0.01 * std::f64::consts::PI)
}

fn ion_chain() -> ExperimentConfig {
    use std::f64::consts::PI;
    let mut c = base("ion-chain", PRESETS[9].description, Pipeline::QubitScan);
    // Frequencies in rad/ms; Lorentzian widths in units of (2π kHz)².
    let ws = 1.0 / (4.0 * PI * PI);
    c.units = Some(Units {
        time: 1.0,
        time_label: "ms".into(),
    });
    c.spectrum = Some(SpectrumDecl {
        components: vec![lor(1.0, 2.0 * PI, ws), lor(0.7, 6.0 * PI, 2.0 * ws), lor(5.0, 20.0 * PI, ws)],
        csv: None,
    });
    c.grid.step = 0.01;
    c.noise.gamma = vec![0.01];
    let wc = 10.0 * PI;
    c.protocols = vec![ProtocolDecl {
        omega_c: wc,
        omega_max: Some(1.15 * wc),
        ..fo(&[4.0])
    }];
    let dps = [(1, 0.01, 10.0), (2, 0.02, 4.0), (3, 0.03, 4.0), (4, 0.04, 4.0), (6, 0.1, 4.0)];
    c.qubit_scan = Some(QubitScanDecl {
        collective_dephasing: true,
        entries: dps
            .iter()
            .map(|&(n, dp, t)| QubitEntry {
                qubits: n,
                durations: vec![t],
                dp_max: Some(dp),
                gamma: None,
            })
            .collect(),
    });
    c
}

fn nv_center() -> ExperimentConfig {
    // One dimensionless time unit is 40 us, so 1/Γ = 100 us maps to Γ = 0.4.
    let mut c = base("nv-center", PRESETS[10].description, Pipeline::Protocols);
    c.units = Some(Units {
        time: 40.0,
        time_label: "us".into(),
    });
    c.spectrum = Some(SpectrumDecl {
        components: vec![lor(1.0, 0.05, 1600.0), lor(0.7, 0.15, 3200.0)],
        csv: None,
    });
    c.grid.step = 0.000125;
    c.noise.gamma = vec![0.01];
    let p = |kind: Protocol, omega_max: f64, t: f64| ProtocolDecl {
        kind,
        omega_c: 0.25,
        omega_max: Some(omega_max),
        ..fo(&[t])
    };
    c.protocols = vec![p(Protocol::Fo, 0.2875, 80.0), p(Protocol::As, 0.25, 200.0)];
    c
}

fn fisher_bounds() -> ExperimentConfig {
    let mut c = base("fisher-bounds", PRESETS[11].description, Pipeline::Fisher);
    c.noise.gamma = vec![0.0];
    c.grid.step = 0.01;
    c.protocols = vec![fo(&[5.0])];
    c.fisher = Some(FisherDecl {
        random_directions: default_directions(),
        shots: default_shots(),
        monte_carlo_repeats: default_mc(),
        convention: WeightConvention::default(),
    });
    c
}

// ---------------------------------------------------------------------------
// Runner

/// One output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

/// Everything a run produces, assembled before anything is written.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub artifacts: Vec<Artifact>,
    pub summary: Vec<(String, String)>,
}

impl RunReport {
    pub fn artifact(&self, name: &str) -> Option<&str> {
        self.artifacts.iter().find(|a| a.name == name).map(|a| a.contents.as_str())
    }

    pub fn value(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn number(&self, key: &str) -> Option<f64> {
        self.value(key).and_then(|v| v.parse().ok())
    }

    /// Flat `key = value` text.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.summary {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Writes every artifact plus `summary.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::with_capacity(self.artifacts.len() + 1);
        for a in &self.artifacts {
            let p = dir.join(&a.name);
            std::fs::write(&p, &a.contents)?;
            written.push(p);
        }
        let p = dir.join("summary.txt");
        std::fs::write(&p, self.summary_text())?;
        written.push(p);
        Ok(written)
    }
}

/// Validates `config` and runs it on a pool of `workers` threads
/// (`None`: one per core). Results do not depend on the worker count.
pub fn run_scenario(config: &ExperimentConfig, workers: Option<usize>) -> Result<RunReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    pool.install(|| execute(config))
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    sc: Scale,
    header: String,
    artifacts: Vec<Artifact>,
    summary: Vec<(String, String)>,
}

impl Ctx<'_> {
    fn put(&mut self, key: impl Into<String>, value: impl ToString) {
        self.summary.push((key.into(), value.to_string()));
    }

    fn csv(&mut self, name: &str, body: String) {
        self.artifacts.push(Artifact {
            name: name.into(),
            contents: format!("{}{}", self.header, body),
        });
    }

    /// Physical operation time for output.
    fn phys_t(&self, t: f64) -> f64 {
        t * self.sc.0
    }

    fn phys_w(&self, w: f64) -> f64 {
        w / self.sc.0
    }
}

fn execute(cfg: &ExperimentConfig) -> Result<RunReport> {
    let sc = cfg.scale();
    let mut header = String::new();
    let _ = writeln!(header, "# scenario = {}", cfg.scenario);
    let _ = writeln!(header, "# pipeline = {}", cfg.pipeline.name());
    let _ = writeln!(header, "# seed = {}", cfg.seed);
    let _ = writeln!(header, "# repetitions = {}", cfg.repetitions);
    let _ = writeln!(header, "# version = {VERSION}");
    if let Some(u) = &cfg.units {
        let _ = writeln!(header, "# time_unit = {} {}", u.time, u.time_label);
    }
    let mut ctx = Ctx {
        cfg,
        sc,
        header,
        artifacts: Vec::new(),
        summary: Vec::new(),
    };
    ctx.put("scenario", &cfg.scenario);
    ctx.put("pipeline", cfg.pipeline.name());
    ctx.put("version", VERSION);
    ctx.put("seed", cfg.seed);
    ctx.put("repetitions", cfg.repetitions);
    if let Some(u) = &cfg.units {
        ctx.put("time_unit", format!("{} {}", u.time, u.time_label));
    }
    match cfg.pipeline {
        Pipeline::Protocols => run_protocols(&mut ctx)?,
        Pipeline::QubitScan => run_qubit_scan(&mut ctx)?,
        Pipeline::Ocf => run_ocf(&mut ctx)?,
        Pipeline::Tracking => run_tracking(&mut ctx)?,
        Pipeline::Fisher => run_fisher(&mut ctx)?,
    }
    if cfg.plot {
        if let Some(script) = gnuplot_script(cfg.pipeline) {
            ctx.artifacts.push(Artifact {
                name: "plot.gp".into(),
                contents: script.into(),
            });
        }
    }
    Ok(RunReport {
        scenario: cfg.scenario.clone(),
        artifacts: ctx.artifacts,
        summary: ctx.summary,
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v:.10}")
}

/// First maximum of the mean fidelity.
fn best_index(points: &[ScanPoint]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.mean > points[best].mean {
            best = i;
        }
    }
    best
}

/// Reconstruction of the first successful repetition at a scan point,
/// sampled for plotting; empty when every repetition fails.
fn estimate_rows(
    setup: &ProtocolSetup,
    spectrum: &SpectralDensity,
    noise: &NoiseModel,
    point: u64,
    repetitions: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let result = (0..repetitions as u64)
        .map(|r| setup.reconstruct(&noise.with_seed(repetition_seed(noise.seed, point, r))))
        .find_map(|r| r.ok());
    let Some(result) = result else {
        return Ok(Vec::new());
    };
    let samples = result.estimate.samples();
    let stride = (samples.len() / 400).max(1);
    samples
        .iter()
        .step_by(stride)
        .map(|&(w, v)| Ok((w, setup.scale * spectrum.eval(w)?, v)))
        .collect()
}

fn scan_row(s: &mut String, prefix: &str, t_phys: f64, p: &ScanPoint) {
    let _ = writeln!(
        s,
        "{prefix}{t_phys},{},{},{},{:.4},{:.10e}",
        fmt_f(p.mean),
        fmt_f(p.stderr),
        p.failures,
        p.mean_retained,
        p.scale
    );
}

fn run_protocols(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let sc = ctx.sc;
    let spectrum = cfg.build_spectrum()?;
    let mut curve = String::from("protocol,gamma,T,fidelity_mean,fidelity_stderr,failures,mean_retained,scale\n");
    let mut optimal = String::from("protocol,gamma,T_opt,fidelity_mean,fidelity_stderr\n");
    let mut estimates = String::from("protocol,gamma,T,omega,truth,estimate\n");
    let mut points_total = 0;
    for (pi, p) in cfg.protocols.iter().enumerate() {
        let pc = cfg.protocol_config(p, p.qubits, sc);
        let setups = p
            .durations
            .iter()
            .map(|&t| ProtocolSetup::new(&pc, &spectrum, sc.time(t)).map_err(|e| e.in_module("reconstruct")))
            .collect::<Result<Vec<_>>>()?;
        let tag = p.kind.name().to_lowercase();
        for (gi, &g) in cfg.noise.gamma.iter().enumerate() {
            let noise = NoiseModel::new(cfg.noise.dp_max, sc.rate(g), cfg.noise.shots, cfg.seed)
                .map_err(|e| e.in_module("probe"))?;
            let point = |ti: usize| ((pi * cfg.noise.gamma.len() + gi) * 1000 + ti) as u64;
            let pts: Vec<ScanPoint> = setups
                .iter()
                .enumerate()
                .map(|(ti, s)| repeat_fidelity(s, &noise, cfg.repetitions, point(ti)))
                .collect();
            points_total += pts.len();
            for (ti, sp) in pts.iter().enumerate() {
                scan_row(&mut curve, &format!("{tag},{g},"), p.durations[ti], sp);
            }
            let b = best_index(&pts);
            let bp = &pts[b];
            let _ = writeln!(
                optimal,
                "{tag},{g},{},{},{}",
                p.durations[b],
                fmt_f(bp.mean),
                fmt_f(bp.stderr)
            );
            let key = format!("{tag}.gamma_{g}");
            ctx.put(format!("{key}.best_T"), p.durations[b]);
            ctx.put(format!("{key}.fidelity_mean"), fmt_f(bp.mean));
            ctx.put(format!("{key}.fidelity_stderr"), fmt_f(bp.stderr));
            ctx.put(format!("{key}.failures"), bp.failures);
            for (w, truth, est) in estimate_rows(&setups[b], &spectrum, &noise, point(b), cfg.repetitions)? {
                let _ = writeln!(
                    estimates,
                    "{tag},{g},{},{:.8},{:.10e},{:.10e}",
                    p.durations[b],
                    ctx.phys_w(w),
                    truth,
                    est
                );
            }
        }
    }
    ctx.put("scan_points", points_total);
    ctx.csv("fidelity_curve.csv", curve);
    ctx.csv("optimal.csv", optimal);
    ctx.csv("estimates.csv", estimates);
    Ok(())
}

fn run_qubit_scan(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let sc = ctx.sc;
    let spectrum = cfg.build_spectrum()?;
    let q = cfg.qubit_scan.as_ref().expect("validated");
    let template = &cfg.protocols[0];
    let mut curve = String::from("qubits,gamma,dp_max,T,fidelity_mean,fidelity_stderr,failures,mean_retained,scale\n");
    let mut optimal = String::from("qubits,T_opt,fidelity_mean,fidelity_stderr\n");
    let mut estimates = String::from("qubits,T,omega,truth,estimate\n");
    let mut best_n = (0usize, f64::NEG_INFINITY);
    for (ei, e) in q.entries.iter().enumerate() {
        let pc = cfg.protocol_config(template, e.qubits, sc);
        let dp = e.dp_max.unwrap_or(cfg.noise.dp_max);
        let g1 = e.gamma.unwrap_or(cfg.noise.gamma[0]);
        let g = if q.collective_dephasing { g1 * e.qubits as f64 } else { g1 };
        let noise = NoiseModel::new(dp, sc.rate(g), cfg.noise.shots, cfg.seed).map_err(|e| e.in_module("probe"))?;
        let setups = e
            .durations
            .iter()
            .map(|&t| ProtocolSetup::new(&pc, &spectrum, sc.time(t)).map_err(|e| e.in_module("reconstruct")))
            .collect::<Result<Vec<_>>>()?;
        let point = |ti: usize| (ei * 1000 + ti) as u64;
        let pts: Vec<ScanPoint> = setups
            .iter()
            .enumerate()
            .map(|(ti, s)| repeat_fidelity(s, &noise, cfg.repetitions, point(ti)))
            .collect();
        for (ti, sp) in pts.iter().enumerate() {
            scan_row(&mut curve, &format!("{},{g},{dp},", e.qubits), e.durations[ti], sp);
        }
        let b = best_index(&pts);
        let bp = &pts[b];
        let _ = writeln!(optimal, "{},{},{},{}", e.qubits, e.durations[b], fmt_f(bp.mean), fmt_f(bp.stderr));
        let key = format!("n{}", e.qubits);
        ctx.put(format!("{key}.best_T"), e.durations[b]);
        ctx.put(format!("{key}.fidelity_mean"), fmt_f(bp.mean));
        ctx.put(format!("{key}.fidelity_stderr"), fmt_f(bp.stderr));
        ctx.put(format!("{key}.failures"), bp.failures);
        if bp.mean > best_n.1 {
            best_n = (e.qubits, bp.mean);
        }
        for (w, truth, est) in estimate_rows(&setups[b], &spectrum, &noise, point(b), cfg.repetitions)? {
            let _ = writeln!(
                estimates,
                "{},{},{:.8},{:.10e},{:.10e}",
                e.qubits,
                e.durations[b],
                ctx.phys_w(w),
                truth,
                est
            );
        }
    }
    ctx.put("best_qubits", best_n.0);
    ctx.csv("fidelity_curve.csv", curve);
    ctx.csv("optimal.csv", optimal);
    ctx.csv("estimates.csv", estimates);
    Ok(())
}

fn mode_name(qubits: Option<usize>) -> String {
    qubits.map_or_else(|| "continuous".to_string(), |n| n.to_string())
}

struct OcfJob {
    qubits: Option<usize>,
    duration: f64,
    scan: bool,
}

fn run_ocf(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let sc = ctx.sc;
    let spectrum = cfg.build_spectrum()?;
    let o = cfg.ocf.as_ref().expect("validated");
    let grid = FrequencyGrid::new(sc.freq(o.grid_max), o.grid_points).map_err(|e| e.in_module("ocf"))?;
    let omega_c = sc.freq(o.omega_c);
    let mut jobs = Vec::new();
    let mut modes: Vec<Option<usize>> = o.qubits.iter().map(|&n| Some(n)).collect();
    if o.continuous {
        modes.push(None);
    }
    for &t in &o.durations {
        for &m in &modes {
            jobs.push(OcfJob {
                qubits: m,
                duration: t,
                scan: false,
            });
        }
    }
    if let Some(s) = &o.scan {
        for &n in &s.qubits {
            for &t in &s.durations {
                jobs.push(OcfJob {
                    qubits: Some(n),
                    duration: t,
                    scan: true,
                });
            }
        }
    }
    let results: Vec<Vec<OcfSolution>> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, j)| {
            let problem = OcfProblem {
                spectrum: spectrum.clone(),
                qubits: j.qubits,
                duration: sc.time(j.duration),
                omega_c,
                penalty_weight: o.penalty_weight,
                grid,
                budget: o.budget,
                seed: split_seed(cfg.seed, i as u64),
            };
            optimize_restarts(&problem).map_err(|e| e.in_module("ocf"))
        })
        .collect::<Result<_>>()?;

    let objective = Objective::new(&spectrum, grid, omega_c, o.penalty_weight).map_err(|e| e.in_module("ocf"))?;
    let s_values = spectrum.sample(&grid)?;
    let mut table = String::from(
        "set,qubits,T,restarts,best_fidelity,best_xi,mean_fidelity,fidelity_stderr,out_of_band,evaluations\n",
    );
    let mut filters = String::from("qubits,T,omega,filter_normalized,target_normalized\n");
    let s_norm = objective.target_norm();
    for (j, runs) in jobs.iter().zip(results) {
        let fids: Vec<f64> = runs.iter().map(OcfSolution::fidelity).collect();
        let (mean, se) = mean_stderr(&fids);
        let evaluations: usize = runs.iter().map(|s| s.evaluations).sum();
        let restarts = runs.len();
        let best = best_solution(runs).expect("at least one restart");
        let mode = mode_name(j.qubits);
        let set = if j.scan { "scan" } else { "main" };
        let _ = writeln!(
            table,
            "{set},{mode},{},{restarts},{},{:.10e},{},{},{:.6e},{evaluations}",
            j.duration,
            fmt_f(best.fidelity()),
            best.xi(),
            fmt_f(mean),
            fmt_f(se),
            best.value.out_of_band
        );
        let key = format!("{set}.n{mode}.T_{}", j.duration);
        ctx.put(format!("{key}.best_fidelity"), fmt_f(best.fidelity()));
        ctx.put(format!("{key}.mean_fidelity"), fmt_f(mean));
        ctx.put(format!("{key}.fidelity_stderr"), fmt_f(se));
        if !j.scan {
            let f = control_filter(&best.control, &grid);
            let f_norm = crate::filterfn::continuous_norm(f.values(), &grid, omega_c)?;
            for i in (0..grid.len()).step_by(5) {
                let _ = writeln!(
                    filters,
                    "{mode},{},{:.6},{:.10e},{:.10e}",
                    j.duration,
                    ctx.phys_w(grid.omega(i)),
                    f.values()[i] / f_norm,
                    s_values[i] / s_norm
                );
            }
            ctx.csv(&format!("control_n{mode}_T{}.csv", j.duration), best.to_csv());
        }
    }
    ctx.csv("ocf_fidelity.csv", table);
    ctx.csv("filters.csv", filters);
    Ok(())
}

fn optimized_pair(
    s1: &SpectralDensity,
    s2: &SpectralDensity,
    qubits: usize,
    t: &TrackingDecl,
    omega_c: f64,
    duration: f64,
    seed: u64,
) -> Result<[Control; 2]> {
    let mk = |s: &SpectralDensity, idx: u64| -> Result<Control> {
        let mut p = OcfProblem::new(s.clone(), Some(qubits), duration, split_seed(seed, idx))?;
        p.omega_c = omega_c;
        p.budget = t.ocf_budget;
        let runs = optimize_restarts(&p)?;
        Ok(best_solution(runs).expect("at least one restart").control)
    };
    Ok([mk(s1, 2 * qubits as u64)?, mk(s2, 2 * qubits as u64 + 1)?])
}

fn run_tracking(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let sc = ctx.sc;
    let t = cfg.tracking.as_ref().expect("validated");
    let s1 = SpectralDensity::lorentzians(t.s1.iter().map(|c| sc.component(c)).collect());
    let s2 = SpectralDensity::lorentzians(t.s2.iter().map(|c| sc.component(c)).collect());
    let sig = CompositeSignal::new(s1.clone(), s2.clone(), sc.rate(t.omega_osc));
    let base_noise = NoiseModel::new(cfg.noise.dp_max, sc.rate(cfg.noise.gamma[0]), cfg.noise.shots, cfg.seed)
        .map_err(|e| e.in_module("probe"))?;
    let omega_c = sc.freq(t.omega_c);
    let settings = |seed: u64| TrackingSettings {
        duration: sc.time(t.duration),
        horizon: sc.time(t.horizon),
        omega_c,
        grid_step: sc.freq(cfg.grid.step),
        omega_int_max: sc.freq(cfg.grid.omega_int_max.unwrap_or(5.0 * t.omega_max.max(t.omega_c))),
        noise: base_noise.with_seed(seed),
    };
    let mut rms_table = String::from("method,qubits,samples,T_c,rms_mean,rms_stderr,rms_at_samples_mean\n");
    let mut series = String::from("method,qubits,t,s1_hat,s2_hat,s1_true,s2_true\n");

    let mut record = |ctx: &mut Ctx, name: &str, qubits: &str, runs: &[TrackingRun]| {
        let rms: Vec<f64> = runs.iter().map(TrackingRun::rms).collect();
        let rms_s: Vec<f64> = runs.iter().map(TrackingRun::rms_at_samples).collect();
        let (m, se) = mean_stderr(&rms);
        let (ms, _) = mean_stderr(&rms_s);
        let r0 = &runs[0];
        let _ = writeln!(
            rms_table,
            "{name},{qubits},{},{},{},{},{}",
            r0.len(),
            ctx.phys_t(r0.block_duration),
            fmt_f(m),
            fmt_f(se),
            fmt_f(ms)
        );
        for i in 0..r0.len() {
            let _ = writeln!(
                series,
                "{name},{qubits},{},{:.10},{:.10},{:.10},{:.10}",
                ctx.phys_t(r0.times[i]),
                r0.s1_hat[i],
                r0.s2_hat[i],
                r0.s1_true[i],
                r0.s2_true[i]
            );
        }
        let key = if qubits.is_empty() { name.to_string() } else { format!("{name}.n{qubits}") };
        ctx.put(format!("{key}.samples"), r0.len());
        ctx.put(format!("{key}.rms_mean"), fmt_f(m));
        ctx.put(format!("{key}.rms_stderr"), fmt_f(se));
    };

    let fo_runs: Vec<TrackingRun> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| {
            track_fo(&sig, t.k_block, sc.freq(t.omega_max), &settings(repetition_seed(cfg.seed, 0, r as u64)), t.retention)
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_module("tracking"))?;
    record(ctx, "fo-block", "", &fo_runs);

    for (qi, &n) in t.ocf_qubits.iter().enumerate() {
        let pair = optimized_pair(&s1, &s2, n, t, omega_c, sc.time(t.duration), cfg.seed).map_err(|e| e.in_module("ocf"))?;
        let runs: Vec<TrackingRun> = (0..cfg.repetitions)
            .into_par_iter()
            .map(|r| {
                track_ocf(&sig, [&pair[0], &pair[1]], &settings(repetition_seed(cfg.seed, qi as u64 + 1, r as u64)))
            })
            .collect::<Result<_>>()
            .map_err(|e| e.in_module("tracking"))?;
        record(ctx, "ocf-pair", &n.to_string(), &runs);
    }
    ctx.csv("tracking_rms.csv", rms_table);
    ctx.csv("tracking_series.csv", series);
    Ok(())
}

/// Random two-component Lorentzian direction.
pub fn random_direction(seed: u64, index: u64) -> SpectralDensity {
    let mut rng = stream_rng(seed, index);
    let comps = (0..2)
        .map(|_| LorentzianComponent {
            amplitude: rng.random_range(0.2..1.0),
            center: rng.random_range(0.0..10.0),
            width_scale: rng.random_range(0.5..3.0),
        })
        .collect();
    SpectralDensity::lorentzians(comps)
}

fn run_fisher(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let sc = ctx.sc;
    let f = cfg.fisher.as_ref().expect("validated");
    let spectrum = cfg.build_spectrum()?;
    let p = &cfg.protocols[0];
    let pc = cfg.protocol_config(p, p.qubits, sc);
    let duration = sc.time(p.durations[0]);
    let gamma = sc.rate(cfg.noise.gamma[0]);
    let setup = ProtocolSetup::new(&pc, &spectrum, duration).map_err(|e| e.in_module("reconstruct"))?;
    let filters: &[FilterFunction] = &setup.filters;
    let probs: Vec<f64> = setup
        .coefficients
        .iter()
        .map(|&c| survival_probability(c, gamma, duration))
        .collect();
    let fio = build_fio_with(filters, &probs, f.convention).map_err(|e| e.in_module("fisher"))?;
    let limit = pc.integration_limit();
    let grid = *filters[0].grid();
    let gram = nalgebra::DMatrix::from_fn(filters.len(), filters.len(), |i, j| {
        crate::filterfn::overlap_sampled(filters[i].values(), filters[j].values(), &grid, grid.omega_max())
    });
    let filter_rank = numerical_rank(&gram, RANK_TOLERANCE);
    let rank = fio_rank(&fio, RANK_TOLERANCE);
    ctx.put("filters", filters.len());
    ctx.put("filter_rank", filter_rank);
    ctx.put("fio_rank", rank);

    let mut directions = vec![("spectrum".to_string(), spectrum.scaled(setup.scale))];
    for i in 0..f.random_directions {
        directions.push((format!("random{i}"), random_direction(cfg.seed, i as u64)));
    }
    let chi0: Vec<f64> = fio.included().iter().map(|&k| setup.coefficients[k]).collect();
    let rows_checks: Vec<(FisherRow, Option<crate::fisher::CramerRaoCheck>)> = directions
        .par_iter()
        .enumerate()
        .map(|(i, (name, d))| {
            let values = d.sample(&grid)?;
            let derivatives = fio.projections(&values, limit);
            let info = fio.directional_sampled(&values, limit);
            let row = FisherRow {
                direction: name.clone(),
                rank,
                information: info,
                bound: crate::fisher::bound_from_information(info),
            };
            let check = if f.monte_carlo_repeats >= 2 {
                let model = DirectionalModel {
                    chi0: chi0.clone(),
                    derivatives,
                    decay: gamma * duration,
                    shots: f.shots,
                };
                Some(mle_monte_carlo(&model, f.monte_carlo_repeats, split_seed(cfg.seed, 1000 + i as u64))?)
            } else {
                None
            };
            Ok((row, check))
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.in_module("fisher"))?;
    let rows: Vec<FisherRow> = rows_checks.iter().map(|(r, _)| r.clone()).collect();
    ctx.csv("fisher.csv", crate::fisher::fisher_csv(&rows));
    let mut mc = String::from("direction,bound,std_dev,std_dev_se,mean,repeats,failures,consistent_3se\n");
    let mut all_ok = true;
    for (row, check) in &rows_checks {
        if let Some(c) = check {
            let ok = c.consistent(3.0);
            all_ok &= ok;
            let _ = writeln!(
                mc,
                "{},{:.10e},{:.10e},{:.10e},{:.10e},{},{},{}",
                row.direction, c.bound, c.std_dev, c.std_dev_se, c.mean, c.repeats, c.failures, ok
            );
            ctx.put(format!("{}.bound", row.direction), format!("{:.10e}", c.bound));
            ctx.put(format!("{}.std_dev", row.direction), format!("{:.10e}", c.std_dev));
        }
    }
    if f.monte_carlo_repeats >= 2 {
        ctx.put("cramer_rao_consistent", all_ok);
        ctx.csv("cramer_rao.csv", mc);
    }
    Ok(())
}

fn gnuplot_script(pipeline: Pipeline) -> Option<&'static str> {
    Some(match pipeline {
        Pipeline::Protocols => {
            "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'T'\nset ylabel 'fidelity'\n\
             plot 'fidelity_curve.csv' using 3:4:5 with yerrorbars\n"
        }
        Pipeline::QubitScan => {
            "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'N'\nset ylabel 'fidelity'\n\
             plot 'optimal.csv' using 1:3:4 with yerrorlines\n"
        }
        Pipeline::Ocf => {
            "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'omega'\n\
             plot 'filters.csv' using 3:4 with lines, '' using 3:5 with lines dashtype 2\n"
        }
        Pipeline::Tracking => {
            "set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\nset ylabel 's2'\n\
             plot 'tracking_series.csv' using 3:5 with points, '' using 3:7 with lines\n"
        }
        Pipeline::Fisher => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_is_ordered_and_complete() {
        let names: Vec<&str> = list_scenarios().iter().map(|p| p.0).collect();
        for n in [
            "fig2-fidelity-vs-time",
            "fig6-leakage-vs-nqubits",
            "fig8-ocf-lorentzian",
            "fig12-tracking-slow",
            "fig13-tracking-fast",
            "fig4-dephasing0",
            "fig3-fidelity-vs-gamma",
            "ion-chain",
            "nv-center",
        ] {
            assert!(names.contains(&n), "{n} missing");
        }
        assert_eq!(list_scenarios(), list_scenarios());
        let mut sorted = names.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for p in presets() {
            let cfg = p.config();
            assert_eq!(cfg.scenario, p.name);
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", p.name));
            let text = cfg.to_toml();
            let back = ExperimentConfig::from_toml_str(&text).unwrap_or_else(|e| panic!("{}: {e}\n{text}", p.name));
            assert_eq!(back, cfg, "{}", p.name);
        }
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let text = "scenario = \"x\"\npipeline = \"protocols\"\nseed = 1\nbogus = 3\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line 4"), "{err}");
    }

    #[test]
    fn semantic_error_points_at_line() {
        let mut cfg = preset("fig2-fidelity-vs-time").unwrap();
        cfg.protocols[0].durations = vec![1.0, -2.0];
        let text = cfg.to_toml();
        let line = text.lines().position(|l| l.starts_with("durations")).unwrap() + 1;
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains(&format!("line {line}")) && err.contains("protocols[0].durations"), "{err}");
    }

    #[test]
    fn missing_section_reported() {
        let mut cfg = preset("fig8-ocf-lorentzian").unwrap();
        cfg.ocf = None;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("ocf"), "{err}");
    }

    #[test]
    fn locate_nested_entries() {
        let text = "a = 1\n[[qubit_scan.entries]]\nqubits = 1\n[[qubit_scan.entries]]\nqubits = 2\ndp_max = 0.7\n";
        assert_eq!(locate(text, "qubit_scan.entries[1].dp_max"), Some(6));
        assert_eq!(locate(text, "qubit_scan.entries[0].qubits"), Some(3));
        assert_eq!(locate(text, "a"), Some(1));
    }

    #[test]
    fn unit_conversion_is_exact_for_nv() {
        let nv = preset("nv-center").unwrap();
        let twin = preset("fig5-dephasing4").unwrap();
        assert_eq!(nv.build_spectrum().unwrap(), twin.build_spectrum().unwrap());
        let sc = nv.scale();
        for (a, b) in nv.protocols.iter().zip(&twin.protocols) {
            assert_eq!(nv.protocol_config(a, 1, sc), twin.protocol_config(b, 1, Scale(1.0)));
            assert_eq!(sc.time(a.durations[0]), b.durations[0]);
        }
        assert_eq!(sc.rate(nv.noise.gamma[0]), twin.noise.gamma[0]);
    }

    #[test]
    fn spectrum_csv_loads() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s.csv"), "# x\nfrequency,value\n0,1\n5,2\n60,0\n").unwrap();
        let mut cfg = preset("fig2-fidelity-vs-time").unwrap();
        cfg.spectrum = Some(SpectrumDecl {
            components: vec![],
            csv: Some("s.csv".into()),
        });
        cfg.base_dir = Some(dir.path().to_path_buf());
        let s = cfg.build_spectrum().unwrap();
        assert!((s.eval(2.5).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn small_protocol_run_is_worker_independent() {
        let mut cfg = preset("fig5-dephasing4").unwrap();
        cfg.repetitions = 6;
        let a = run_scenario(&cfg, Some(1)).unwrap();
        let b = run_scenario(&cfg, Some(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.artifact("fidelity_curve.csv").unwrap().starts_with("# scenario = fig5-dephasing4"));
        assert!(a.number("fo.gamma_0.4.fidelity_mean").unwrap() > 0.5);
    }
}
