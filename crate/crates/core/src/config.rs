//! Run configuration in the flat `section.key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Keys not given keep their
//! defaults, so the empty text is a complete configuration.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diagnostics::MonitorConfig;
use crate::error::{Error, Result};
use crate::flow::{FlowParams, Mode};
use crate::grid::{Grid, GridKind};
use crate::initial::InitialDataSpec;
use crate::target::{TargetGeometry, WarpingKind, WarpingSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Warping {
    Poly,
    Exp,
    Compact,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub c_n: f64,
    pub warping: Warping,
    pub delta: f64,
    pub alpha: f64,
    /// Tail coefficient; `None` picks 1 for poly and 0.01 for exp.
    pub c3: Option<f64>,
    pub lambda: f64,
    pub c4: f64,
    pub vbar: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            c_n: 1e6,
            warping: Warping::Poly,
            delta: 0.5,
            alpha: 2.0 * std::f64::consts::PI,
            c3: None,
            lambda: 64.0,
            c4: 0.04,
            vbar: 7.0,
        }
    }
}

impl TargetConfig {
    pub fn kind(&self) -> WarpingKind {
        match self.warping {
            Warping::Poly => WarpingKind::Poly { delta: self.delta, c3: self.c3.unwrap_or(1.0), lambda: self.lambda },
            Warping::Exp => WarpingKind::Exp { alpha: self.alpha, c3: self.c3.unwrap_or(0.01), lambda: self.lambda },
            Warping::Compact => WarpingKind::Compact { c4: self.c4 },
            Warping::Flat => WarpingKind::Flat,
        }
    }

    pub fn build(&self) -> Result<TargetGeometry> {
        TargetGeometry::new(self.c_n, WarpingSpec::new(self.kind(), self.vbar)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridChoice {
    Uniform,
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub n: usize,
    pub kind: GridChoice,
    pub core: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 2048, kind: GridChoice::Clustered, core: 1.0 }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid> {
        let kind = match self.kind {
            GridChoice::Uniform => GridKind::Uniform,
            GridChoice::Clustered => GridKind::Clustered { core: self.core },
        };
        Grid::new(kind, self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: String,
    /// Snapshot every this many records; 0 writes only the initial and final states.
    pub snapshot_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into(), snapshot_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub target: TargetConfig,
    pub flow: FlowParams,
    pub grid: GridConfig,
    pub initial: InitialDataSpec,
    pub monitor: MonitorConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            target: TargetConfig::default(),
            flow: FlowParams::default(),
            grid: GridConfig::default(),
            initial: InitialDataSpec::default(),
            monitor: MonitorConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    Syntax,
    UnknownKey,
    TypeMismatch,
    Range,
}

/// One violation found while parsing; `line` is 1-based, 0 for whole-config checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigIssue {
    pub line: usize,
    pub key: String,
    pub kind: IssueKind,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}: {}", self.line, self.key, self.message)
    }
}

enum Bad {
    Type(String),
    Range(String),
}

fn num(v: &str) -> std::result::Result<f64, Bad> {
    v.parse::<f64>().map_err(|_| Bad::Type(format!("expected a number, got '{v}'")))
}

fn uint(v: &str) -> std::result::Result<usize, Bad> {
    v.parse::<usize>().map_err(|_| Bad::Type(format!("expected a non-negative integer, got '{v}'")))
}

fn positive(v: &str) -> std::result::Result<f64, Bad> {
    let x = num(v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Bad::Range(format!("must be positive, got {x}")))
    }
}

fn nonneg(v: &str) -> std::result::Result<f64, Bad> {
    let x = num(v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Bad::Range(format!("must be >= 0, got {x}")))
    }
}

fn open_unit(v: &str) -> std::result::Result<f64, Bad> {
    let x = num(v)?;
    if x > 0.0 && x < 1.0 {
        Ok(x)
    } else {
        Err(Bad::Range(format!("must lie in (0, 1), got {x}")))
    }
}

fn auto_or<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, Bad>) -> std::result::Result<Option<T>, Bad> {
    if v == "auto" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn choice<T: Copy>(v: &str, opts: &[(&str, T)]) -> std::result::Result<T, Bad> {
    opts.iter().find(|(k, _)| *k == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = opts.iter().map(|(k, _)| *k).collect();
        Bad::Type(format!("expected one of {}, got '{v}'", names.join("|")))
    })
}

/// Every recognised key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "run.mode",
    "run.seed",
    "target.c_n",
    "target.warping",
    "target.delta",
    "target.alpha",
    "target.c3",
    "target.lambda",
    "target.c4",
    "target.vbar",
    "flow.eta",
    "flow.d",
    "flow.dt_init",
    "flow.dt_min",
    "flow.dt_max",
    "flow.safety",
    "flow.step_tol",
    "flow.tol_inner",
    "flow.ell_stop",
    "flow.t_max",
    "flow.max_steps",
    "flow.max_inner",
    "grid.n",
    "grid.kind",
    "grid.core",
    "initial.eps",
    "initial.z0",
    "initial.budget_eps",
    "initial.ell0",
    "initial.ell_bar",
    "monitor.eps0",
    "monitor.eps1",
    "monitor.c0",
    "monitor.c1",
    "monitor.delta",
    "monitor.ell_bar",
    "monitor.e0",
    "output.dir",
    "output.snapshot_every",
];

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Option<std::result::Result<(), Bad>> {
        if !KEYS.contains(&key) {
            return None;
        }
        let r = (|| -> std::result::Result<(), Bad> {
            match key {
                "run.mode" => self.flow.mode = choice(v, &[("full", Mode::Full), ("rescaled", Mode::Rescaled)])?,
                "run.seed" => {
                    self.seed = v.parse().map_err(|_| Bad::Type(format!("expected an unsigned integer, got '{v}'")))?
                }
                "target.c_n" => self.target.c_n = positive(v)?,
                "target.warping" => {
                    self.target.warping = choice(
                        v,
                        &[("poly", Warping::Poly), ("exp", Warping::Exp), ("compact", Warping::Compact), ("flat", Warping::Flat)],
                    )?
                }
                "target.delta" => self.target.delta = open_unit(v)?,
                "target.alpha" => self.target.alpha = positive(v)?,
                "target.c3" => self.target.c3 = auto_or(v, positive)?,
                "target.lambda" => self.target.lambda = positive(v)?,
                "target.c4" => self.target.c4 = positive(v)?,
                "target.vbar" => self.target.vbar = nonneg(v)?,
                "flow.eta" => self.flow.eta = positive(v)?,
                "flow.d" => self.flow.d = positive(v)?,
                "flow.dt_init" => self.flow.dt_init = positive(v)?,
                "flow.dt_min" => self.flow.dt_min = positive(v)?,
                "flow.dt_max" => self.flow.dt_max = positive(v)?,
                "flow.safety" => {
                    let x = num(v)?;
                    if !(x > 0.0 && x <= 1.0) {
                        return Err(Bad::Range(format!("must lie in (0, 1], got {x}")));
                    }
                    self.flow.safety = x;
                }
                "flow.step_tol" => self.flow.step_tol = positive(v)?,
                "flow.tol_inner" => self.flow.tol_inner = positive(v)?,
                "flow.ell_stop" => self.flow.ell_stop = positive(v)?,
                "flow.t_max" => self.flow.t_max = nonneg(v)?,
                "flow.max_steps" => self.flow.max_steps = uint(v)?,
                "flow.max_inner" => self.flow.max_inner = uint(v)?,
                "grid.n" => {
                    let n = uint(v)?;
                    if n < 8 || n % 2 != 0 {
                        return Err(Bad::Range(format!("must be even and >= 8, got {n}")));
                    }
                    self.grid.n = n;
                }
                "grid.kind" => {
                    self.grid.kind = choice(v, &[("uniform", GridChoice::Uniform), ("clustered", GridChoice::Clustered)])?
                }
                "grid.core" => self.grid.core = positive(v)?,
                "initial.eps" => {
                    let x = num(v)?;
                    if !(x > 0.0 && x < 0.125) {
                        return Err(Bad::Range(format!("must lie in (0, 1/8), got {x}")));
                    }
                    self.initial.eps = x;
                }
                "initial.z0" => {
                    let x = num(v)?;
                    if !(x > 1.0 && x.is_finite()) {
                        return Err(Bad::Range(format!("must exceed 1, got {x}")));
                    }
                    self.initial.z0 = x;
                }
                "initial.budget_eps" => self.initial.budget_eps = positive(v)?,
                "initial.ell0" => self.initial.ell0 = auto_or(v, positive)?,
                "initial.ell_bar" => self.initial.ell_bar = positive(v)?,
                "monitor.eps0" => self.monitor.eps0 = positive(v)?,
                "monitor.eps1" => self.monitor.eps1 = positive(v)?,
                "monitor.c0" => self.monitor.c0 = positive(v)?,
                "monitor.c1" => self.monitor.c1 = positive(v)?,
                "monitor.delta" => self.monitor.delta = open_unit(v)?,
                "monitor.ell_bar" => self.monitor.ell_bar = positive(v)?,
                "monitor.e0" => self.monitor.e0 = positive(v)?,
                "output.dir" => {
                    if v.is_empty() {
                        return Err(Bad::Range("must not be empty".into()));
                    }
                    self.output.dir = v.to_string();
                }
                "output.snapshot_every" => self.output.snapshot_every = uint(v)?,
                _ => unreachable!("key list and setter disagree on {key}"),
            }
            Ok(())
        })();
        Some(r)
    }

    fn get(&self, key: &str) -> String {
        let opt = |o: Option<f64>| o.map_or("auto".to_string(), |x| x.to_string());
        match key {
            "run.mode" => match self.flow.mode {
                Mode::Full => "full".into(),
                Mode::Rescaled => "rescaled".into(),
            },
            "run.seed" => self.seed.to_string(),
            "target.c_n" => self.target.c_n.to_string(),
            "target.warping" => serde_json::to_value(self.target.warping).unwrap().as_str().unwrap().to_string(),
            "target.delta" => self.target.delta.to_string(),
            "target.alpha" => self.target.alpha.to_string(),
            "target.c3" => opt(self.target.c3),
            "target.lambda" => self.target.lambda.to_string(),
            "target.c4" => self.target.c4.to_string(),
            "target.vbar" => self.target.vbar.to_string(),
            "flow.eta" => self.flow.eta.to_string(),
            "flow.d" => self.flow.d.to_string(),
            "flow.dt_init" => self.flow.dt_init.to_string(),
            "flow.dt_min" => self.flow.dt_min.to_string(),
            "flow.dt_max" => self.flow.dt_max.to_string(),
            "flow.safety" => self.flow.safety.to_string(),
            "flow.step_tol" => self.flow.step_tol.to_string(),
            "flow.tol_inner" => self.flow.tol_inner.to_string(),
            "flow.ell_stop" => self.flow.ell_stop.to_string(),
            "flow.t_max" => self.flow.t_max.to_string(),
            "flow.max_steps" => self.flow.max_steps.to_string(),
            "flow.max_inner" => self.flow.max_inner.to_string(),
            "grid.n" => self.grid.n.to_string(),
            "grid.kind" => serde_json::to_value(self.grid.kind).unwrap().as_str().unwrap().to_string(),
            "grid.core" => self.grid.core.to_string(),
            "initial.eps" => self.initial.eps.to_string(),
            "initial.z0" => self.initial.z0.to_string(),
            "initial.budget_eps" => self.initial.budget_eps.to_string(),
            "initial.ell0" => opt(self.initial.ell0),
            "initial.ell_bar" => self.initial.ell_bar.to_string(),
            "monitor.eps0" => self.monitor.eps0.to_string(),
            "monitor.eps1" => self.monitor.eps1.to_string(),
            "monitor.c0" => self.monitor.c0.to_string(),
            "monitor.c1" => self.monitor.c1.to_string(),
            "monitor.delta" => self.monitor.delta.to_string(),
            "monitor.ell_bar" => self.monitor.ell_bar.to_string(),
            "monitor.e0" => self.monitor.e0.to_string(),
            "output.dir" => self.output.dir.clone(),
            "output.snapshot_every" => self.output.snapshot_every.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Canonical text; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let sec = key.split('.').next().unwrap();
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = sec;
            }
            writeln!(out, "{key} = {}", self.get(key)).unwrap();
        }
        out
    }

    /// Apply override lines on top of `self`.
    pub fn apply(&self, text: &str) -> std::result::Result<RunConfig, Vec<ConfigIssue>> {
        let mut cfg = self.clone();
        let mut issues = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap().trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                issues.push(ConfigIssue {
                    line,
                    key: body.to_string(),
                    kind: IssueKind::Syntax,
                    message: "expected 'section.key = value'".into(),
                });
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            match cfg.set(k, v) {
                None => issues.push(ConfigIssue {
                    line,
                    key: k.to_string(),
                    kind: IssueKind::UnknownKey,
                    message: "unknown key".into(),
                }),
                Some(Err(Bad::Type(m))) => {
                    issues.push(ConfigIssue { line, key: k.to_string(), kind: IssueKind::TypeMismatch, message: m })
                }
                Some(Err(Bad::Range(m))) => {
                    issues.push(ConfigIssue { line, key: k.to_string(), kind: IssueKind::Range, message: m })
                }
                Some(Ok(())) => {}
            }
        }
        if issues.is_empty() {
            if let Err(e) = cfg.cross_check() {
                issues.push(ConfigIssue { line: 0, key: "config".into(), kind: IssueKind::Range, message: e.to_string() });
            }
        }
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(issues)
        }
    }

    fn cross_check(&self) -> Result<()> {
        self.flow.validate()?;
        self.monitor.validate()?;
        if let Some(l0) = self.initial.ell0 {
            if l0 <= self.flow.ell_stop {
                return Err(Error::Config(format!("initial.ell0 = {l0} is not above flow.ell_stop")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Parse the flat format; all violations are reported together.
pub fn parse_config(text: &str) -> std::result::Result<RunConfig, Vec<ConfigIssue>> {
    RunConfig::default().apply(text)
}
