//! Run orchestration and artifact emission.
//!
//! One run writes into its output directory:
//!
//! ```text
//! series.csv              one row per record
//! summary.json            cause, fits, monitor aggregates, config echo
//! config.txt              canonical config text
//! snapshots/snap_NNNNNN.csv
//! error.json              only when the run fails
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigIssue, RunConfig};
use crate::diagnostics::{self, PsiRatioTracker, Regime};
use crate::error::{Error, Result};
use crate::flow::{self, FlowState, Mode, RateFit, Record};
use crate::initial::{self, BudgetReport, Layout};
use crate::map;
use crate::target::TargetGeometry;

/// Bumped whenever a field of `summary.json` or a column of `series.csv` changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const SERIES_HEADER: &str =
    "t,ell,E,psi_mean,psi_std,b0,L_leash,v_max,tension_norm,dE_dt_fd,dE_dt_model,thm1_i,thm1_ii,thm2_regime";

pub const SNAPSHOT_HEADER: &str = "xi,s,v,r,z,psi,theta";

/// Target, grid and initial state built from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub target: TargetGeometry,
    pub state: FlowState,
    pub layout: Layout,
    pub budget: BudgetReport,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let target = cfg.target.build()?;
    crate::target::certify_bump(cfg.target.c_n, cfg.initial.z0, cfg.monitor.e0)?;
    let grid = cfg.grid.build()?;
    let (map, layout, budget) = initial::build_initial(&cfg.initial, &target, &grid, cfg.flow.d)?;
    let state = FlowState { map, ell: layout.ell0, t: 0.0, grid };
    Ok(Prepared { target, state, layout, budget })
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

pub fn series_row(rec: &Record, cfg: &RunConfig) -> String {
    let t1 = diagnostics::leash_monitor(rec, &cfg.monitor);
    let t2 = diagnostics::regime_monitor(rec, &cfg.monitor);
    let ii = match t1.hyp_ii {
        Some(b) => b.to_string(),
        None => "gated".into(),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        rec.t,
        rec.ell,
        rec.energy,
        rec.psi_mean,
        rec.psi_std,
        rec.b0,
        rec.leash,
        rec.v_max,
        rec.tension_norm,
        opt(rec.de_dt_fd),
        opt(rec.de_dt_model),
        t1.hyp_i,
        ii,
        t2.regime.as_str()
    )
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LeashSummary {
    pub hyp_i_records: usize,
    pub hyp_ii_true: usize,
    pub hyp_ii_false: usize,
    pub gated: usize,
    pub min_margin: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RegimeSummary {
    pub bounded: usize,
    pub stretching: usize,
    pub indeterminate: usize,
    pub final_regime: Option<Regime>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PsiSummary {
    pub upper_max: Option<f64>,
    pub lower_min: Option<f64>,
    pub upper_violations: usize,
    pub lower_violations: usize,
    /// Largest `psi_std / |psi_mean|` over records.
    pub max_relative_spread: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ChainSummary {
    pub records_checked: usize,
    pub violations: usize,
    pub min_vmax_scaled: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BalanceSummary {
    pub max_residual: Option<f64>,
    pub max_metric_term: Option<f64>,
    pub max_energy_increase: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MonitorSummary {
    pub leash: LeashSummary,
    pub regime: RegimeSummary,
    pub psi: PsiSummary,
    pub chain: ChainSummary,
    pub balance: BalanceSummary,
}

fn fmax(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.max(b)))
}

fn fmin(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.min(b)))
}

/// Streaming aggregation of monitor outcomes.
#[derive(Debug, Clone)]
pub struct MonitorAccumulator {
    cfg: RunConfig,
    tracker: PsiRatioTracker,
    out: MonitorSummary,
    last_energy: Option<f64>,
}

impl MonitorAccumulator {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { cfg: cfg.clone(), tracker: PsiRatioTracker::new(10.0), out: MonitorSummary::default(), last_energy: None }
    }

    pub fn push(&mut self, rec: &Record, target: &TargetGeometry) {
        let m = &self.cfg.monitor;
        let o = &mut self.out;
        let t1 = diagnostics::leash_monitor(rec, m);
        o.leash.hyp_i_records += t1.hyp_i as usize;
        match t1.hyp_ii {
            Some(true) => o.leash.hyp_ii_true += 1,
            Some(false) => o.leash.hyp_ii_false += 1,
            None => o.leash.gated += 1,
        }
        if let Some(mg) = t1.margin {
            o.leash.min_margin = fmin(o.leash.min_margin, mg);
        }
        let t2 = diagnostics::regime_monitor(rec, m);
        match t2.regime {
            Regime::Bounded => o.regime.bounded += 1,
            Regime::Stretching => o.regime.stretching += 1,
            Regime::Indeterminate => o.regime.indeterminate += 1,
        }
        o.regime.final_regime = Some(t2.regime);
        let l = self.tracker.check(rec, m);
        o.psi.upper_violations += (l.upper_ok == Some(false)) as usize;
        o.psi.lower_violations += (l.lower_ok == Some(false)) as usize;
        if self.tracker.upper_max > 0.0 {
            o.psi.upper_max = Some(self.tracker.upper_max);
        }
        if self.tracker.lower_min.is_finite() {
            o.psi.lower_min = Some(self.tracker.lower_min);
        }
        if rec.psi_mean != 0.0 {
            o.psi.max_relative_spread = o.psi.max_relative_spread.max(rec.psi_std / rec.psi_mean.abs());
        }
        if let Some(c) = diagnostics::central_chain(rec, target) {
            o.chain.records_checked += 1;
            o.chain.violations += c.violations();
            o.chain.min_vmax_scaled = fmin(o.chain.min_vmax_scaled, c.vmax_scaled);
        }
        if let Some(r) = rec.balance_residual() {
            o.balance.max_residual = fmax(o.balance.max_residual, r);
        }
        if let Some(mt) = rec.metric_term {
            o.balance.max_metric_term = fmax(o.balance.max_metric_term, mt);
        }
        if let Some(e) = self.last_energy {
            o.balance.max_energy_increase = o.balance.max_energy_increase.max(rec.energy - e);
        }
        self.last_energy = Some(rec.energy);
    }

    pub fn finish(self) -> MonitorSummary {
        self.out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub cause: String,
    pub mode: Mode,
    pub records: usize,
    pub rejected_steps: usize,
    pub t_end: f64,
    pub ell_start: f64,
    pub ell_end: f64,
    pub energy_start: f64,
    pub energy_end: f64,
    pub fit: RateFit,
    pub monitors: MonitorSummary,
    pub budget: BudgetReport,
    pub layout: Layout,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub schema_version: u32,
    pub error: String,
    pub kind: String,
    pub issues: Vec<ConfigIssue>,
}

impl ErrorReport {
    pub fn from_error(e: &Error) -> Self {
        let kind = format!("{e:?}");
        let kind = kind.split(['(', ' ', '{']).next().unwrap_or("Error").to_string();
        Self { schema_version: SCHEMA_VERSION, error: e.to_string(), kind, issues: Vec::new() }
    }

    pub fn from_issues(issues: Vec<ConfigIssue>) -> Self {
        let msg = issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ");
        Self { schema_version: SCHEMA_VERSION, error: msg, kind: "Config".into(), issues }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("error.json"), self)
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_snapshot(dir: &Path, idx: usize, state: &FlowState, cfg: &RunConfig, target: &TargetGeometry) -> Result<()> {
    let metric = state.metric(cfg.flow.d)?;
    let pos = state.grid.positions(metric.x);
    let (psi, _) = map::hopf(&state.map, &pos, &metric, target);
    let theta = map::angular_energy(&state.map, target);
    let mut w = BufWriter::new(File::create(dir.join(format!("snap_{idx:06}.csv")))?);
    writeln!(w, "# t = {}, ell = {}", state.t, state.ell)?;
    writeln!(w, "{SNAPSHOT_HEADER}")?;
    for row in map::snapshot_rows(&state.map, &pos, &psi, &theta) {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Run `cfg`, writing artifacts into `out`; on failure `error.json` is written and the error returned.
pub fn execute(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    fs::create_dir_all(out)?;
    for stale in ["error.json", "summary.json"] {
        let _ = fs::remove_file(out.join(stale));
    }
    match execute_inner(cfg, out) {
        Ok(s) => Ok(s),
        Err(e) => {
            ErrorReport::from_error(&e).write(out)?;
            Err(e)
        }
    }
}

fn execute_inner(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let prep = prepare(cfg)?;
    let snap_dir = out.join("snapshots");
    if snap_dir.exists() {
        fs::remove_dir_all(&snap_dir)?;
    }
    fs::create_dir_all(&snap_dir)?;
    write_snapshot(&snap_dir, 0, &prep.state, cfg, &prep.target)?;

    let mut series = BufWriter::new(File::create(out.join("series.csv"))?);
    writeln!(series, "{SERIES_HEADER}")?;
    let mut acc = MonitorAccumulator::new(cfg);
    let mut samples = Vec::new();
    let mut io_err: Option<std::io::Error> = None;
    let mut count = 0usize;
    let every = cfg.output.snapshot_every;
    let target = &prep.target;
    let run = flow::run(prep.state.clone(), &cfg.flow, target, |rec, state| {
        if io_err.is_some() {
            return;
        }
        if let Err(e) = writeln!(series, "{}", series_row(rec, cfg)) {
            io_err = Some(e);
        }
        acc.push(rec, target);
        samples.push((rec.t, rec.ell, rec.log_rate));
        if every > 0 && count > 0 && count % every == 0 {
            if let Err(e) = write_snapshot(&snap_dir, count, state, cfg, target) {
                io_err = Some(std::io::Error::other(e.to_string()));
            }
        }
        count += 1;
    });
    series.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let run = run?;
    let last = count.saturating_sub(1);
    if every == 0 || last % every != 0 {
        write_snapshot(&snap_dir, last, &run.final_state, cfg, target)?;
    }
    let first = &run.records[0];
    let end = run.records.last().unwrap_or(first);
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        cause: run.cause.as_str().to_string(),
        mode: cfg.flow.mode,
        records: run.records.len(),
        rejected_steps: run.rejected,
        t_end: end.t,
        ell_start: first.ell,
        ell_end: end.ell,
        energy_start: first.energy,
        energy_end: end.energy,
        fit: flow::fit_rates(&samples, cfg.flow.mode),
        monitors: acc.finish(),
        budget: prep.budget,
        layout: prep.layout,
        config: cfg.to_json(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Override blocks of a sweep file, separated by lines holding `---`.
pub fn sweep_blocks(text: &str) -> Vec<String> {
    let mut blocks = vec![String::new()];
    for line in text.lines() {
        if line.trim() == "---" {
            blocks.push(String::new());
        } else {
            let b = blocks.last_mut().unwrap();
            b.push_str(line);
            b.push('\n');
        }
    }
    blocks.retain(|b| b.lines().any(|l| !l.split('#').next().unwrap().trim().is_empty()));
    blocks
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepEntry {
    pub dir: String,
    pub overrides: String,
    pub ok: bool,
    pub cause: Option<String>,
    pub blowup_time_estimate: Option<f64>,
    pub error: Option<String>,
}

/// Apply each override block to `base` and run them on the worker pool, one `run_NNN` directory each.
///
/// Override errors are reported for all blocks before anything runs.
pub fn run_sweep(base: &RunConfig, sweep_text: &str, out: &Path) -> std::result::Result<Vec<SweepEntry>, Vec<ConfigIssue>> {
    let blocks = sweep_blocks(sweep_text);
    let mut cfgs = Vec::new();
    let mut issues = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        match base.apply(b) {
            Ok(c) => cfgs.push(c),
            Err(errs) => issues.extend(errs.into_iter().map(|mut e| {
                e.key = format!("run_{i:03}: {}", e.key);
                e
            })),
        }
    }
    if !issues.is_empty() {
        return Err(issues);
    }
    let entries: Vec<SweepEntry> = cfgs
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let dir: PathBuf = out.join(format!("run_{i:03}"));
            let res = execute(c, &dir);
            SweepEntry {
                dir: dir.display().to_string(),
                overrides: blocks[i].trim().to_string(),
                ok: res.is_ok(),
                cause: res.as_ref().ok().map(|s| s.cause.clone()),
                blowup_time_estimate: res.as_ref().ok().and_then(|s| s.fit.blowup_time_estimate),
                error: res.err().map(|e| e.to_string()),
            }
        })
        .collect();
    if fs::create_dir_all(out).is_ok() {
        let _ = write_json(&out.join("sweep.json"), &entries);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn short() -> RunConfig {
        parse_config("grid.n = 128\nflow.t_max = 2e-6\nflow.max_steps = 30\noutput.snapshot_every = 10\n").unwrap()
    }

    #[test]
    fn blocks_split_on_separator() {
        let b = sweep_blocks("target.delta = 0.25\n---\n# c\ntarget.delta = 0.5\n---\n\n---\ntarget.delta = 0.75\n");
        assert_eq!(b.len(), 3);
        assert!(b[1].contains("0.5"));
    }

    #[test]
    fn execute_writes_artifacts_deterministically() {
        let dir = std::env::temp_dir().join(format!("cf-runner-{}", std::process::id()));
        let cfg = short();
        let s1 = execute(&cfg, &dir.join("a")).unwrap();
        execute(&cfg, &dir.join("b")).unwrap();
        let a = fs::read_to_string(dir.join("a/series.csv")).unwrap();
        let b = fs::read_to_string(dir.join("b/series.csv")).unwrap();
        assert_eq!(a, b);
        let mut lines = a.lines();
        assert_eq!(lines.next(), Some(SERIES_HEADER));
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), s1.records);
        let ts: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
        assert!(rows.iter().all(|r| r.len() == 14 && !r.contains(&"NaN")));
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("a/summary.json")).unwrap()).unwrap();
        assert_eq!(summary["schema_version"], SCHEMA_VERSION);
        assert_eq!(summary["config"], cfg.to_json());
        assert!(dir.join("a/snapshots/snap_000000.csv").exists());
        assert!(dir.join("a/snapshots/snap_000010.csv").exists());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn failure_writes_error_json() {
        let dir = std::env::temp_dir().join(format!("cf-runner-err-{}", std::process::id()));
        let mut cfg = short();
        cfg.target.c_n = 1.0;
        assert!(execute(&cfg, &dir).is_err());
        let e: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("error.json")).unwrap()).unwrap();
        assert_eq!(e["schema_version"], SCHEMA_VERSION);
        assert!(e["error"].as_str().unwrap().len() > 0);
        let _ = fs::remove_dir_all(&dir);
    }
}
