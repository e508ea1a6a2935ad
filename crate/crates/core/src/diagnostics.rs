//! Hypothesis monitors and bound checks evaluated on run records.

use serde::{Deserialize, Serialize};

use crate::collar::CollarMetric;
use crate::error::{Error, Result};
use crate::flow::Record;
use crate::map::{Interval, RegionSets};
use crate::target::{TargetGeometry, WarpingKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub eps0: f64,
    pub eps1: f64,
    pub c0: f64,
    /// Upper threshold for the bounded regime.
    pub c1: f64,
    pub delta: f64,
    pub ell_bar: f64,
    pub e0: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            eps0: 0.05,
            eps1: 10.0,
            c0: 1.0,
            c1: 10.0,
            delta: 0.5,
            ell_bar: 0.5,
            e0: 10.0 * std::f64::consts::PI,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("eps0", self.eps0),
            ("eps1", self.eps1),
            ("c0", self.c0),
            ("c1", self.c1),
            ("ell_bar", self.ell_bar),
            ("e0", self.e0),
        ];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("monitor.{k} must be positive, got {v}")));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("monitor.delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeashHypotheses {
    pub hyp_i: bool,
    /// `None` when the tension gate is closed.
    pub hyp_ii: Option<bool>,
    pub margin: Option<f64>,
}

pub fn leash_monitor(rec: &Record, cfg: &MonitorConfig) -> LeashHypotheses {
    let hyp_i = rec.ell <= cfg.ell_bar;
    if rec.tension_norm > cfg.eps1 {
        return LeashHypotheses { hyp_i, hyp_ii: None, margin: None };
    }
    let margin = rec.leash * rec.ell.powf(0.25 * (1.0 + cfg.delta));
    LeashHypotheses { hyp_i, hyp_ii: Some(margin >= cfg.c0), margin: Some(margin) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Bounded,
    Stretching,
    Indeterminate,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Bounded => "bounded",
            Regime::Stretching => "stretching",
            Regime::Indeterminate => "indeterminate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeCheck {
    pub regime: Regime,
    pub ratio_bounded: Option<f64>,
    pub ratio_stretching: Option<f64>,
}

/// Leash length against the two log-rates; `log(1/ell) <= 1` is indeterminate.
pub fn regime_monitor(rec: &Record, cfg: &MonitorConfig) -> RegimeCheck {
    let lg = (1.0 / rec.ell).ln();
    if lg <= 1.0 {
        return RegimeCheck { regime: Regime::Indeterminate, ratio_bounded: None, ratio_stretching: None };
    }
    let rb = rec.leash / lg.sqrt();
    let rs = rec.leash / lg.powf(0.5 * (1.0 + cfg.delta));
    let regime = if rb <= cfg.c1 {
        Regime::Bounded
    } else if rs >= cfg.c0 {
        Regime::Stretching
    } else {
        Regime::Indeterminate
    };
    RegimeCheck { regime, ratio_bounded: Some(rb), ratio_stretching: Some(rs) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsiRatioCheck {
    pub upper_ratio: f64,
    pub lower_ratio: f64,
    pub upper_ok: Option<bool>,
    pub lower_ok: Option<bool>,
}

/// Running reference for the two psi ratios.
///
/// A branch is checked only when the matching regime holds. The first
/// checked value becomes the reference, and later values must stay within
/// a factor `slack` of it (above for the lower branch, below for the upper).
#[derive(Debug, Clone)]
pub struct PsiRatioTracker {
    pub slack: f64,
    upper_ref: Option<f64>,
    lower_ref: Option<f64>,
    pub upper_max: f64,
    pub lower_min: f64,
}

impl PsiRatioTracker {
    pub fn new(slack: f64) -> Self {
        Self { slack, upper_ref: None, lower_ref: None, upper_max: 0.0, lower_min: f64::INFINITY }
    }

    pub fn check(&mut self, rec: &Record, cfg: &MonitorConfig) -> PsiRatioCheck {
        let (up, lo) = psi_ratios(rec.psi_var.unwrap_or(rec.psi_mean), rec.ell, cfg.delta);
        let regime = regime_monitor(rec, cfg).regime;
        let mut out = PsiRatioCheck { upper_ratio: up, lower_ratio: lo, upper_ok: None, lower_ok: None };
        if regime == Regime::Bounded && up.is_finite() {
            let r = *self.upper_ref.get_or_insert(up.max(f64::MIN_POSITIVE));
            self.upper_max = self.upper_max.max(up);
            out.upper_ok = Some(up <= self.slack * r);
        }
        if regime == Regime::Stretching && lo.is_finite() {
            let r = *self.lower_ref.get_or_insert(lo);
            self.lower_min = self.lower_min.min(lo);
            out.lower_ok = Some(lo > 0.0 && lo >= r / self.slack);
        }
        out
    }
}

/// `psi/(ell^2 (log(1/ell) + 1))` and `psi/(ell^2 log(1/ell)^(1+delta))`.
pub fn psi_ratios(psi: f64, ell: f64, delta: f64) -> (f64, f64) {
    let lg = (1.0 / ell).ln();
    let e2 = ell * ell;
    let up = psi / (e2 * (lg + 1.0));
    let lo = if lg > 0.0 { psi / (e2 * lg.powf(1.0 + delta)) } else { f64::NAN };
    (up, lo)
}

/// Least-squares slope of `log ratio` against `log log(1/ell)`.
pub fn log_trend(samples: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(ell, r)| *ell < 1.0 / std::f64::consts::E && *r > 0.0 && r.is_finite())
        .map(|(ell, r)| ((1.0 / ell).ln().ln(), r.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainReport {
    pub ell_ok: bool,
    pub central_energy_ok: Option<bool>,
    pub min_v_ok: Option<bool>,
    pub area_ok: bool,
    pub disjoint: bool,
    /// `v_max` divided by the expected growth profile.
    pub vmax_scaled: f64,
}

impl ChainReport {
    /// Number of failed checks among those that apply.
    pub fn violations(&self) -> usize {
        let opt = |o: Option<bool>| o == Some(false);
        [!self.ell_ok, opt(self.central_energy_ok), opt(self.min_v_ok), !self.area_ok, !self.disjoint]
            .iter()
            .filter(|b| **b)
            .count()
    }
}

/// Growth profile of `v_max`: `ell^(-(1+delta)/4)` (poly), `log(1/ell)` (exp), 1 otherwise.
pub fn vmax_profile(kind: &WarpingKind, ell: f64) -> f64 {
    match kind {
        WarpingKind::Poly { delta, .. } => ell.powf(-0.25 * (1.0 + delta)),
        WarpingKind::Exp { .. } | WarpingKind::Compact { .. } => (1.0 / ell).ln().max(f64::MIN_POSITIVE),
        WarpingKind::Flat => 1.0,
    }
}

/// Central-energy, plateau, area and growth checks; `None` when `X < 8`.
pub fn central_chain(rec: &Record, target: &TargetGeometry) -> Option<ChainReport> {
    if rec.x < 8.0 {
        return None;
    }
    let vbar = target.warping.vbar;
    let two_pi = 2.0 * std::f64::consts::PI;
    let ell_ok = vbar <= 0.0 || rec.ell <= 5.0 * std::f64::consts::PI.powi(2) / (vbar * vbar);
    Some(ChainReport {
        ell_ok,
        central_energy_ok: rec.central_w_energy.map(|e| e >= two_pi),
        min_v_ok: rec.min_v_center.map(|v| v >= vbar + 1.0),
        area_ok: rec.area_w >= two_pi * (1.0 - 1e-9),
        disjoint: rec.disjoint,
        vmax_scaled: rec.v_max / vmax_profile(&target.warping.kind, rec.ell),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplementReport {
    pub components: usize,
    pub max_components: usize,
    /// Largest `len(I) / (sup_I log(1/rho) + 1)` over components of the complement.
    pub length_ratio: f64,
    pub length_bound: f64,
    /// Largest `sup_I rho / inf_I rho`.
    pub rho_ratio: f64,
    pub rho_bound_ok: bool,
}

impl ComplementReport {
    pub fn ok(&self) -> bool {
        self.components <= self.max_components && self.length_ratio <= self.length_bound && self.rho_bound_ok
    }
}

/// Component structure of the complement of the far set.
pub fn complement_check(sets: &RegionSets, metric: &CollarMetric, e0: f64, eps0: f64) -> ComplementReport {
    let n_a = (e0 / eps0).floor() + 2.0;
    let length_bound = n_a * (2.0 * e0 / eps0 + 14.0);
    let rho_max = metric.max_rho();
    let mut length_ratio: f64 = 0.0;
    let mut rho_ratio: f64 = 1.0;
    let mut rho_bound_ok = true;
    for iv in &sets.b_complement {
        let (lo, hi) = rho_range(metric, iv);
        length_ratio = length_ratio.max(iv.len() / ((1.0 / lo).ln().max(0.0) + 1.0));
        let ratio = hi / lo;
        rho_ratio = rho_ratio.max(ratio);
        rho_bound_ok &= ratio <= (rho_max * iv.len()).exp() * (1.0 + 1e-12);
    }
    ComplementReport {
        components: sets.b_complement.len(),
        max_components: n_a as usize,
        length_ratio,
        length_bound,
        rho_ratio,
        rho_bound_ok,
    }
}

/// `rho` is even and increasing in `|s|`.
fn rho_range(metric: &CollarMetric, iv: &Interval) -> (f64, f64) {
    let inner = if iv.lo <= 0.0 && iv.hi >= 0.0 { 0.0 } else { iv.lo.abs().min(iv.hi.abs()) };
    let outer = iv.lo.abs().max(iv.hi.abs()).min(metric.x);
    (metric.rho_raw(inner), metric.rho_raw(outer))
}

/// Exponential decay rate of the angular energy away from the high-energy set.
///
/// Fits `log theta` against the distance over nodes with distance in
/// `[d_lo, d_hi]`.
pub fn angular_decay_rate(theta: &[f64], dist: &[f64], d_lo: f64, d_hi: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = theta
        .iter()
        .zip(dist)
        .filter(|(t, d)| **t > 1e-280 && **d >= d_lo && **d <= d_hi)
        .map(|(t, d)| (*d, t.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| -sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ell: f64, leash: f64, tn: f64, psi: f64) -> Record {
        Record {
            t: 0.0,
            ell,
            x: 100.0,
            energy: 1.0,
            psi_mean: psi,
            psi_std: 0.0,
            b0: 0.0,
            leash,
            v_max: 0.5 * leash,
            tension_norm: tn,
            area_w: 7.0,
            disjoint: true,
            log_rate: 0.0,
            de_dt_fd: None,
            de_dt_model: None,
            metric_term: None,
            central_w_energy: Some(7.0),
            min_v_center: Some(10.0),
            psi_var: None,
        }
    }

    #[test]
    fn leash_gate_closed() {
        let cfg = MonitorConfig::default();
        let r = rec(cfg.ell_bar / 2.0, 5.0, 2.0 * cfg.eps1, 0.0);
        assert_eq!(leash_monitor(&r, &cfg), LeashHypotheses { hyp_i: true, hyp_ii: None, margin: None });
    }

    #[test]
    fn leash_margin_recovers_constant() {
        let cfg = MonitorConfig::default();
        let ell: f64 = 1e-3;
        let l = 2.0 * cfg.c0 * ell.powf(-0.25 * (1.0 + cfg.delta));
        let m = leash_monitor(&rec(ell, l, 0.0, 0.0), &cfg);
        assert_eq!(m.hyp_ii, Some(true));
        assert!((m.margin.unwrap() - 2.0 * cfg.c0).abs() < 1e-12);
    }

    #[test]
    fn regime_monitor_classifies() {
        let cfg = MonitorConfig::default();
        assert_eq!(regime_monitor(&rec(1e-3, 0.0, 0.0, 0.0), &cfg).regime, Regime::Bounded);
        assert_eq!(regime_monitor(&rec(1e-3, 500.0, 0.0, 0.0), &cfg).regime, Regime::Stretching);
        assert_eq!(regime_monitor(&rec(0.5, 500.0, 0.0, 0.0), &cfg).regime, Regime::Indeterminate);
    }

    #[test]
    fn psi_ratio_zero_psi_upper_ok() {
        let cfg = MonitorConfig::default();
        let mut tr = PsiRatioTracker::new(10.0);
        let out = tr.check(&rec(1e-3, 0.0, 0.0, 0.0), &cfg);
        assert_eq!(out.upper_ok, Some(true));
        assert_eq!(out.lower_ok, None);
    }

    #[test]
    fn psi_ratio_tracks_reference() {
        let cfg = MonitorConfig::default();
        let mut tr = PsiRatioTracker::new(10.0);
        let ell = 1e-3;
        let lg = (1.0f64 / ell).ln();
        let base = ell * ell * lg.powf(1.0 + cfg.delta);
        assert_eq!(tr.check(&rec(ell, 500.0, 0.0, 2.0 * base), &cfg).lower_ok, Some(true));
        assert_eq!(tr.check(&rec(ell, 500.0, 0.0, 0.1 * base), &cfg).lower_ok, Some(false));
        assert!((tr.lower_min - 0.1).abs() < 1e-12);
    }

    #[test]
    fn log_trend_recovers_power() {
        let s: Vec<(f64, f64)> = (0..30)
            .map(|k| {
                let ell = 10f64.powf(-2.0 - 0.1 * k as f64);
                (ell, 3.0 * (1.0 / ell).ln().powf(0.7))
            })
            .collect();
        assert!((log_trend(&s).unwrap() - 0.7).abs() < 1e-10);
    }

    #[test]
    fn angular_rate_from_exponential() {
        let dist: Vec<f64> = (0..100).map(|k| 0.1 * k as f64).collect();
        let theta: Vec<f64> = dist.iter().map(|d| 4.0 * (-1.3 * d).exp()).collect();
        assert!((angular_decay_rate(&theta, &dist, 1.0, 8.0).unwrap() - 1.3).abs() < 1e-10);
    }

    #[test]
    fn chain_na_on_short_collar() {
        let mut r = rec(0.5, 1.0, 0.0, 0.0);
        r.x = 5.0;
        let t = TargetGeometry::new(1e6, crate::target::WarpingSpec::new(WarpingKind::Flat, 0.0).unwrap()).unwrap();
        assert!(central_chain(&r, &t).is_none());
    }

    #[test]
    fn complement_check_on_two_bumps() {
        let metric = CollarMetric::cylinder(0.01, 1.0).unwrap();
        let x = metric.x;
        let iv = |lo: f64, hi: f64| Interval { lo, hi };
        let sets = RegionSets {
            a: vec![iv(-x, -x + 1.0), iv(-2.0, 2.0), iv(x - 1.0, x)],
            b: vec![],
            b_tilde: vec![],
            b_complement: vec![iv(-x, -x + 40.0), iv(-25.0, 25.0), iv(x - 40.0, x)],
        };
        let rep = complement_check(&sets, &metric, 10.0 * std::f64::consts::PI, 0.05);
        assert_eq!(rep.components, 3);
        assert!(rep.ok(), "{rep:?}");
    }
}
