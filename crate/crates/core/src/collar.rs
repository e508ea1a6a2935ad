//! Hyperbolic collar geometry in the collar coordinate `s`.
//!
//! The metric is `rho(s)^2 (ds^2 + dtheta^2)` on `[-X, X] x S^1` with
//! `rho(s) = (ell / 2pi) / cos(ell s / 2pi)`.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Largest geodesic length for which the closed-collar width formula applies.
pub fn closed_threshold() -> f64 {
    2.0 * 1f64.asinh()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Variant {
    Closed,
    Cylinder { d: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollarMetric {
    pub ell: f64,
    pub variant: Variant,
    pub x: f64,
}

/// Half-width `X(ell)` of the collar.
pub fn collar_width(ell: f64, variant: Variant) -> Result<f64> {
    if !(ell > 0.0) || !ell.is_finite() {
        return Err(Error::Domain(format!("geodesic length must be positive, got {ell}")));
    }
    let angle = match variant {
        Variant::Closed => {
            if ell >= closed_threshold() {
                return Err(Error::Domain(format!(
                    "closed collar needs ell < 2 asinh(1), got {ell}"
                )));
            }
            (ell / 2.0).sinh().atan()
        }
        Variant::Cylinder { d } => {
            if !(d > 0.0) {
                return Err(Error::Domain(format!("cylinder constant d must be positive, got {d}")));
            }
            (ell / d).atan()
        }
    };
    Ok(2.0 * PI / ell * (PI / 2.0 - angle))
}

/// Half-width of the thin part `{inj < eps}` of a collar around a geodesic of length `ell`.
pub fn thin_part_width(ell: f64, eps: f64) -> Result<f64> {
    if !(ell > 0.0) {
        return Err(Error::Domain(format!("geodesic length must be positive, got {ell}")));
    }
    let ratio = (ell / 2.0).sinh() / eps.sinh();
    if !(eps > 0.0) || ratio > 1.0 + 1e-15 {
        return Err(Error::Domain(format!("thin part empty: sinh({eps}) < sinh({ell}/2)")));
    }
    Ok(2.0 * PI / ell * (PI / 2.0 - ratio.min(1.0).asin()))
}

impl CollarMetric {
    pub fn new(ell: f64, variant: Variant) -> Result<Self> {
        let x = collar_width(ell, variant)?;
        Ok(Self { ell, variant, x })
    }

    pub fn cylinder(ell: f64, d: f64) -> Result<Self> {
        Self::new(ell, Variant::Cylinder { d })
    }

    fn check(&self, s: f64) -> Result<()> {
        if s.abs() > self.x * (1.0 + 1e-14) {
            return Err(Error::Domain(format!("|s| = {} exceeds collar half-width {}", s.abs(), self.x)));
        }
        Ok(())
    }

    /// Conformal factor without the domain check.
    #[inline]
    pub fn rho_raw(&self, s: f64) -> f64 {
        let k = self.ell / (2.0 * PI);
        k / (k * s).cos()
    }

    /// `rho^{-2}`, computed without cancellation.
    #[inline]
    pub fn rho_inv2_raw(&self, s: f64) -> f64 {
        let k = self.ell / (2.0 * PI);
        let c = (k * s).cos();
        c * c / (k * k)
    }

    pub fn rho(&self, s: f64) -> Result<f64> {
        self.check(s)?;
        Ok(self.rho_raw(s))
    }

    /// `d/ds log rho`.
    pub fn dlog_rho(&self, s: f64) -> Result<f64> {
        self.check(s)?;
        let k = self.ell / (2.0 * PI);
        Ok(k * (k * s).tan())
    }

    pub fn injectivity_radius(&self, s: f64) -> Result<f64> {
        self.check(s)?;
        let k = self.ell / (2.0 * PI);
        Ok(((self.ell / 2.0).sinh() / (k * s).cos()).asinh())
    }

    pub fn max_rho(&self) -> f64 {
        self.rho_raw(self.x)
    }

    /// `2pi int_0^s rho^2`, by quadrature.
    pub fn area(&self, s: f64) -> Result<f64> {
        self.check(s)?;
        let a = quad::integrate(|t| self.rho_raw(t).powi(2), 0.0, s.abs(), 1e-10)?;
        Ok(2.0 * PI * a)
    }

    /// `int_{-X}^{X} rho^{-2} ds` in closed form.
    pub fn inv2_total(&self) -> f64 {
        let k = self.ell / (2.0 * PI);
        let u = k * self.x;
        (u + 0.5 * (2.0 * u).sin()) / (k * k * k)
    }
}

/// Checked bounds for one collar, with margins (positive means the bound holds).
#[derive(Debug, Clone, Serialize)]
pub struct CollarBoundReport {
    pub ell: f64,
    pub x: f64,
    pub sqrt_rho_integral: f64,
    pub sqrt_rho_bound: f64,
    pub area_margin_min: f64,
    pub log_derivative_margin_min: f64,
    pub comparability_violations: usize,
    pub exponential_violations: usize,
    pub samples: usize,
}

impl CollarBoundReport {
    pub fn violations(&self) -> usize {
        let mut v = self.comparability_violations + self.exponential_violations;
        if self.sqrt_rho_integral > self.sqrt_rho_bound {
            v += 1;
        }
        if self.area_margin_min < -1e-12 {
            v += 1;
        }
        if self.log_derivative_margin_min < -1e-12 {
            v += 1;
        }
        v
    }
}

/// Verify the collar estimates on `samples` points of `[0, X]`.
pub fn collar_bound_report(metric: &CollarMetric, samples: usize) -> Result<CollarBoundReport> {
    let samples = samples.max(2);
    let x = metric.x;
    let sqrt_rho_integral = quad::integrate(|t| metric.rho_raw(t).sqrt(), 0.0, x, 1e-10)?;
    let sqrt_rho_bound = 2.0 * 2f64.sqrt() * PI / metric.ell.sqrt();
    let c3 = metric.max_rho();
    let mut area_margin_min = f64::INFINITY;
    let mut log_derivative_margin_min = f64::INFINITY;
    let mut comparability_violations = 0;
    let mut exponential_violations = 0;
    for i in 0..samples {
        let s = x * i as f64 / (samples - 1) as f64;
        let rho = metric.rho(s)?;
        let area = metric.area(s)?;
        area_margin_min = area_margin_min.min((2.0 * PI * rho - area) / (2.0 * PI * rho));
        log_derivative_margin_min = log_derivative_margin_min.min((rho - metric.dlog_rho(s)?.abs()) / rho);
        let reach = 1.0 / (E * rho);
        for frac in [-1.0, -0.5, 0.5, 1.0] {
            let t = s + frac * reach;
            if t.abs() > x {
                continue;
            }
            let q = metric.rho_raw(t) / rho;
            if q < 1.0 / E * (1.0 - 1e-12) || q > E * (1.0 + 1e-12) {
                comparability_violations += 1;
            }
        }
        for j in 0..samples {
            let t = x * j as f64 / (samples - 1) as f64;
            if rho > (c3 * (s - t).abs()).exp() * metric.rho_raw(t) * (1.0 + 1e-12) {
                exponential_violations += 1;
            }
        }
    }
    Ok(CollarBoundReport {
        ell: metric.ell,
        x,
        sqrt_rho_integral,
        sqrt_rho_bound,
        area_margin_min,
        log_derivative_margin_min,
        comparability_violations,
        exponential_violations,
        samples,
    })
}

/// `(X - X_eps) * eps` for the closed collar; the thin-part sandwich asserts this stays in `[c, C]`.
pub fn thin_part_scaled_gap(ell: f64, eps: f64) -> Result<f64> {
    let x = collar_width(ell, Variant::Closed)?;
    Ok((x - thin_part_width(ell, eps)?) * eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn width_examples() {
        let x = collar_width(1.0, Variant::Cylinder { d: 1.0 }).unwrap();
        assert_relative_eq!(x, PI * PI / 2.0, max_relative = 1e-14);
        let x = collar_width(closed_threshold() * (1.0 - 1e-15), Variant::Closed).unwrap();
        assert_relative_eq!(x, 2.79948, max_relative = 1e-5);
        let ell = 1e-7;
        let x = collar_width(ell, Variant::Cylinder { d: 2.0 }).unwrap();
        assert_relative_eq!(ell * x, PI * PI, max_relative = 1e-6);
    }

    #[test]
    fn width_errors() {
        assert!(collar_width(0.0, Variant::Closed).is_err());
        assert!(collar_width(-1.0, Variant::Cylinder { d: 1.0 }).is_err());
        assert!(collar_width(2.0, Variant::Closed).is_err());
        assert!(collar_width(1.0, Variant::Cylinder { d: 0.0 }).is_err());
    }

    #[test]
    fn rho_at_center_and_edge() {
        let m = CollarMetric::new(0.3, Variant::Closed).unwrap();
        assert_relative_eq!(m.rho(0.0).unwrap(), 0.3 / (2.0 * PI), max_relative = 1e-15);
        let edge = 0.3 / (2.0 * PI) * (0.15f64).cosh() / (0.15f64).sinh();
        assert_relative_eq!(m.rho(m.x).unwrap(), edge, max_relative = 1e-12);
        assert!(m.rho(m.x * 1.001).is_err());
        let tiny = CollarMetric::new(1e-6, Variant::Closed).unwrap();
        assert_relative_eq!(tiny.rho(tiny.x).unwrap(), 1.0 / PI, max_relative = 1e-6);
    }

    #[test]
    fn injectivity_radius_basics() {
        let m = CollarMetric::new(0.4, Variant::Closed).unwrap();
        assert_relative_eq!(m.injectivity_radius(0.0).unwrap(), 0.2, max_relative = 1e-14);
        for i in 0..20 {
            let s = m.x * i as f64 / 19.0;
            assert!(m.injectivity_radius(s).unwrap() >= 0.2 - 1e-15);
        }
    }

    #[test]
    fn thin_part_degenerate_and_errors() {
        assert!(thin_part_width(0.4, 0.2).unwrap().abs() < 1e-7);
        assert!(thin_part_width(0.4, 0.1).is_err());
    }

    #[test]
    fn thin_part_matches_bisection_inverse() {
        // independent route: bisection on inj(s) = eps
        let (ell, eps) = (0.1, 0.2);
        let m = CollarMetric::new(ell, Variant::Closed).unwrap();
        let (mut lo, mut hi) = (0.0, m.x);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if m.injectivity_radius(mid).unwrap() < eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert_relative_eq!(thin_part_width(ell, eps).unwrap(), 0.5 * (lo + hi), max_relative = 1e-10);
    }

    #[test]
    fn area_matches_closed_form() {
        let m = CollarMetric::cylinder(0.5, 1.0).unwrap();
        for i in 0..10 {
            let s = m.x * i as f64 / 9.0;
            let exact = 0.5 * (0.5 * s / (2.0 * PI)).tan();
            assert_relative_eq!(m.area(s).unwrap(), exact, max_relative = 1e-10, epsilon = 1e-300);
        }
        assert_eq!(m.area(0.0).unwrap(), 0.0);
    }

    #[test]
    fn inv2_total_matches_quadrature() {
        let m = CollarMetric::cylinder(0.05, 1.0).unwrap();
        let q = 2.0 * quad::integrate(|s| m.rho_inv2_raw(s), 0.0, m.x, 1e-12).unwrap();
        assert_relative_eq!(m.inv2_total(), q, max_relative = 1e-10);
    }

    #[test]
    fn sqrt_rho_integral_matches_simpson() {
        let m = CollarMetric::cylinder(0.5, 1.0).unwrap();
        let r = collar_bound_report(&m, 10).unwrap();
        let n = 200_000;
        let h = m.x / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * m.rho_raw(i as f64 * h).sqrt();
        }
        assert_relative_eq!(r.sqrt_rho_integral, acc * h / 3.0, max_relative = 1e-9);
        assert_eq!(r.violations(), 0);
    }

    #[test]
    fn bound_report_near_threshold() {
        let m = CollarMetric::new(closed_threshold() * 0.999, Variant::Closed).unwrap();
        assert_eq!(collar_bound_report(&m, 12).unwrap().violations(), 0);
    }

    proptest! {
        #[test]
        fn rho_even_and_log_derivative_bounded(ell in 1e-4f64..1.7, frac in 0.0f64..1.0) {
            let m = CollarMetric::new(ell, Variant::Closed).unwrap();
            let s = frac * m.x;
            prop_assert!((m.rho(s).unwrap() - m.rho(-s).unwrap()).abs() <= 1e-15 * m.rho(s).unwrap());
            prop_assert!(m.dlog_rho(s).unwrap().abs() <= m.rho(s).unwrap());
        }

        #[test]
        fn log_derivative_matches_finite_difference(ell in 1e-3f64..1.5, frac in 0.05f64..0.95) {
            let m = CollarMetric::cylinder(ell, 1.0).unwrap();
            let s = frac * m.x;
            let h = 1e-6 * m.x;
            let fd = (m.rho_raw(s + h).ln() - m.rho_raw(s - h).ln()) / (2.0 * h);
            let an = m.dlog_rho(s).unwrap();
            prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(m.rho_raw(s)));
        }

        #[test]
        fn width_monotone(a in 1e-4f64..1.7, b in 1e-4f64..1.7) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(collar_width(lo, Variant::Closed).unwrap() > collar_width(hi, Variant::Closed).unwrap());
            let cyl = Variant::Cylinder { d: 1.0 };
            prop_assert!(collar_width(lo, cyl).unwrap() > collar_width(hi, cyl).unwrap());
        }

        #[test]
        fn exponential_comparison(ell in 1e-3f64..1.7, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let m = CollarMetric::new(ell, Variant::Closed).unwrap();
            let (s, t) = (a * m.x, b * m.x);
            prop_assert!(m.rho_raw(s) <= (m.max_rho() * (s - t).abs()).exp() * m.rho_raw(t) * (1.0 + 1e-12));
        }

        #[test]
        fn thin_part_round_trip(ell in 1e-3f64..0.5, extra in 0.01f64..0.5) {
            let eps = ell / 2.0 + extra;
            let m = CollarMetric::new(ell, Variant::Closed).unwrap();
            let xe = thin_part_width(ell, eps).unwrap();
            prop_assume!(xe <= m.x);
            prop_assert!((m.injectivity_radius(xe).unwrap() - eps).abs() <= 1e-10);
        }
    }
}
