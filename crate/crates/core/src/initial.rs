//! Initial map: conformal unit sphere in the middle, a leash up the `z`-axis,
//! a flat conformal annulus at each end, and a plateau-and-ramp `v` profile.
//!
//! Half-collar layout (`s >= 0`):
//!
//! ```text
//! [0, L1-1]          sphere   r = sech s, z = tanh s
//! [L1-1, L1]         band 1   polar angle blended to 0 on |w| = 1
//! [L1, X-L2]         leash    r = 0, z from 1 to z0
//! [X-L2, X-L2+1]     band 2   r = eps (2t^2 - t^3), z = z0
//! [X-L2+1, X]        annulus  r = e^{s-X}/4, z = z0
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::collar::CollarMetric;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::map::{self, SymmetricMap, R0};
use crate::quad;
use crate::target::{TargetGeometry, WarpingKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDataSpec {
    pub eps: f64,
    pub z0: f64,
    /// Energy allowance for each of the leash and the `v` ramp when choosing `ell0`.
    pub budget_eps: f64,
    /// Fixed initial length; chosen by bisection when absent.
    pub ell0: Option<f64>,
    /// Upper bound on `ell0` (the smallness threshold of the monitors).
    pub ell_bar: f64,
}

impl Default for InitialDataSpec {
    fn default() -> Self {
        Self { eps: 1e-3, z0: 1.2, budget_eps: 2.5, ell0: None, ell_bar: 0.5 }
    }
}

/// `Lambda_1(eps)`: `tanh(Lambda_1 - 1) = 1 - eps^2 / 2`.
pub fn lambda1(eps: f64) -> f64 {
    1.0 + (1.0 - 0.5 * eps * eps).atanh()
}

/// `Lambda_2(eps) = 1 + log(1 / (4 eps))`.
pub fn lambda2(eps: f64) -> f64 {
    1.0 + (0.25 / eps).ln()
}

/// Plateau level `v*` with `f(v*) = 2` (zero for the flat target).
pub fn plateau_level(target: &TargetGeometry) -> Result<f64> {
    match target.warping.kind {
        WarpingKind::Flat => Ok(0.0),
        _ => target.warping.solve_level(2.0),
    }
}

/// Resolved construction data.
#[derive(Debug, Clone, Serialize)]
pub struct Layout {
    pub eps: f64,
    pub z0: f64,
    pub ell0: f64,
    pub x: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub v_star: f64,
}

impl Layout {
    fn leash_len(&self) -> f64 {
        self.x - self.lambda1 - self.lambda2
    }

    /// `(v, r, z)` at `s >= 0`.
    pub fn profile(&self, s: f64) -> (f64, f64, f64) {
        let (l1, l2, x) = (self.lambda1, self.lambda2, self.x);
        let v = if s < l1 { self.v_star } else { self.v_star * (x - s) / (x - l1) };
        let (r, z) = if s <= l1 - 1.0 {
            (1.0 / s.cosh(), s.tanh())
        } else if s <= l1 {
            let t = s - (l1 - 1.0);
            let phi1 = (1.0 / (l1 - 1.0).cosh()).atan2((l1 - 1.0).tanh());
            let slope = -1.0 / (l1 - 1.0).cosh();
            let h00 = 2.0 * t.powi(3) - 3.0 * t * t + 1.0;
            let h10 = t.powi(3) - 2.0 * t * t + t;
            let phi = h00 * phi1 + h10 * slope;
            (phi.sin(), phi.cos())
        } else if s <= x - l2 {
            (0.0, 1.0 + (self.z0 - 1.0) * (s - l1) / self.leash_len())
        } else if s <= x - l2 + 1.0 {
            let t = s - (x - l2);
            (self.eps * (2.0 * t * t - t.powi(3)), self.z0)
        } else {
            (R0 * (s - x).exp(), self.z0)
        };
        (v, r, z)
    }

    /// `s`-derivatives of the profile.
    pub fn profile_ds(&self, s: f64) -> (f64, f64, f64) {
        let (l1, l2, x) = (self.lambda1, self.lambda2, self.x);
        let dv = if s < l1 { 0.0 } else { -self.v_star / (x - l1) };
        let (dr, dz) = if s <= l1 - 1.0 {
            let sech = 1.0 / s.cosh();
            (-sech * s.tanh(), sech * sech)
        } else if s <= l1 {
            let t = s - (l1 - 1.0);
            let phi1 = (1.0 / (l1 - 1.0).cosh()).atan2((l1 - 1.0).tanh());
            let slope = -1.0 / (l1 - 1.0).cosh();
            let phi = (2.0 * t.powi(3) - 3.0 * t * t + 1.0) * phi1 + (t.powi(3) - 2.0 * t * t + t) * slope;
            let dphi = (6.0 * t * t - 6.0 * t) * phi1 + (3.0 * t * t - 4.0 * t + 1.0) * slope;
            (phi.cos() * dphi, -phi.sin() * dphi)
        } else if s <= x - l2 {
            (0.0, (self.z0 - 1.0) / self.leash_len())
        } else if s <= x - l2 + 1.0 {
            let t = s - (x - l2);
            (self.eps * (4.0 * t - 3.0 * t * t), 0.0)
        } else {
            (R0 * (s - x).exp(), 0.0)
        };
        (dv, dr, dz)
    }

    /// Closed-form leash energy (both halves) with the warping bounded by 8.
    pub fn leash_energy_bound(&self) -> f64 {
        8.0 * 2.0 * PI * (self.z0 - 1.0).powi(2) / self.leash_len()
    }

    /// Closed-form energy of the two linear `v` ramps.
    pub fn ramp_energy(&self) -> f64 {
        2.0 * PI * self.v_star.powi(2) / (self.x - self.lambda1)
    }
}

fn validate(spec: &InitialDataSpec) -> Result<()> {
    if !(spec.eps > 0.0 && spec.eps < 0.125) {
        return Err(Error::Config(format!("initial.eps must lie in (0, 1/8), got {}", spec.eps)));
    }
    if !(spec.z0 > 1.0) || !spec.z0.is_finite() {
        return Err(Error::Config(format!("initial.z0 must exceed 1, got {}", spec.z0)));
    }
    if !(spec.budget_eps > 0.0) {
        return Err(Error::Config(format!("initial.budget_eps must be positive, got {}", spec.budget_eps)));
    }
    Ok(())
}

/// Choose `ell0` and resolve all piece lengths.
pub fn layout(spec: &InitialDataSpec, target: &TargetGeometry, d: f64) -> Result<Layout> {
    validate(spec)?;
    let (l1, l2) = (lambda1(spec.eps), lambda2(spec.eps));
    let v_star = plateau_level(target)?;
    let make = |ell: f64| -> Result<Layout> {
        let x = CollarMetric::cylinder(ell, d)?.x;
        Ok(Layout { eps: spec.eps, z0: spec.z0, ell0: ell, x, lambda1: l1, lambda2: l2, v_star })
    };
    let fits = |lay: &Layout| lay.leash_len() >= 1.0;
    let within = |lay: &Layout| {
        let b = spec.budget_eps * (1.0 - 1e-6);
        fits(lay) && lay.leash_energy_bound() <= b && lay.ramp_energy() <= b
    };
    let vbar = target.warping.vbar;
    let mut cap = spec.ell_bar;
    if vbar > 0.0 {
        cap = cap.min(5.0 * PI * PI / (vbar * vbar));
    }
    if let Some(ell) = spec.ell0 {
        if !(ell > 0.0) {
            return Err(Error::Config(format!("initial.ell0 must be positive, got {ell}")));
        }
        let lay = make(ell)?;
        if !fits(&lay) {
            return Err(Error::CollarTooShort(format!(
                "X(ell0) = {:.4} < Lambda1 + Lambda2 + 1 = {:.4}",
                lay.x,
                l1 + l2 + 1.0
            )));
        }
        return Ok(lay);
    }
    let hi_lay = make(cap)?;
    if within(&hi_lay) {
        return Ok(hi_lay);
    }
    // largest ell <= cap inside the budget; both constraints are monotone in ell
    let (mut lo, mut hi) = (cap, cap);
    while !within(&make(lo)?) {
        lo *= 0.5;
        if lo < 1e-12 {
            return Err(Error::Budget { piece: "v ramp / leash".into(), energy: make(lo)?.ramp_energy(), bound: spec.budget_eps });
        }
    }
    for _ in 0..80 {
        let mid = (lo * hi).sqrt();
        if within(&make(mid)?) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    make(lo)
}

#[derive(Debug, Clone, Serialize)]
pub struct PieceEnergy {
    pub piece: String,
    pub energy: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetReport {
    pub pieces: Vec<PieceEnergy>,
    /// Energy of the two `v` ramps in the cruder form `2 pi 4 v*^2 / (X - Lambda1)`.
    pub ramp_energy_coarse_form: f64,
    pub quadrature_total: f64,
    pub discrete_total: f64,
    pub bound_total: f64,
    pub min_radius: f64,
    pub sphere_energy_rel_err: f64,
}

impl BudgetReport {
    pub fn ok(&self) -> bool {
        self.pieces.iter().all(|p| p.ok) && self.discrete_total <= self.bound_total && self.min_radius >= 1.0 - 1e-12
    }
}

/// Per-piece energies of the profile by adaptive quadrature, with the discrete total of `map`.
pub fn certify_budget(lay: &Layout, map: &SymmetricMap, pos: &[f64], target: &TargetGeometry, budget_eps: f64) -> Result<BudgetReport> {
    let dens_w = |s: f64| {
        let (v, r, z) = lay.profile(s);
        let (_, dr, dz) = lay.profile_ds(s);
        let c = target.coeffs(v, r, z);
        c.f * c.p * (dr * dr + dz * dz + r * r)
    };
    let dens_v = |s: f64| lay.profile_ds(s).0.powi(2);
    // factor 2 pi: both halves of the collar times pi
    let piece = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| -> Result<f64> { Ok(2.0 * PI * quad::integrate(f, a, b, 1e-10)?) };
    let (l1, l2, x) = (lay.lambda1, lay.lambda2, lay.x);
    let f_star = target.warping.f(lay.v_star);
    let sphere = piece(0.0, l1 - 1.0, &dens_w)?;
    let band1 = piece(l1 - 1.0, l1, &dens_w)?;
    let leash = piece(l1, x - l2, &dens_w)?;
    let band2 = piece(x - l2, x - l2 + 1.0, &dens_w)?;
    let annulus = piece(x - l2 + 1.0, x, &dens_w)?;
    let ramp = piece(l1, x, &dens_v)?;
    let eps = lay.eps;
    let ann_bound = 16.0 * PI * (1.0 / 16.0 - eps * eps);
    let sphere_ref = f_star * 4.0 * PI;
    let mk = |name: &str, e: f64, b: f64| PieceEnergy { piece: name.into(), energy: e, bound: b, ok: e <= b * (1.0 + 1e-9) };
    let pieces = vec![
        mk("sphere", sphere, sphere_ref * 1.005),
        mk("band 1", band1, budget_eps),
        mk("leash", leash, budget_eps),
        mk("band 2", band2, budget_eps),
        mk("annulus", annulus, ann_bound),
        mk("v ramp", ramp, budget_eps),
    ];
    let quadrature_total = sphere + band1 + leash + band2 + annulus + ramp;
    let min_radius = (0..=map.half()).map(|j| (map.r[j].powi(2) + map.z[j].powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
    Ok(BudgetReport {
        pieces,
        ramp_energy_coarse_form: 2.0 * PI * 4.0 * lay.v_star.powi(2) / (x - l1),
        quadrature_total,
        discrete_total: map::energy(map, pos, target),
        bound_total: 10.0 * PI,
        min_radius,
        sphere_energy_rel_err: if sphere_ref > 0.0 { (sphere - sphere_ref).abs() / sphere_ref } else { 0.0 },
    })
}

/// Initial data built on `grid`, with its certificate.
pub fn build_initial(
    spec: &InitialDataSpec,
    target: &TargetGeometry,
    grid: &Grid,
    d: f64,
) -> Result<(SymmetricMap, Layout, BudgetReport)> {
    let lay = layout(spec, target, d)?;
    let pos = grid.positions(lay.x);
    let map = SymmetricMap::from_profile(&pos, lay.z0, |s| lay.profile(s));
    let report = certify_budget(&lay, &map, &pos, target, spec.budget_eps)?;
    for p in &report.pieces {
        if !p.ok {
            return Err(Error::Budget { piece: p.piece.clone(), energy: p.energy, bound: p.bound });
        }
    }
    if report.discrete_total > report.bound_total {
        return Err(Error::Budget { piece: "total".into(), energy: report.discrete_total, bound: report.bound_total });
    }
    if report.min_radius < 1.0 - 1e-12 {
        return Err(Error::Constraint(format!("initial w enters the unit ball (min |w| = {})", report.min_radius)));
    }
    Ok((map, lay, report))
}
