//! Warped-product targets `R x_f N~` with the conformal bump metric on `N~ = R^3`.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Quintic smoothstep on `[0, 1]`, clamped outside.
#[inline]
pub(crate) fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    }
}

/// `int_0^t smoothstep`, clamped: equals `t - 1/2` for `t >= 1`.
#[inline]
fn smoothstep_integral(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        t - 0.5
    } else {
        let t4 = t * t * t * t;
        t4 * (2.5 + t * (-3.0 + t))
    }
}

// Gauss-Legendre nodes/weights on [0, 1].
const GL_X: [f64; 5] = [
    0.046910077030668004,
    0.23076534494715845,
    0.5,
    0.7692346550528415,
    0.953089922969332,
];
const GL_W: [f64; 5] = [
    0.11846344252809454,
    0.23931433524968324,
    0.28444444444444444,
    0.23931433524968324,
    0.11846344252809454,
];

#[inline]
fn gl<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let h = b - a;
    let mut acc = 0.0;
    for i in 0..5 {
        acc += GL_W[i] * f(a + h * GL_X[i]);
    }
    acc * h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpMetric {
    pub c_n: f64,
}

impl BumpMetric {
    pub fn new(c_n: f64) -> Result<Self> {
        if !(c_n > 0.0) || !c_n.is_finite() {
            return Err(Error::Domain(format!("C_N must be positive, got {c_n}")));
        }
        Ok(Self { c_n })
    }

    /// Bump part as a function of the squared radius.
    #[inline]
    pub fn bump_sq(&self, x2: f64) -> f64 {
        if x2 >= 1.0 {
            0.0
        } else {
            self.c_n * (1.0 - 1.0 / (1.0 - x2)).exp()
        }
    }

    /// `(P, dP/d(x^2))` with `P = rho_N~^2`.
    #[inline]
    pub fn factor_sq(&self, x2: f64) -> (f64, f64) {
        if x2 >= 1.0 {
            (1.0, 0.0)
        } else {
            let q = 1.0 / (1.0 - x2);
            let b = self.c_n * (1.0 - q).exp();
            (1.0 + b, -b * q * q)
        }
    }

    /// `rho_N~^2` at a point of radius `radius`.
    pub fn bump_factor(&self, radius: f64) -> f64 {
        1.0 + self.bump_sq(radius * radius)
    }
}

fn radial_sign(bump: &BumpMetric, r: f64) -> f64 {
    // d/dr (r^2 P(r^2)) = 2 r g(r)
    let x2 = r * r;
    let b = bump.bump_sq(x2);
    if b == 0.0 {
        return 1.0;
    }
    let om = 1.0 - x2;
    1.0 + b * (1.0 - x2 / (om * om))
}

/// Interior local maximum and minimum of `r^2 rho_N~^2(r)` on `(0, 1)`.
pub fn extremal_radii(c_n: f64) -> Result<(f64, f64)> {
    let bump = BumpMetric::new(c_n)?;
    let n = 200_000;
    let mut roots = Vec::new();
    let mut prev = radial_sign(&bump, 1e-9);
    let mut prev_r = 1e-9;
    for i in 1..n {
        let r = i as f64 / n as f64;
        let g = radial_sign(&bump, r);
        if (g > 0.0) != (prev > 0.0) {
            let (mut lo, mut hi) = (prev_r, r);
            let lo_pos = prev > 0.0;
            while hi - lo > 1e-13 {
                let mid = 0.5 * (lo + hi);
                if (radial_sign(&bump, mid) > 0.0) == lo_pos {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev = g;
        prev_r = r;
    }
    if roots.len() != 2 {
        return Err(Error::BumpThreshold { found: roots.len() });
    }
    Ok((roots[0], roots[1]))
}

/// Refuse bump constants too small for the area lower bound at energy `e0`.
pub fn certify_bump(c_n: f64, z0: f64, e0: f64) -> Result<f64> {
    let eps = (z0 - 1.0).min(0.1);
    let lhs = 4.0 * PI * eps * c_n * (1.0f64 - 1.0 / (1.0 - 9.0 / 16.0)).exp() * 0.25;
    if !(eps > 0.0) || lhs <= e0 {
        return Err(Error::Constraint(format!(
            "bump certification: 4 pi eps C_N exp(-9/7)/4 = {lhs:.4e} must exceed E0 = {e0:.4e}"
        )));
    }
    Ok(lhs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WarpingKind {
    Poly { delta: f64, c3: f64, lambda: f64 },
    Exp { alpha: f64, c3: f64, lambda: f64 },
    Compact { c4: f64 },
    /// `f = 1`: product target, outside the admissible warping class.
    Flat,
}

/// Slope profile `-f0'` on `(0, Lambda)` for the poly and exp families.
#[derive(Debug, Clone)]
struct Blend {
    lambda: f64,
    s_lam: f64,
    ds_lam: f64,
    len: f64,
    b: f64,
    v1: f64,
    cells: Vec<f64>,
    h: f64,
}

impl Blend {
    fn q(&self, v: f64) -> f64 {
        self.s_lam + self.ds_lam * self.len * (1.0 - (-(self.lambda - v) / self.len).exp())
    }

    fn slope(&self, v: f64) -> f64 {
        if v <= 0.0 || v >= self.lambda {
            return 0.0;
        }
        let beta = 1.0 - smoothstep((v - self.v1) / (self.lambda - self.v1));
        smoothstep(v) * (self.q(v) + self.b * beta)
    }

    fn drop(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, self.lambda);
        let j = ((v / self.h) as usize).min(self.cells.len() - 1);
        let a = j as f64 * self.h;
        self.cells[j] + gl(|t| self.slope(t), a, v)
    }
}

#[derive(Debug, Clone)]
struct Coupling {
    c4: f64,
    amp: f64,
    lambda: f64,
    cells: Vec<f64>,
    h: f64,
}

impl Coupling {
    fn kappa(&self, v: f64) -> f64 {
        let q = 0.25 * self.c4;
        if v <= 0.0 || v >= self.lambda {
            0.0
        } else if v < 0.5 {
            self.amp * smoothstep(2.0 * v)
        } else if v <= 0.75 {
            self.amp
        } else if v < 1.0 {
            self.amp + (q - self.amp) * smoothstep(4.0 * (v - 0.75))
        } else if v <= self.lambda - 1.0 {
            q
        } else {
            q * (1.0 - smoothstep(v - (self.lambda - 1.0)))
        }
    }

    fn kappa_integral(amp: f64, c4: f64, lambda: f64, v: f64) -> f64 {
        let q = 0.25 * c4;
        let mut acc = 0.0;
        if v <= 0.0 {
            return 0.0;
        }
        acc += amp * 0.5 * smoothstep_integral(2.0 * v.min(0.5));
        if v > 0.5 {
            acc += amp * (v.min(0.75) - 0.5);
        }
        if v > 0.75 {
            let t = 4.0 * (v.min(1.0) - 0.75);
            acc += amp * t / 4.0 + (q - amp) * smoothstep_integral(t) / 4.0;
        }
        if v > 1.0 {
            acc += q * (v.min(lambda - 1.0) - 1.0);
        }
        if v > lambda - 1.0 {
            let t = v.min(lambda) - (lambda - 1.0);
            acc += q * (t - smoothstep_integral(t));
        }
        acc
    }

    fn k(&self, v: f64) -> f64 {
        7.0 - Self::kappa_integral(self.amp, self.c4, self.lambda, v)
    }

    /// `H(v) = int_0^v e^{2 pi (t - v)} kappa(t) dt`.
    fn big_h(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        if v >= self.lambda {
            return self.cells[self.cells.len() - 1] * (-2.0 * PI * (v - self.lambda)).exp();
        }
        let j = ((v / self.h) as usize).min(self.cells.len() - 2);
        let a = j as f64 * self.h;
        self.cells[j] * (-2.0 * PI * (v - a)).exp() + gl(|t| (2.0 * PI * (t - v)).exp() * self.kappa(t), a, v)
    }
}

#[derive(Debug, Clone)]
enum Profile {
    Blend(Blend),
    Coupling(Coupling),
    Flat,
}

/// Warping function `f = f0(. - vbar)`.
#[derive(Debug, Clone)]
pub struct WarpingSpec {
    pub kind: WarpingKind,
    pub vbar: f64,
    profile: Profile,
}

const SLOPE_CAP: f64 = 0.125;

fn tail_data(kind: WarpingKind) -> (f64, f64, f64, f64) {
    // (Lambda, tail excess at Lambda, -f0'(Lambda), d/dv(-f0')(Lambda))
    match kind {
        WarpingKind::Poly { delta, c3, lambda } => {
            let k = 2.0 / (1.0 + delta) - 1.0;
            let a = c3 * lambda.powf(-k);
            (lambda, a, k * a / lambda, -k * (k + 1.0) * a / (lambda * lambda))
        }
        WarpingKind::Exp { alpha, c3, lambda } => (lambda, c3, alpha * c3, -alpha * alpha * c3),
        _ => unreachable!(),
    }
}

fn build_blend(kind: WarpingKind) -> Result<Blend> {
    let (lambda, a, s_lam, ds_lam) = tail_data(kind);
    match kind {
        WarpingKind::Poly { delta, c3, .. } => {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::Constraint(format!("poly warping needs delta in (0,1), got {delta}")));
            }
            if !(c3 > 0.0) {
                return Err(Error::Constraint(format!("c3 must be positive, got {c3}")));
            }
        }
        WarpingKind::Exp { alpha, c3, .. } => {
            if !(alpha > 0.0) || !(c3 > 0.0) {
                return Err(Error::Constraint("exp warping needs alpha > 0 and c3 > 0".into()));
            }
        }
        _ => unreachable!(),
    }
    if !(lambda > 1.0) {
        return Err(Error::Constraint(format!("Lambda must exceed 1, got {lambda}")));
    }
    if a >= 6.0 {
        return Err(Error::Constraint(format!(
            "tail value at Lambda is 1 + {a:.4}, must stay below 7"
        )));
    }
    if s_lam > SLOPE_CAP {
        return Err(Error::Constraint(format!(
            "-f0' = {s_lam:.4} at Lambda exceeds 1/8"
        )));
    }
    let len = (0.5 * s_lam / ds_lam.abs()).min(1.0);
    let mut blend = Blend { lambda, s_lam, ds_lam: ds_lam.abs(), len, b: 0.0, v1: 1.0, cells: vec![], h: 0.0 };
    let q1 = blend.q(1.0);
    if q1 >= SLOPE_CAP {
        return Err(Error::Constraint(format!(
            "-f0' would exceed 1/8 on [1, Lambda] (base slope {q1:.4} at v = 1)"
        )));
    }
    let need = 7.0 - a;
    let iq = quad::integrate(|v| smoothstep(v) * blend.q(v), 0.0, lambda, 1e-12)?;
    let rem = need - iq;
    if rem < 0.0 {
        return Err(Error::Constraint(format!(
            "f0 non-increasing: tail slope alone drops {iq:.4} > {need:.4} on (0, Lambda)"
        )));
    }
    let b_max = 0.98 * (SLOPE_CAP - q1);
    let ib1 = 0.5 + 0.5 * (lambda - 1.0);
    if rem / ib1 <= b_max {
        blend.b = rem / ib1;
        blend.v1 = 1.0;
    } else {
        blend.b = b_max;
        // rem = b (1/2 + (v1 - 1) + (Lambda - v1)/2)
        let v1 = 2.0 * (rem / b_max - 0.5) + 2.0 - lambda;
        if v1 >= lambda - 1e-6 {
            return Err(Error::Constraint(format!(
                "-f0' <= 1/8: Lambda = {lambda} too short to drop from 8 to {:.4}",
                1.0 + a
            )));
        }
        blend.v1 = v1;
    }
    let m = 16_384usize;
    blend.h = lambda / m as f64;
    let mut cells = Vec::with_capacity(m + 1);
    let mut acc = 0.0;
    cells.push(0.0);
    for j in 0..m {
        let lo = j as f64 * blend.h;
        acc += gl(|t| blend.slope(t), lo, lo + 0.5 * blend.h) + gl(|t| blend.slope(t), lo + 0.5 * blend.h, lo + blend.h);
        cells.push(acc);
    }
    blend.cells = cells;
    Ok(blend)
}

fn build_coupling(c4: f64) -> Result<Coupling> {
    if !(c4 > 0.0) {
        return Err(Error::InfeasibleC4(format!("c4 must be positive, got {c4}")));
    }
    let amp = (PI / 2.0).exp() * c4;
    let q = 0.25 * c4;
    // total integral of kappa = amp/2 + (amp + q)/8 + q (Lambda - 2) + q/2 = 7
    let lambda = 2.0 + (7.0 - 0.5 * amp - (amp + q) / 8.0 - 0.5 * q) / q;
    if !(lambda >= 3.0) || !lambda.is_finite() {
        return Err(Error::InfeasibleC4(format!("Lambda(c4) = {lambda:.4} leaves no plateau")));
    }
    let total = Coupling::kappa_integral(amp, c4, lambda, lambda);
    if (total - 7.0).abs() > 1e-10 {
        return Err(Error::InfeasibleC4(format!("k does not reach 0 at Lambda (integral {total})")));
    }
    let m = ((lambda / 1e-2).ceil() as usize).max(64);
    let h = lambda / m as f64;
    let mut c = Coupling { c4, amp, lambda, cells: Vec::with_capacity(m + 1), h };
    let mut hv = 0.0;
    c.cells.push(0.0);
    for j in 0..m {
        let a = j as f64 * h;
        let b = a + h;
        let mid = a + 0.5 * h;
        let kap = |t: f64| (2.0 * PI * (t - b)).exp() * c.kappa(t);
        hv = hv * (-2.0 * PI * h).exp() + gl(kap, a, mid) + gl(kap, mid, b);
        c.cells.push(hv);
    }
    Ok(c)
}

impl WarpingSpec {
    pub fn new(kind: WarpingKind, vbar: f64) -> Result<Self> {
        if !(vbar >= 0.0) || !vbar.is_finite() {
            return Err(Error::Constraint(format!("shift vbar must be >= 0, got {vbar}")));
        }
        let profile = match kind {
            WarpingKind::Poly { .. } | WarpingKind::Exp { .. } => Profile::Blend(build_blend(kind)?),
            WarpingKind::Compact { c4 } => Profile::Coupling(build_coupling(c4)?),
            WarpingKind::Flat => Profile::Flat,
        };
        let spec = Self { kind, vbar, profile };
        if !matches!(kind, WarpingKind::Flat) {
            spec.verify()?;
        }
        Ok(spec)
    }

    /// Unshifted profile `f0`.
    pub fn f0(&self, v: f64) -> f64 {
        match &self.profile {
            Profile::Flat => 1.0,
            Profile::Blend(b) => {
                if v <= 0.0 {
                    8.0
                } else if v >= b.lambda {
                    match self.kind {
                        WarpingKind::Poly { delta, c3, .. } => 1.0 + c3 * v.powf(-(2.0 / (1.0 + delta) - 1.0)),
                        WarpingKind::Exp { alpha, c3, lambda } => 1.0 + c3 * (-alpha * (v - lambda)).exp(),
                        _ => unreachable!(),
                    }
                } else {
                    8.0 - b.drop(v)
                }
            }
            Profile::Coupling(c) => 1.0 + c.k(v) + c.big_h(v),
        }
    }

    /// `f0'`.
    pub fn df0(&self, v: f64) -> f64 {
        match &self.profile {
            Profile::Flat => 0.0,
            Profile::Blend(b) => {
                if v <= 0.0 {
                    0.0
                } else if v >= b.lambda {
                    match self.kind {
                        WarpingKind::Poly { delta, c3, .. } => {
                            let k = 2.0 / (1.0 + delta) - 1.0;
                            -k * c3 * v.powf(-k - 1.0)
                        }
                        WarpingKind::Exp { alpha, c3, lambda } => -alpha * c3 * (-alpha * (v - lambda)).exp(),
                        _ => unreachable!(),
                    }
                } else {
                    -b.slope(v)
                }
            }
            Profile::Coupling(c) => -2.0 * PI * c.big_h(v),
        }
    }

    /// `f0''` by a centered difference of `f0'`.
    pub fn ddf0(&self, v: f64) -> f64 {
        if let Profile::Flat = self.profile {
            return 0.0;
        }
        let h = 1e-5 * v.abs().max(1.0);
        (self.df0(v + h) - self.df0(v - h)) / (2.0 * h)
    }

    #[inline]
    pub fn f(&self, v: f64) -> f64 {
        self.f0(v - self.vbar)
    }

    #[inline]
    pub fn df(&self, v: f64) -> f64 {
        self.df0(v - self.vbar)
    }

    /// Start of the exact tail.
    pub fn lambda(&self) -> Option<f64> {
        match &self.profile {
            Profile::Blend(b) => Some(b.lambda),
            Profile::Coupling(c) => Some(c.lambda),
            Profile::Flat => None,
        }
    }

    /// Smallest `v` with `f(v) = target`, for `1 < target < 8`.
    pub fn solve_level(&self, target: f64) -> Result<f64> {
        if matches!(self.profile, Profile::Flat) || !(target > 1.0 && target < 8.0) {
            return Err(Error::Domain(format!("no level set f = {target} for this warping")));
        }
        let mut hi = 1.0;
        while self.f0(hi) > target {
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::Domain(format!("f never reaches {target}")));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.f0(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi) + self.vbar)
    }

    /// Re-check the admissibility constraints on a 10^4-point grid.
    pub fn verify(&self) -> Result<()> {
        let lambda = self.lambda().unwrap_or(1.0);
        let top = lambda + 4.0;
        let n = 10_000;
        let mut prev_slope = f64::INFINITY;
        let mut prev_f = f64::INFINITY;
        for i in 0..=n {
            let v = -2.0 + (top + 2.0) * i as f64 / n as f64;
            let f = self.f0(v);
            let sl = -self.df0(v);
            if v <= 0.0 && (f - 8.0).abs() > 1e-12 {
                return Err(Error::Constraint(format!("f0 = 8 on (-inf, 0] fails at v = {v}: f0 = {f}")));
            }
            if v < 1.0 && f <= 7.0 {
                return Err(Error::Constraint(format!("f0 > 7 on (-inf, 1) fails at v = {v}: f0 = {f}")));
            }
            if f > prev_f + 1e-12 || sl < -1e-15 {
                return Err(Error::Constraint(format!("f0 non-increasing fails at v = {v}")));
            }
            if v >= 1.0 {
                if !(sl > 0.0) || sl > SLOPE_CAP + 1e-12 {
                    return Err(Error::Constraint(format!("0 < -f0' <= 1/8 on [1, inf) fails at v = {v}: -f0' = {sl}")));
                }
                if sl > prev_slope * (1.0 + 1e-9) + 1e-15 {
                    return Err(Error::Constraint(format!("-f0' decreasing on [1, inf) fails at v = {v}")));
                }
                prev_slope = sl;
            }
            prev_f = f;
        }
        if let Profile::Coupling(_) = self.profile {
            self.coupling_report()?.check()?;
        }
        Ok(())
    }

    /// Diagnostics of the compact coupling, if this warping comes from one.
    pub fn coupling_report(&self) -> Result<CouplingReport> {
        let Profile::Coupling(c) = &self.profile else {
            return Err(Error::Domain("not a compact coupling".into()));
        };
        let n = 10_000;
        let top = c.lambda + 4.0;
        let mut rep = CouplingReport {
            c4: c.c4,
            lambda: c.lambda,
            h_at_zero: self.h_scaled(0.0) ,
            max_tot_geod_residual: 0.0,
            max_h_integral_mismatch: 0.0,
            min_growth_margin: f64::INFINITY,
            max_slope: 0.0,
            min_kprime_margin: f64::INFINITY,
            max_kpp_on_plateau: f64::NEG_INFINITY,
            max_f0_mismatch: 0.0,
        };
        for i in 0..=n {
            let v = -1.0 + (top + 1.0) * i as f64 / n as f64;
            let kp = self.k_prime(v);
            // e^{-2 pi (v - Lambda)} (sqrt2/2) h'(v), with h' from its defining integrand
            let hp_scaled = SQRT_2 * kp.abs();
            rep.max_tot_geod_residual = rep.max_tot_geod_residual.max((kp + 0.5 * SQRT_2 * hp_scaled).abs());
            let kap = -kp;
            rep.min_kprime_margin = rep.min_kprime_margin.min(kap).min(PI.exp() * c.c4 - kap);
            let hs = self.h_scaled(v);
            if v >= 1.0 {
                rep.min_growth_margin = rep.min_growth_margin.min(2.0 * PI * hs - hp_scaled);
                rep.max_slope = rep.max_slope.max(-self.df0(v));
            }
            if (1.0..=c.lambda).contains(&v) && i > 0 {
                let dv = (top + 1.0) / n as f64;
                let kpp = -(self.k_prime(v) - self.k_prime(v - dv)) / dv;
                rep.max_kpp_on_plateau = rep.max_kpp_on_plateau.max(kpp);
            }
            let f0 = hs * 0.5 * SQRT_2 + c.k(v) + 1.0;
            rep.max_f0_mismatch = rep.max_f0_mismatch.max((f0 - self.f0(v)).abs());
            if i % 500 == 0 && v > 0.0 {
                let lo = (v - 12.0).max(0.0);
                let direct = quad::integrate(|t| SQRT_2 * (2.0 * PI * (t - v)).exp() * c.kappa(t), lo, v.min(c.lambda), 1e-12)?
                    * if v > c.lambda { (-2.0 * PI * (v - c.lambda)).exp() } else { 1.0 };
                let direct = if v > c.lambda {
                    let at = quad::integrate(|t| SQRT_2 * (2.0 * PI * (t - c.lambda)).exp() * c.kappa(t), (c.lambda - 12.0).max(0.0), c.lambda, 1e-12)?;
                    at * (-2.0 * PI * (v - c.lambda)).exp()
                } else {
                    direct
                };
                rep.max_h_integral_mismatch = rep.max_h_integral_mismatch.max((direct - hs).abs());
            }
        }
        Ok(rep)
    }

    /// `h(v) e^{-2 pi (v - Lambda)}` for the compact coupling.
    pub fn h_scaled(&self, v: f64) -> f64 {
        match &self.profile {
            Profile::Coupling(c) => SQRT_2 * c.big_h(v),
            _ => 0.0,
        }
    }

    pub fn k(&self, v: f64) -> f64 {
        match &self.profile {
            Profile::Coupling(c) => c.k(v),
            _ => 0.0,
        }
    }

    pub fn k_prime(&self, v: f64) -> f64 {
        match &self.profile {
            Profile::Coupling(c) => -c.kappa(v),
            _ => 0.0,
        }
    }

    /// Coupling function `F(x, y)` on the flat torus direction `x`.
    pub fn coupling_f(&self, x: f64, y: f64) -> f64 {
        let w = x + y - self.vbar;
        self.h_scaled(w) * ((2.0 * PI * (x - 0.125)).sin() + SQRT_2) + self.k(w) + 1.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CouplingReport {
    pub c4: f64,
    pub lambda: f64,
    pub h_at_zero: f64,
    pub max_tot_geod_residual: f64,
    pub max_h_integral_mismatch: f64,
    pub min_growth_margin: f64,
    pub max_slope: f64,
    pub min_kprime_margin: f64,
    pub max_kpp_on_plateau: f64,
    pub max_f0_mismatch: f64,
}

impl CouplingReport {
    pub fn check(&self) -> Result<()> {
        if self.max_tot_geod_residual >= 1e-10 {
            return Err(Error::Constraint(format!("totally geodesic residual {:.3e}", self.max_tot_geod_residual)));
        }
        if self.min_growth_margin < -1e-12 {
            return Err(Error::Constraint(format!("h' <= 2 pi h fails by {:.3e}", -self.min_growth_margin)));
        }
        if self.max_slope > SLOPE_CAP {
            return Err(Error::Constraint(format!("-f0' = {:.4} exceeds 1/8", self.max_slope)));
        }
        if self.min_kprime_margin < -1e-12 {
            return Err(Error::Constraint("0 <= -k' <= e^pi c4 fails".into()));
        }
        if self.max_kpp_on_plateau > 1e-9 {
            return Err(Error::Constraint("-k'' <= 0 on [1, Lambda] fails".into()));
        }
        Ok(())
    }
}

/// Target `N = R x_f N~` with cached extremal radii.
#[derive(Debug, Clone)]
pub struct TargetGeometry {
    pub bump: BumpMetric,
    pub warping: WarpingSpec,
    pub r_max: f64,
    pub r_min: f64,
}

/// Pointwise coefficients and their first derivatives at a node.
#[derive(Debug, Clone, Copy)]
pub struct Coeffs {
    pub f: f64,
    pub df: f64,
    pub p: f64,
    /// `dP/d(|x|^2)`.
    pub dp: f64,
}

/// `G = f(v) P(r^2 + z^2)` with first and second partials in `(v, r, z)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NodeCoef {
    pub g: f64,
    pub p: f64,
    pub d: [f64; 3],
    pub dd: [[f64; 3]; 3],
}

impl TargetGeometry {
    pub fn new(c_n: f64, warping: WarpingSpec) -> Result<Self> {
        let bump = BumpMetric::new(c_n)?;
        let (r_max, r_min) = extremal_radii(c_n)?;
        Ok(Self { bump, warping, r_max, r_min })
    }

    #[inline]
    pub fn coeffs(&self, v: f64, r: f64, z: f64) -> Coeffs {
        let (p, dp) = self.bump.factor_sq(r * r + z * z);
        Coeffs { f: self.warping.f(v), df: self.warping.df(v), p, dp }
    }

    /// Values and first derivatives of `G` only.
    #[inline]
    pub fn node_coef1(&self, v: f64, r: f64, z: f64) -> NodeCoef {
        let c = self.coeffs(v, r, z);
        NodeCoef {
            g: c.f * c.p,
            p: c.p,
            d: [c.df * c.p, 2.0 * r * c.f * c.dp, 2.0 * z * c.f * c.dp],
            dd: [[0.0; 3]; 3],
        }
    }

    /// Values, first and second derivatives of `G`.
    pub fn node_coef2(&self, v: f64, r: f64, z: f64) -> NodeCoef {
        let mut n = self.node_coef1(v, r, z);
        let x2 = r * r + z * z;
        let c = self.coeffs(v, r, z);
        let ddf = self.warping.ddf0(v - self.warping.vbar);
        let ddp = if x2 >= 1.0 {
            0.0
        } else {
            let q = 1.0 / (1.0 - x2);
            let b = self.bump.c_n * (1.0 - q).exp();
            b * q * q * q * (q - 2.0)
        };
        let f = c.f;
        n.dd[0][0] = ddf * c.p;
        n.dd[0][1] = 2.0 * r * c.df * c.dp;
        n.dd[0][2] = 2.0 * z * c.df * c.dp;
        n.dd[1][1] = 2.0 * f * c.dp + 4.0 * r * r * f * ddp;
        n.dd[1][2] = 4.0 * r * z * f * ddp;
        n.dd[2][2] = 2.0 * f * c.dp + 4.0 * z * z * f * ddp;
        n.dd[1][0] = n.dd[0][1];
        n.dd[2][0] = n.dd[0][2];
        n.dd[2][1] = n.dd[1][2];
        n
    }

    /// `(g_vv, g_rr, g_zz, g_thetatheta)`.
    pub fn metric_coefficients(&self, v: f64, r: f64, z: f64) -> [f64; 4] {
        let c = self.coeffs(v, r, z);
        let fp = c.f * c.p;
        [1.0, fp, fp, fp * r * r]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn poly() -> WarpingKind {
        WarpingKind::Poly { delta: 0.5, c3: 1.0, lambda: 64.0 }
    }

    #[test]
    fn bump_values() {
        let b = BumpMetric::new(1e6).unwrap();
        assert_eq!(b.bump_factor(0.0), 1e6 + 1.0);
        assert_eq!(b.bump_factor(1.0), 1.0);
        assert_eq!(b.bump_factor(2.0), 1.0);
        assert!(BumpMetric::new(-1.0).is_err());
    }

    #[test]
    fn bump_is_flat_at_unit_sphere() {
        // one-sided derivatives up to order 3 vanish at |x| = 1
        let b = BumpMetric::new(1e6).unwrap();
        let h = 2e-3;
        let f = |r: f64| b.bump_factor(r) - 1.0;
        let d1 = (f(1.0) - f(1.0 - h)) / h;
        let d2 = (f(1.0) - 2.0 * f(1.0 - h) + f(1.0 - 2.0 * h)) / (h * h);
        let d3 = (f(1.0) - 3.0 * f(1.0 - h) + 3.0 * f(1.0 - 2.0 * h) - f(1.0 - 3.0 * h)) / (h * h * h);
        assert!(d1.abs() < 1e-6 && d2.abs() < 1e-6 && d3.abs() < 1e-6, "{d1} {d2} {d3}");
    }

    #[test]
    fn bump_derivative_matches_fd() {
        let b = BumpMetric::new(1e6).unwrap();
        for &x2 in &[0.1, 0.4, 0.8, 0.95] {
            let h = 1e-7;
            let fd = (b.factor_sq(x2 + h).0 - b.factor_sq(x2 - h).0) / (2.0 * h);
            assert_relative_eq!(b.factor_sq(x2).1, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn extremal_radii_trends() {
        let (a1, b1) = extremal_radii(1e4).unwrap();
        let (a2, b2) = extremal_radii(1e6).unwrap();
        let (a3, b3) = extremal_radii(1e9).unwrap();
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        assert!(a1 > a2 && a2 > a3 && a3 > golden);
        assert!(b1 < b2 && b2 < b3 && b3 < 1.0);
        assert!((a2 - golden).abs() < 1e-2);
    }

    #[test]
    fn small_bump_rejected() {
        assert!(matches!(extremal_radii(1.0), Err(Error::BumpThreshold { .. })));
    }

    #[test]
    fn certification() {
        assert!(certify_bump(1e6, 1.2, 10.0 * PI).is_ok());
        assert!(certify_bump(100.0, 1.2, 10.0 * PI).is_err());
    }

    #[test]
    fn plateau_and_shift() {
        let w = WarpingSpec::new(poly(), 7.0).unwrap();
        assert_eq!(w.f0(-3.0), 8.0);
        assert_eq!(w.f(4.0), 8.0);
        assert!(w.f0(0.999) > 7.0);
    }

    #[test]
    fn tail_is_exact() {
        let kind = WarpingKind::Poly { delta: 1.0 / 3.0, c3: 1.0, lambda: 64.0 };
        let w = WarpingSpec::new(kind, 0.0).unwrap();
        assert_relative_eq!(w.f0(100.0), 1.0 + 0.1, max_relative = 1e-14);
        let e = WarpingSpec::new(WarpingKind::Exp { alpha: 2.0 * PI, c3: 0.01, lambda: 70.0 }, 0.0).unwrap();
        assert_relative_eq!(e.f0(70.0), 1.01, max_relative = 1e-14);
    }

    #[test]
    fn blend_is_continuous_at_lambda() {
        let w = WarpingSpec::new(poly(), 0.0).unwrap();
        let l = 64.0;
        assert!((w.f0(l - 1e-9) - w.f0(l + 1e-9)).abs() < 1e-8);
        assert!((w.df0(l - 1e-9) - w.df0(l + 1e-9)).abs() < 1e-8);
    }

    #[test]
    fn derivative_consistent_with_values() {
        let w = WarpingSpec::new(poly(), 0.0).unwrap();
        for &v in &[0.3, 1.5, 10.0, 40.0, 63.0, 80.0] {
            let h = 1e-5;
            let fd = (w.f0(v + h) - w.f0(v - h)) / (2.0 * h);
            assert!((fd - w.df0(v)).abs() < 1e-8, "v={v} fd={fd} an={}", w.df0(v));
        }
    }

    #[test]
    fn infeasible_defaults_name_constraint() {
        let err = WarpingSpec::new(WarpingKind::Poly { delta: 0.5, c3: 1.0, lambda: 5.0 }, 0.0).unwrap_err();
        assert!(err.to_string().contains("1/8"), "{err}");
        let err = WarpingSpec::new(WarpingKind::Exp { alpha: 2.0 * PI, c3: 1.0, lambda: 5.0 }, 0.0).unwrap_err();
        assert!(err.to_string().contains("1/8"), "{err}");
        let err = WarpingSpec::new(WarpingKind::Poly { delta: 0.5, c3: 100.0, lambda: 5.0 }, 0.0).unwrap_err();
        assert!(err.to_string().contains("below 7"), "{err}");
    }

    #[test]
    fn coupling_properties() {
        let w = WarpingSpec::new(WarpingKind::Compact { c4: 0.04 }, 0.0).unwrap();
        let rep = w.coupling_report().unwrap();
        assert_eq!(rep.h_at_zero, 0.0);
        assert!(rep.max_tot_geod_residual < 1e-10);
        assert!(rep.max_h_integral_mismatch < 1e-10, "{}", rep.max_h_integral_mismatch);
        assert!(rep.min_growth_margin >= -1e-12, "{}", rep.min_growth_margin);
        assert!(rep.max_slope <= 0.125);
        assert!(rep.max_f0_mismatch < 1e-12);
        let l = rep.lambda;
        assert!(w.k(l).abs() < 1e-10);
        assert_eq!(w.k(-1.0), 7.0);
    }

    #[test]
    fn coupling_is_totally_geodesic_at_zero() {
        let w = WarpingSpec::new(WarpingKind::Compact { c4: 0.04 }, 3.0).unwrap();
        for &y in &[3.2, 3.7, 4.5, 10.0, 50.0] {
            let hx = 1e-3;
            let f = |x: f64| w.coupling_f(x, y);
            let d = (-f(2.0 * hx) + 8.0 * f(hx) - 8.0 * f(-hx) + f(-2.0 * hx)) / (12.0 * hx);
            assert!(d.abs() < 1e-10, "y={y} dF/dx={d}");
            assert!((f(0.0) - w.f(y)).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_c4() {
        assert!(matches!(WarpingSpec::new(WarpingKind::Compact { c4: 10.0 }, 0.0), Err(Error::InfeasibleC4(_))));
        assert!(WarpingSpec::new(WarpingKind::Compact { c4: 0.2 }, 0.0).is_err());
    }

    #[test]
    fn metric_coefficients_cases() {
        let t = TargetGeometry::new(1e6, WarpingSpec::new(poly(), 7.0).unwrap()).unwrap();
        let g = t.metric_coefficients(6.0, 0.5, 1.0);
        assert_eq!(g, [1.0, 8.0, 8.0, 2.0]);
        assert_eq!(t.metric_coefficients(3.0, 0.0, 2.0)[3], 0.0);
        let flat = TargetGeometry::new(1e6, WarpingSpec::new(WarpingKind::Flat, 0.0).unwrap()).unwrap();
        assert_eq!(flat.metric_coefficients(1e3, 0.6, 1.0), [1.0, 1.0, 1.0, 0.36]);
    }

    #[test]
    fn level_solve() {
        let w = WarpingSpec::new(poly(), 7.0).unwrap();
        let v = w.solve_level(2.0).unwrap();
        assert!((w.f(v) - 2.0).abs() < 1e-10);
    }
}
