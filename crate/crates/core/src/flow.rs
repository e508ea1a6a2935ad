//! Time integration of the coupled flow (map + collar length) and of the
//! rescaled flow (harmonic map, moving length).
//!
//! Node values live on the grid `s_j = S_j(X(ell))`. Material points of the
//! evolving hyperbolic cylinder keep `m = (ell/d) tan(ell s / 2 pi)` fixed, so a
//! node moving with the grid sees
//!
//! ```text
//! dU_j/dt = tau_j + (V_grid - V_material)_j u_s
//! ```
//!
//! which is integrated linearly implicitly with the analytic Hessian.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::collar::CollarMetric;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::{BlockTridiag, Vec3};
use crate::map::{self, SymmetricMap};
use crate::target::TargetGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Rescaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub eta: f64,
    pub d: f64,
    pub mode: Mode,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub safety: f64,
    /// Target per-step error in the energy rate, relative to the dissipation.
    pub step_tol: f64,
    pub tol_inner: f64,
    pub ell_stop: f64,
    pub t_max: f64,
    pub max_steps: usize,
    pub max_inner: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            eta: 1.0,
            d: 1.0,
            mode: Mode::Full,
            dt_init: 1e-10,
            dt_min: 1e-20,
            dt_max: 1.0,
            safety: 0.9,
            step_tol: 0.02,
            tol_inner: 1e-7,
            ell_stop: 1e-4,
            t_max: 10.0,
            max_steps: 200_000,
            max_inner: 2000,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {x}")))
            }
        };
        pos("eta", self.eta)?;
        pos("d", self.d)?;
        pos("dt_init", self.dt_init)?;
        pos("dt_min", self.dt_min)?;
        pos("dt_max", self.dt_max)?;
        pos("tol_inner", self.tol_inner)?;
        pos("ell_stop", self.ell_stop)?;
        pos("step_tol", self.step_tol)?;
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::Config(format!("safety must be in (0, 1], got {}", self.safety)));
        }
        if self.dt_min > self.dt_max {
            return Err(Error::Config("dt_min exceeds dt_max".into()));
        }
        if !(self.t_max >= 0.0) {
            return Err(Error::Config(format!("t_max must be >= 0, got {}", self.t_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub map: SymmetricMap,
    pub ell: f64,
    pub t: f64,
    pub grid: Grid,
}

impl FlowState {
    pub fn metric(&self, d: f64) -> Result<CollarMetric> {
        CollarMetric::cylinder(self.ell, d)
    }

    pub fn positions(&self, d: f64) -> Result<Vec<f64>> {
        Ok(self.grid.positions(self.metric(d)?.x))
    }
}

/// `dell/dt` from the projection coefficient.
pub fn length_ode_rhs(b0: f64, ell: f64, params: &FlowParams) -> f64 {
    let base = -(2.0 * PI * PI / ell) * b0;
    match params.mode {
        Mode::Full => 0.25 * params.eta * params.eta * base,
        Mode::Rescaled => base,
    }
}

/// Node positions at length `ell2` of the material points sitting at `pos` for length `ell`.
pub fn material_positions(pos: &[f64], ell: f64, ell2: f64, d: f64) -> Vec<f64> {
    pos.iter()
        .map(|&s| {
            let m = (ell / d) * (ell * s / (2.0 * PI)).tan();
            (2.0 * PI / ell2) * (d * m / ell2).atan()
        })
        .collect()
}

/// `ds/dell` at fixed material point.
pub fn material_velocity(s: f64, ell: f64) -> f64 {
    let u = ell * s / (2.0 * PI);
    -(2.0 * PI / (ell * ell)) * (u + u.sin() * u.cos())
}

/// `dX/dell` for the cylinder width.
pub fn width_derivative(ell: f64, d: f64) -> f64 {
    let x = (2.0 * PI / ell) * (0.5 * PI - (ell / d).atan());
    -x / ell - (2.0 * PI / ell) * (d / (d * d + ell * ell))
}

/// `dE/dell` with the map frozen at material points, by central differences.
pub fn energy_ell_derivative(map: &SymmetricMap, pos: &[f64], ell: f64, d: f64, target: &TargetGeometry) -> f64 {
    let h = 1e-5 * ell;
    let pp = material_positions(pos, ell, ell + h, d);
    let pm = material_positions(pos, ell, ell - h, d);
    (map::energy(map, &pp, target) - map::energy(map, &pm, target)) / (2.0 * h)
}

/// Hopf constant of a harmonic state from the energy variation, `psi = -(dE/dell)|_m / X'(ell)`.
///
/// For a discrete minimizer this is the derivative of the minimal energy, so
/// it carries the accuracy of the energy rather than of pointwise `u_s`.
pub fn psi_variational(map: &SymmetricMap, pos: &[f64], ell: f64, d: f64, target: &TargetGeometry) -> f64 {
    -energy_ell_derivative(map, pos, ell, d, target) / width_derivative(ell, d)
}

/// Observables of one state, shared by both modes.
#[derive(Debug, Clone)]
struct Eval {
    pos: Vec<f64>,
    metric: CollarMetric,
    energy: f64,
    grad: Vec<Vec3>,
    mass: Vec<Vec3>,
    tau: Vec<Vec3>,
    tnorm: f64,
    b0: f64,
}

fn evaluate(map: &SymmetricMap, ell: f64, grid: &Grid, d: f64, target: &TargetGeometry) -> Result<Eval> {
    let metric = CollarMetric::cylinder(ell, d)?;
    let pos = grid.positions(metric.x);
    let energy = map::energy(map, &pos, target);
    let grad = map::gradient(map, &pos, target);
    let mass = map::mass(map, &pos, &metric, target);
    let (tau, tnorm) = map::tension_from(&grad, &mass);
    let (_, b0) = map::hopf(map, &pos, &metric, target);
    if !(energy.is_finite() && tnorm.is_finite() && b0.is_finite()) {
        return Err(Error::Numeric("non-finite energy, tension or b0".into()));
    }
    Ok(Eval { pos, metric, energy, grad, mass, tau, tnorm, b0 })
}

/// Per-record observables.
#[derive(Debug, Clone, Serialize)]
pub struct Record {
    pub t: f64,
    pub ell: f64,
    pub x: f64,
    pub energy: f64,
    pub psi_mean: f64,
    pub psi_std: f64,
    pub b0: f64,
    pub leash: f64,
    pub v_max: f64,
    pub tension_norm: f64,
    pub area_w: f64,
    pub disjoint: bool,
    /// `d/dt log(1/ell)` given by the length equation at this state.
    pub log_rate: f64,
    pub de_dt_fd: Option<f64>,
    pub de_dt_model: Option<f64>,
    pub metric_term: Option<f64>,
    /// Energy of `w` in `(N~, g_N~)` on `|s| <= 8` (only when `X >= 8`).
    pub central_w_energy: Option<f64>,
    pub min_v_center: Option<f64>,
    /// Rescaled mode: the Hopf constant driving the length, see [`psi_variational`].
    pub psi_var: Option<f64>,
}

impl Record {
    /// `|dE/dt_fd - model| / max(dissipation, |metric term|)`, full mode only.
    pub fn balance_residual(&self) -> Option<f64> {
        let (fd, model, met) = (self.de_dt_fd?, self.de_dt_model?, self.metric_term?);
        let scale = (model - met).abs().max(met.abs()).max(f64::MIN_POSITIVE);
        Some((fd - model).abs() / scale)
    }
}

/// Energy of `w` (without the warping factor) over `|s| <= a`.
pub fn central_w_energy(map: &SymmetricMap, pos: &[f64], target: &TargetGeometry, a: f64) -> f64 {
    let dens = |j: usize| {
        let (r, z) = (map.r[j], map.z[j]);
        target.bump.factor_sq(r * r + z * z).0
    };
    let mut acc = 0.0;
    for j in 0..map.half() {
        if pos[j] >= a {
            break;
        }
        let ds = pos[j + 1] - pos[j];
        let dr = map.r[j + 1] - map.r[j];
        let dz = map.z[j + 1] - map.z[j];
        let pe = 0.5 * (dens(j) + dens(j + 1));
        let frac = ((a - pos[j]) / ds).min(1.0);
        let edge = pe * (dr * dr + dz * dz) / ds;
        let pot = 0.5 * (dens(j) * map.r[j].powi(2) + dens(j + 1) * map.r[j + 1].powi(2));
        acc += frac * (edge + ds * pot);
    }
    2.0 * PI * acc
}

pub fn make_record(state: &FlowState, params: &FlowParams, target: &TargetGeometry) -> Result<Record> {
    let metric = state.metric(params.d)?;
    let pos = state.grid.positions(metric.x);
    let obs = map::observables(&state.map, &pos, &metric, target)?;
    let psi_var = match params.mode {
        Mode::Full => None,
        Mode::Rescaled => Some(psi_variational(&state.map, &pos, state.ell, params.d, target)),
    };
    let ell_dot = length_ode_rhs(psi_var.map_or(obs.b0, |p| p / (2.0 * PI)), state.ell, params);
    let (cw, mv) = if metric.x >= 8.0 {
        let mv = pos
            .iter()
            .zip(&state.map.v)
            .filter(|(s, _)| **s <= 8.0)
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min);
        (Some(central_w_energy(&state.map, &pos, target, 8.0)), Some(mv))
    } else {
        (None, None)
    };
    Ok(Record {
        t: state.t,
        ell: state.ell,
        x: metric.x,
        energy: obs.energy,
        psi_mean: obs.psi_mean,
        psi_std: obs.psi_std,
        b0: obs.b0,
        leash: obs.leash,
        v_max: obs.v_max,
        tension_norm: obs.tension_norm,
        area_w: obs.area_w,
        disjoint: map::disjointness_check(&state.map, target),
        log_rate: -ell_dot / state.ell,
        de_dt_fd: None,
        de_dt_model: None,
        metric_term: None,
        central_w_energy: cw,
        min_v_center: mv,
        psi_var,
    })
}

/// Central-difference weights for `u_s` at interior node `j`.
fn ds_weights(pos: &[f64], j: usize) -> (f64, f64, f64) {
    let hl = pos[j] - pos[j - 1];
    let hr = pos[j + 1] - pos[j];
    (-hr / (hl * (hl + hr)), (hr - hl) / (hl * hr), hl / (hr * (hl + hr)))
}

fn fix_z0(h: &mut BlockTridiag, rhs: &mut [Vec3]) {
    for k in 0..3 {
        h.diag[0][2][k] = 0.0;
        h.diag[0][k][2] = 0.0;
        h.upper[0][2][k] = 0.0;
        if h.lower.len() > 1 {
            h.lower[1][k][2] = 0.0;
        }
    }
    h.diag[0][2][2] = 1.0;
    rhs[0][2] = 0.0;
}

#[derive(Debug, Clone)]
pub struct StepInfo {
    pub dt: f64,
    pub de_dt_fd: f64,
    pub de_dt_model: f64,
    pub metric_term: f64,
    /// Filtered embedded error as a fraction of the energy change rate.
    pub err_est: f64,
}

pub enum StepOutcome {
    Accepted(FlowState, StepInfo),
    Rejected(String),
}

/// One full-mode step of size `dt` (two-stage Rosenbrock-W, L-stable).
pub fn step_full(state: &FlowState, dt: f64, params: &FlowParams, target: &TargetGeometry) -> Result<StepOutcome> {
    let e0 = evaluate(&state.map, state.ell, &state.grid, params.d, target)?;
    step_full_from(state, &e0, dt, params, target).map(|(o, _)| o)
}

const GAMMA: f64 = 1.0 + std::f64::consts::FRAC_1_SQRT_2;

fn node_velocity(ev: &Eval, ell: f64, ell_dot: f64, grid: &Grid, d: f64) -> Vec<f64> {
    let dsdx = grid.d_positions_dx(ev.metric.x, &ev.pos);
    let xdot = width_derivative(ell, d) * ell_dot;
    ev.pos.iter().zip(&dsdx).map(|(&s, &g)| xdot * g - ell_dot * material_velocity(s, ell)).collect()
}

/// Node right-hand side `tau + (V_grid - V_material) u_s` on free nodes.
fn node_rhs(map: &SymmetricMap, ev: &Eval, vel: &[f64]) -> Vec<Vec3> {
    let n = map.half();
    let mut f = ev.tau.clone();
    for j in 1..n {
        if vel[j] == 0.0 {
            continue;
        }
        let (a, b, c) = ds_weights(&ev.pos, j);
        let us = |w: &[f64]| a * w[j - 1] + b * w[j] + c * w[j + 1];
        f[j][0] += vel[j] * us(&map.v);
        f[j][1] += vel[j] * us(&map.r);
        f[j][2] += vel[j] * us(&map.z);
    }
    f[0][2] = 0.0;
    f
}

/// Exact `dE/dt` of the semi-discrete system at one state.
fn semidiscrete_rate(
    map: &SymmetricMap,
    ev: &Eval,
    ell: f64,
    ell_dot: f64,
    grid: &Grid,
    d: f64,
    target: &TargetGeometry,
) -> Result<f64> {
    let vel = node_velocity(ev, ell, ell_dot, grid, d);
    let f = node_rhs(map, ev, &vel);
    let mut acc = 0.0;
    for (g, fj) in ev.grad.iter().zip(&f) {
        acc += g[0] * fj[0] + g[1] * fj[1] + g[2] * fj[2];
    }
    let h = 1e-5 * ell;
    let ep = map::energy(map, &grid.positions(CollarMetric::cylinder(ell + h, d)?.x), target);
    let em = map::energy(map, &grid.positions(CollarMetric::cylinder(ell - h, d)?.x), target);
    Ok(2.0 * acc + (ep - em) / (2.0 * h) * ell_dot)
}

fn m_norm(m: &[Vec3], x: &[Vec3]) -> f64 {
    let mut acc = 0.0;
    for (mj, xj) in m.iter().zip(x) {
        for k in 0..3 {
            acc += mj[k] * xj[k] * xj[k];
        }
    }
    (2.0 * acc).sqrt()
}

fn step_full_from(
    state: &FlowState,
    e0: &Eval,
    dt: f64,
    params: &FlowParams,
    target: &TargetGeometry,
) -> Result<(StepOutcome, Option<Eval>)> {
    let d = params.d;
    let ell = state.ell;
    let n = state.map.half();
    let too_long = |l: f64| !(l > 0.0) || (l - ell).abs() > 0.1 * ell * (1.0 + 1e-12);
    let ld1 = length_ode_rhs(e0.b0, ell, params);
    if too_long(ell + dt * ld1) {
        return Ok((StepOutcome::Rejected("length step exceeds 10%".into()), None));
    }
    let pos = &e0.pos;
    let vel = node_velocity(e0, ell, ld1, &state.grid, d);
    let f1 = node_rhs(&state.map, e0, &vel);

    // (M/(gamma dt) + H - M A) shared by both stages
    let gdt = GAMMA * dt;
    let hess = map::hessian(&state.map, pos, target);
    let mut h = hess.clone();
    for j in 0..n {
        for k in 0..3 {
            h.diag[j][k][k] += e0.mass[j][k] / gdt;
        }
        if j == 0 || vel[j] == 0.0 {
            continue;
        }
        let (a, b, c) = ds_weights(pos, j);
        for k in 0..3 {
            let mc = e0.mass[j][k] * vel[j];
            h.diag[j][k][k] -= mc * b;
            h.lower[j][k][k] -= mc * a;
            if j + 1 < n {
                h.upper[j][k][k] -= mc * c;
            }
        }
    }
    let mut dummy = vec![[0.0; 3]; n];
    fix_z0(&mut h, &mut dummy);
    let stage = |f: &[Vec3]| -> Option<Vec<Vec3>> {
        let mut rhs: Vec<Vec3> = (0..n).map(|j| std::array::from_fn(|k| e0.mass[j][k] * f[j][k])).collect();
        rhs[0][2] = 0.0;
        let kap = h.solve(&rhs)?;
        Some(kap.iter().map(|x| std::array::from_fn(|k| x[k] / gdt)).collect())
    };
    let Some(k1) = stage(&f1) else {
        return Ok((StepOutcome::Rejected("singular step matrix".into()), None));
    };

    let mut y2 = state.map.clone();
    y2.add_free(&k1.iter().map(|x| std::array::from_fn(|k| dt * x[k])).collect::<Vec<Vec3>>());
    let ell2 = ell + dt * ld1;
    if !y2.is_finite() {
        return Ok((StepOutcome::Rejected("non-finite stage".into()), None));
    }
    let Ok(e2) = evaluate(&y2, ell2, &state.grid, d, target) else {
        return Ok((StepOutcome::Rejected("non-finite stage".into()), None));
    };
    let ld2 = length_ode_rhs(e2.b0, ell2, params);
    let vel2 = node_velocity(&e2, ell2, ld2, &state.grid, d);
    let f2 = node_rhs(&y2, &e2, &vel2);
    let g2: Vec<Vec3> = (0..n).map(|j| std::array::from_fn(|k| f2[j][k] - 2.0 * k1[j][k])).collect();
    let Some(k2) = stage(&g2) else {
        return Ok((StepOutcome::Rejected("singular step matrix".into()), None));
    };

    let ell_new = ell + 0.5 * dt * (ld1 + ld2);
    if too_long(ell_new) {
        return Ok((StepOutcome::Rejected("length step exceeds 10%".into()), None));
    }
    let incr: Vec<Vec3> = (0..n).map(|j| std::array::from_fn(|k| dt * (1.5 * k1[j][k] + 0.5 * k2[j][k]))).collect();
    let err: Vec<Vec3> = (0..n).map(|j| std::array::from_fn(|k| 0.5 * dt * (k1[j][k] + k2[j][k]))).collect();
    let mut map_new = state.map.clone();
    map_new.add_free(&incr);
    if !map_new.is_finite() {
        return Ok((StepOutcome::Rejected("non-finite update".into()), None));
    }
    let e1 = match evaluate(&map_new, ell_new, &state.grid, d, target) {
        Ok(e) => e,
        Err(_) => return Ok((StepOutcome::Rejected("non-finite state".into()), None)),
    };
    if e1.energy > e0.energy + 1e-10 * e0.energy.abs().max(1.0) {
        return Ok((StepOutcome::Rejected(format!("energy increase {:.3e}", e1.energy - e0.energy)), None));
    }
    let de0 = energy_ell_derivative(&state.map, pos, ell, d, target);
    let de1 = energy_ell_derivative(&map_new, &e1.pos, ell_new, d, target);
    let ld_new = length_ode_rhs(e1.b0, ell_new, params);
    let metric_term = 0.5 * (de0 * ld1 + de1 * ld_new);
    let model = -0.5 * (e0.tnorm * e0.tnorm + e1.tnorm * e1.tnorm) + metric_term;
    // filtered embedded error, converted to an energy error per unit time
    let scaled: Vec<Vec3> = (0..n).map(|j| std::array::from_fn(|k| e0.mass[j][k] * err[j][k] / gdt)).collect();
    let Some(ef) = h.solve(&scaled) else {
        return Ok((StepOutcome::Rejected("singular step matrix".into()), None));
    };
    let quad: f64 = hess.apply(&ef).iter().zip(&ef).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
    let e_map = e0.tnorm * m_norm(&e0.mass, &ef) + quad.abs();
    let e_len = (de0 * 0.5 * dt * (ld2 - ld1)).abs();
    // time-integration part of the balance defect, free of the spatial advection error
    let r0 = semidiscrete_rate(&state.map, e0, ell, ld1, &state.grid, d, target)?;
    let r1 = semidiscrete_rate(&map_new, &e1, ell_new, ld_new, &state.grid, d, target)?;
    let defect = ((e1.energy - e0.energy) / dt - 0.5 * (r0 + r1)).abs();
    let scale = model.abs().max(e0.tnorm * e0.tnorm).max(f64::MIN_POSITIVE);
    let err_est = ((e_map + e_len) / dt).max(defect) / scale;
    let next = FlowState { map: map_new, ell: ell_new, t: state.t + dt, grid: state.grid.clone() };
    let info = StepInfo {
        dt,
        de_dt_fd: (e1.energy - e0.energy) / dt,
        de_dt_model: model,
        metric_term,
        err_est,
    };
    Ok((StepOutcome::Accepted(next, info), Some(e1)))
}

#[derive(Debug, Clone)]
pub struct RelaxReport {
    pub map: SymmetricMap,
    pub tension_norm: f64,
    pub iterations: usize,
}

/// Damped Newton iteration at frozen length until `tension_norm <= tol`.
///
/// Each iterate solves `(H + M/dt) delta = -grad`; `dt` starts large (plain
/// Newton) and is cut whenever the trial raises the energy beyond round-off.
/// Three plain Newton steps in a row that fail to halve the tension mean
/// the round-off floor of the node values is reached; that is accepted when
/// the floor is within `100 tol`.
pub fn relax_harmonic(
    map0: &SymmetricMap,
    ell: f64,
    grid: &Grid,
    params: &FlowParams,
    target: &TargetGeometry,
    tol: f64,
) -> Result<RelaxReport> {
    let d = params.d;
    let mut map = map0.clone();
    let mut ev = evaluate(&map, ell, grid, d, target)?;
    let n = map.half();
    let mut dt = 1e30;
    let mut it = 0;
    let mut stalled = 0;
    while ev.tnorm > tol {
        if it >= params.max_inner {
            return Err(Error::InnerSolve { last_tension: ev.tnorm });
        }
        it += 1;
        let mut h = map::hessian(&map, &ev.pos, target);
        let mut rhs: Vec<Vec3> = (0..n).map(|j| [-ev.grad[j][0], -ev.grad[j][1], -ev.grad[j][2]]).collect();
        for j in 0..n {
            for k in 0..3 {
                h.diag[j][k][k] += ev.mass[j][k] / dt;
            }
        }
        fix_z0(&mut h, &mut rhs);
        let trial = h.solve(&rhs).and_then(|delta| {
            let mut m = map.clone();
            m.add_free(&delta);
            evaluate(&m, ell, grid, d, target).ok().map(|e| (m, e))
        });
        let newton = dt >= 1e20;
        match trial {
            Some((m, e)) if e.energy <= ev.energy || (e.tnorm < ev.tnorm && e.energy - ev.energy <= 1e-12 * ev.energy.abs()) => {
                stalled = if newton && e.tnorm > 0.5 * ev.tnorm { stalled + 1 } else { 0 };
                map = m;
                ev = e;
                dt = (dt * 4.0).min(1e30);
                if stalled >= 3 && ev.tnorm <= 100.0 * tol {
                    break;
                }
            }
            _ => {
                stalled += 1;
                if stalled >= 3 && ev.tnorm <= 100.0 * tol {
                    break;
                }
                dt *= 0.25;
                if dt < params.dt_min {
                    return Err(Error::InnerSolve { last_tension: ev.tnorm });
                }
            }
        }
    }
    Ok(RelaxReport { map, tension_norm: ev.tnorm, iterations: it })
}

/// One rescaled-mode step: explicit length update, then re-relaxation.
pub fn step_rescaled(state: &FlowState, dt: f64, params: &FlowParams, target: &TargetGeometry) -> Result<(FlowState, f64)> {
    let metric = state.metric(params.d)?;
    let pos = state.grid.positions(metric.x);
    let b0 = psi_variational(&state.map, &pos, state.ell, params.d, target) / (2.0 * PI);
    let ell_dot = length_ode_rhs(b0, state.ell, params);
    let dt = if ell_dot != 0.0 { dt.min(0.02 * state.ell / ell_dot.abs()) } else { dt };
    let ell_new = state.ell * (1.0 + dt * ell_dot / state.ell);
    let relaxed = relax_harmonic(&state.map, ell_new, &state.grid, params, target, params.tol_inner)?;
    Ok((FlowState { map: relaxed.map, ell: ell_new, t: state.t + dt, grid: state.grid.clone() }, dt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Termination {
    #[serde(rename = "t_max reached")]
    TMax,
    #[serde(rename = "ell_stop reached")]
    EllStop,
    #[serde(rename = "timestep underflow near degeneration")]
    Underflow,
    #[serde(rename = "step limit reached")]
    StepLimit,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::TMax => "t_max reached",
            Termination::EllStop => "ell_stop reached",
            Termination::Underflow => "timestep underflow near degeneration",
            Termination::StepLimit => "step limit reached",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<Record>,
    pub cause: Termination,
    pub final_state: FlowState,
    pub rejected: usize,
}

/// Integrate from `state` until a termination condition; `observe` sees every record and state.
pub fn run<F: FnMut(&Record, &FlowState)>(
    mut state: FlowState,
    params: &FlowParams,
    target: &TargetGeometry,
    mut observe: F,
) -> Result<RunOutput> {
    params.validate()?;
    let mut records = Vec::new();
    let mut rejected = 0;
    if params.t_max <= 0.0 {
        return Ok(RunOutput { records, cause: Termination::TMax, final_state: state, rejected });
    }
    if params.mode == Mode::Rescaled {
        let r = relax_harmonic(&state.map, state.ell, &state.grid, params, target, params.tol_inner)?;
        state.map = r.map;
    }
    let first = make_record(&state, params, target)?;
    observe(&first, &state);
    records.push(first);
    let mut dt = params.dt_init.min(params.dt_max);
    let mut steps = 0;
    let mut ev = match params.mode {
        Mode::Full => Some(evaluate(&state.map, state.ell, &state.grid, params.d, target)?),
        Mode::Rescaled => None,
    };
    let cause = loop {
        if state.ell <= params.ell_stop {
            break Termination::EllStop;
        }
        if state.t >= params.t_max * (1.0 - 1e-14) {
            break Termination::TMax;
        }
        if steps >= params.max_steps {
            break Termination::StepLimit;
        }
        let dt_try = dt.min(params.t_max - state.t).max(0.0);
        match params.mode {
            Mode::Full => {
                let e0 = ev.as_ref().expect("full mode caches the current evaluation");
                let ell_dot = length_ode_rhs(e0.b0, state.ell, params);
                let cap = if ell_dot != 0.0 { 0.1 * state.ell / ell_dot.abs() } else { f64::INFINITY };
                let dt_step = dt_try.min(cap);
                if dt_step < params.dt_min {
                    break Termination::Underflow;
                }
                let (outcome, e1) = step_full_from(&state, e0, dt_step, params, target)?;
                match outcome {
                    StepOutcome::Accepted(next, info) if info.err_est <= 2.0 * params.step_tol => {
                        steps += 1;
                        let mut rec = make_record(&next, params, target)?;
                        rec.de_dt_fd = Some(info.de_dt_fd);
                        rec.de_dt_model = Some(info.de_dt_model);
                        rec.metric_term = Some(info.metric_term);
                        check_finite(&rec)?;
                        state = next;
                        ev = e1;
                        observe(&rec, &state);
                        records.push(rec);
                        let ratio = (params.step_tol / info.err_est.max(1e-12)).sqrt();
                        dt = (info.dt * (params.safety * ratio).clamp(0.3, 2.0)).min(params.dt_max);
                    }
                    StepOutcome::Accepted(_, info) => {
                        rejected += 1;
                        let ratio = (params.step_tol / info.err_est).sqrt();
                        dt = dt_step * (params.safety * ratio).clamp(0.1, 0.5);
                    }
                    StepOutcome::Rejected(_) => {
                        rejected += 1;
                        dt = 0.5 * dt_step;
                    }
                }
            }
            Mode::Rescaled => {
                if dt_try < params.dt_min {
                    break Termination::Underflow;
                }
                match step_rescaled(&state, dt_try, params, target) {
                    Ok((next, used)) => {
                        steps += 1;
                        state = next;
                        let rec = make_record(&state, params, target)?;
                        check_finite(&rec)?;
                        observe(&rec, &state);
                        records.push(rec);
                        dt = (used * 2.0).min(params.dt_max);
                    }
                    Err(Error::InnerSolve { .. }) if dt_try > params.dt_min => {
                        rejected += 1;
                        dt = 0.5 * dt_try;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    };
    Ok(RunOutput { records, cause, final_state: state, rejected })
}

fn check_finite(r: &Record) -> Result<()> {
    let vals = [r.t, r.ell, r.energy, r.psi_mean, r.psi_std, r.b0, r.leash, r.v_max, r.tension_norm, r.log_rate];
    if vals.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("numeric failure: non-finite record".into()))
    }
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct RateFit {
    pub available: bool,
    pub reason: Option<String>,
    /// Slope of `log(d/dt log 1/ell)` against `log(1/ell)`.
    pub delta_fit: Option<f64>,
    /// Slope of `log(d/dt log 1/ell)` against `log log(1/ell)`.
    pub log_rate_exponent: Option<f64>,
    pub blowup_time_estimate: Option<f64>,
    pub points: usize,
    pub ell_hi: f64,
    pub ell_lo: f64,
}

fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Fit `d/dt log(1/ell)` over the last decade of `ell` in `(t, ell, rate)` samples.
pub fn fit_rates(samples: &[(f64, f64, f64)], mode: Mode) -> RateFit {
    let unavailable = |why: &str| RateFit { reason: Some(why.to_string()), ..Default::default() };
    if samples.len() < 20 {
        return unavailable("fewer than 20 records");
    }
    let ell_lo = samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let ell_hi = samples.iter().map(|s| s.1).fold(0.0, f64::max);
    if ell_hi < 10.0 * ell_lo {
        return unavailable("length spans less than a decade");
    }
    let window: Vec<&(f64, f64, f64)> = samples.iter().filter(|s| s.1 <= 10.0 * ell_lo && s.2 > 0.0).collect();
    if window.len() < 20 {
        return unavailable("fewer than 20 records with positive rate in the last decade");
    }
    let ll: Vec<f64> = window.iter().map(|s| (1.0 / s.1).ln()).collect();
    let lr: Vec<f64> = window.iter().map(|s| s.2.ln()).collect();
    let mut fit = RateFit { available: true, points: window.len(), ell_hi: 10.0 * ell_lo, ell_lo, ..Default::default() };
    let last = window[window.len() - 1];
    match mode {
        Mode::Full => {
            let (slope, icpt) = least_squares(&ll, &lr);
            fit.delta_fit = Some(slope);
            // d/dt L = e^c e^{k L} with L = log 1/ell reaches infinity after e^{-kL} / (k e^c)
            if slope > 0.0 {
                let l0 = (1.0 / last.1).ln();
                fit.blowup_time_estimate = Some(last.0 + (-slope * l0).exp() / (slope * icpt.exp()));
            }
        }
        Mode::Rescaled => {
            if ll.iter().any(|&x| x <= 0.0) {
                return unavailable("log(1/ell) not positive");
            }
            let lll: Vec<f64> = ll.iter().map(|x| x.ln()).collect();
            let (slope, icpt) = least_squares(&lll, &lr);
            fit.log_rate_exponent = Some(slope);
            // d/dt L = e^c L^p with p > 1 reaches infinity after L^{1-p} / ((p-1) e^c)
            if slope > 1.0 {
                let l0 = (1.0 / last.1).ln();
                fit.blowup_time_estimate = Some(last.0 + l0.powf(1.0 - slope) / ((slope - 1.0) * icpt.exp()));
            }
        }
    }
    fit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridKind;
    use crate::target::{WarpingKind, WarpingSpec};
    use approx::assert_relative_eq;

    fn poly() -> TargetGeometry {
        let w = WarpingSpec::new(WarpingKind::Poly { delta: 0.5, c3: 1.0, lambda: 64.0 }, 7.0).unwrap();
        TargetGeometry::new(1e6, w).unwrap()
    }

    #[test]
    fn rhs_modes_and_zero() {
        let mut p = FlowParams { eta: 2.0, ..Default::default() };
        assert_eq!(length_ode_rhs(0.0, 0.3, &p), 0.0);
        assert_relative_eq!(length_ode_rhs(0.5, 0.1, &p), -(2.0 * PI * PI / 0.1) * 0.5);
        p.mode = Mode::Rescaled;
        // d/dt log(1/ell) = pi ell^-2 psi for constant psi = 2 pi b0
        let (ell, psi) = (0.05, 1e-3);
        let rate = -length_ode_rhs(psi / (2.0 * PI), ell, &p) / ell;
        assert_relative_eq!(rate, PI * psi / (ell * ell), max_relative = 1e-14);
    }

    #[test]
    fn central_energy_of_unit_sphere_piece() {
        // r = sech s, z = tanh s has |w| = 1, so P = 1 and the energy on |s| <= a is 4 pi tanh a
        let t = poly();
        for (n, kind) in [(4096, GridKind::Uniform), (2048, GridKind::Clustered { core: 1.0 })] {
            let pos = Grid::new(kind, n).unwrap().positions(40.0);
            let m = SymmetricMap::from_profile(&pos, 1.2, |s| (50.0, 1.0 / s.cosh(), s.tanh()));
            for a in [1.0, 8.0] {
                assert_relative_eq!(central_w_energy(&m, &pos, &t, a), 4.0 * PI * a.tanh(), max_relative = 2e-4);
            }
        }
    }

    #[test]
    fn material_positions_keep_boundary_and_match_velocity() {
        let pos: Vec<f64> = (0..=20).map(|j| j as f64 * CollarMetric::cylinder(0.3, 1.0).unwrap().x / 20.0).collect();
        let x2 = CollarMetric::cylinder(0.31, 1.0).unwrap().x;
        let moved = material_positions(&pos, 0.3, 0.31, 1.0);
        assert_relative_eq!(moved[20], x2, max_relative = 1e-13);
        assert_eq!(moved[0], 0.0);
        let h = 1e-6;
        for &s in &pos[..20] {
            let fd = (material_positions(&[s], 0.3, 0.3 + h, 1.0)[0] - material_positions(&[s], 0.3, 0.3 - h, 1.0)[0]) / (2.0 * h);
            assert_relative_eq!(fd, material_velocity(s, 0.3), max_relative = 1e-6, epsilon = 1e-9);
        }
        let wd = (CollarMetric::cylinder(0.3 + h, 1.0).unwrap().x - CollarMetric::cylinder(0.3 - h, 1.0).unwrap().x) / (2.0 * h);
        assert_relative_eq!(width_derivative(0.3, 1.0), wd, max_relative = 1e-7);
        assert_relative_eq!(material_velocity(pos[20], 0.3), wd, max_relative = 1e-9);
    }

    #[test]
    fn ell_derivative_matches_projection_formula() {
        // dE/dell at frozen material points = (ell / 2 pi) int hopf rho^-2 over the full collar
        let t = poly();
        let ell = 0.2;
        let metric = CollarMetric::cylinder(ell, 1.0).unwrap();
        let grid = Grid::new(GridKind::Clustered { core: 1.0 }, 4096).unwrap();
        let pos = grid.positions(metric.x);
        let m = SymmetricMap::from_profile(&pos, 1.2, |s| {
            let u = s / metric.x;
            (20.0 * (1.0 - u * u), 0.25 + 0.5 * (1.0 - u * u), 1.2 * u + 0.1 * (PI * u).sin())
        });
        let (_, b0) = map::hopf(&m, &pos, &metric, &t);
        let expect = ell / (2.0 * PI) * b0 * metric.inv2_total();
        let got = energy_ell_derivative(&m, &pos, ell, 1.0, &t);
        assert_relative_eq!(got, expect, max_relative = 2e-3);
    }

    /// Bump negligible: `N~` is Euclidean to rounding.
    fn euclid() -> TargetGeometry {
        TargetGeometry {
            bump: crate::target::BumpMetric { c_n: 1e-300 },
            warping: WarpingSpec::new(WarpingKind::Flat, 0.0).unwrap(),
            r_max: 0.6,
            r_min: 0.3,
        }
    }

    fn linear_v_state(ell: f64, lam: f64, n: usize) -> FlowState {
        let grid = Grid::new(GridKind::Clustered { core: 1.0 }, n).unwrap();
        let x = CollarMetric::cylinder(ell, 1.0).unwrap().x;
        let pos = grid.positions(x);
        let map = SymmetricMap::from_profile(&pos, 1.5, |s| (lam * (x - s), 0.25 * (s / x).powi(4), 1.5 * s / x));
        FlowState { map, ell, t: 0.0, grid }
    }

    #[test]
    fn stationary_when_harmonic_and_conformal() {
        // catenoid r = a cosh s, z = a s: conformal and harmonic, so b0 = 0
        let t = euclid();
        let ell = 1.5;
        let grid = Grid::new(GridKind::Uniform, 512).unwrap();
        let x = CollarMetric::cylinder(ell, 1.0).unwrap().x;
        let a = 0.25 / x.cosh();
        let pos = grid.positions(x);
        let map = SymmetricMap::from_profile(&pos, a * x, |s| (0.0, a * s.cosh(), a * s));
        let p = FlowParams::default();
        let relaxed = relax_harmonic(&map, ell, &grid, &p, &t, 1e-10).unwrap().map;
        let metric = CollarMetric::cylinder(ell, 1.0).unwrap();
        let (_, b0) = map::hopf(&relaxed, &pos, &metric, &t);
        assert!(b0.abs() < 1e-3 * a * a, "b0 = {b0}");
        let mut st = FlowState { map: relaxed.clone(), ell, t: 0.0, grid };
        let mut dt = 1e-3;
        for _ in 0..100 {
            match step_full(&st, dt, &p, &t).unwrap() {
                StepOutcome::Accepted(next, _) => st = next,
                StepOutcome::Rejected(why) => panic!("{why}"),
            }
            dt *= 1.05;
        }
        assert!((st.ell - ell).abs() < 1e-5 * ell, "ell moved to {}", st.ell);
        for j in 0..=relaxed.half() {
            assert!((st.map.r[j] - relaxed.r[j]).abs() < 1e-4 * a);
            assert!((st.map.z[j] - relaxed.z[j]).abs() < 1e-4 * a);
        }
    }

    #[test]
    fn full_step_energy_balance_on_linear_v() {
        let t = euclid();
        let st = linear_v_state(0.3, 0.05, 256);
        let p = FlowParams::default();
        let mut dt = 1e-8;
        let mut checked = 0;
        let mut cur = st.clone();
        for _ in 0..20 {
            match step_full(&cur, dt, &p, &t).unwrap() {
                StepOutcome::Accepted(next, info) => {
                    assert!(next.ell < cur.ell);
                    assert!(info.metric_term <= 0.0);
                    let scale = info.de_dt_model.abs();
                    if info.err_est < 0.01 {
                        assert!((info.de_dt_fd - info.de_dt_model).abs() <= 1e-2 * scale, "{info:?}");
                        checked += 1;
                    }
                    cur = next;
                }
                StepOutcome::Rejected(why) => panic!("{why}"),
            }
            dt *= 1.2;
        }
        assert!(checked > 5);
    }

    #[test]
    fn relax_matches_analytic_harmonic_map() {
        // Euclidean target: v -> 0, z linear, r = R0 cosh s / cosh X
        let t = euclid();
        let ell = 0.4;
        let grid = Grid::new(GridKind::Clustered { core: 1.0 }, 1024).unwrap();
        let x = CollarMetric::cylinder(ell, 1.0).unwrap().x;
        let pos = grid.positions(x);
        let map = SymmetricMap::from_profile(&pos, 1.5, |s| (2.0 * (1.0 - (s / x).powi(2)), 0.0, 1.5 * s / x));
        let p = FlowParams::default();
        let r = relax_harmonic(&map, ell, &grid, &p, &t, 1e-9).unwrap();
        assert!(r.tension_norm <= 1e-9);
        for j in 0..=r.map.half() {
            assert!(r.map.v[j].abs() < 1e-8);
            assert_relative_eq!(r.map.z[j], 1.5 * pos[j] / x, epsilon = 1e-8);
            assert_relative_eq!(r.map.r[j], 0.25 * pos[j].cosh() / x.cosh(), epsilon = 1e-4 * 0.25);
        }
        let metric = CollarMetric::cylinder(ell, 1.0).unwrap();
        let obs = map::observables(&r.map, &pos, &metric, &t).unwrap();
        assert!(obs.psi_std / obs.psi_mean.abs() < 1e-3, "{} {}", obs.psi_std, obs.psi_mean);
        // closed form: 2 pi (z_s^2 + r_s^2 - r^2) with r_s^2 - r^2 = -(R0 / cosh X)^2
        let exact = 2.0 * PI * ((1.5 / x).powi(2) - (0.25 / x.cosh()).powi(2));
        assert_relative_eq!(psi_variational(&r.map, &pos, ell, 1.0, &t), exact, max_relative = 1e-4);
        assert_relative_eq!(obs.psi_mean, exact, max_relative = 1e-3);
        let again = relax_harmonic(&r.map, ell, &grid, &p, &t, 1e-9).unwrap();
        assert_eq!(again.iterations, 0);
    }

    #[test]
    fn t_max_zero_gives_empty_series() {
        let st = linear_v_state(0.3, 0.05, 64);
        let p = FlowParams { t_max: 0.0, ..Default::default() };
        let out = run(st, &p, &euclid(), |_, _| {}).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.cause, Termination::TMax);
    }

    #[test]
    fn fit_recovers_power_law_rate() {
        // dell/dt = -c ell^{1 - delta}: d/dt log(1/ell) = c ell^{-delta}
        let (c, delta) = (3.0, 0.5);
        let mut s = Vec::new();
        let (mut t, mut ell) = (0.0, 1e-2f64);
        while ell > 1e-4 {
            s.push((t, ell, c * ell.powf(-delta)));
            let dt = 0.01 * ell.powf(delta) / c;
            // exact flow: ell^delta decreases linearly at rate c delta
            ell = (ell.powf(delta) - c * delta * dt).powf(1.0 / delta);
            t += dt;
        }
        let f = fit_rates(&s, Mode::Full);
        assert!((f.delta_fit.unwrap() - delta).abs() < 1e-3);
        let last = s.last().unwrap();
        let t_star = last.0 + last.1.powf(delta) / (c * delta);
        assert_relative_eq!(f.blowup_time_estimate.unwrap(), t_star, max_relative = 1e-6);
    }

    #[test]
    fn fit_recovers_log_exponent() {
        let (c, p) = (0.7, 1.5);
        let s: Vec<(f64, f64, f64)> = (0..200)
            .map(|k| {
                let ell = 10f64.powf(-1.0 - 4.0 * k as f64 / 199.0);
                let l = (1.0 / ell).ln();
                (k as f64, ell, c * l.powf(p))
            })
            .collect();
        let f = fit_rates(&s, Mode::Rescaled);
        assert!((f.log_rate_exponent.unwrap() - p).abs() < 1e-3);
    }

    #[test]
    fn fit_reports_insufficient_range() {
        let s: Vec<(f64, f64, f64)> = (0..30).map(|k| (k as f64, 1e-2 * (1.0 - 0.01 * k as f64), 1.0)).collect();
        let f = fit_rates(&s, Mode::Full);
        assert!(!f.available && f.reason.is_some());
        assert!(!fit_rates(&s[..5], Mode::Full).available);
    }
}
