//! Symmetric maps `u = (v, r e^{i theta}, z)` on the collar and their observables.
//!
//! Only the half collar `s >= 0` is stored: `v` and `r` are even, `z` is odd.
//! Arrays are indexed by node `j = 0..=N` with node `0` at the center and node
//! `N` on the boundary. The discrete energy is
//!
//! ```text
//! E = 2 pi sum_e [Dv^2 + G_e (Dr^2 + Dz^2)] ds_e + 2 pi sum_j w_j G_j r_j^2
//! ```
//!
//! with edge differences `D`, `G = f(v) P(r^2 + z^2)`, `G_e` the edge mean of
//! `G`, and trapezoid weights `w_j`. The factor `2` accounts for the mirrored half.

use std::f64::consts::PI;

use serde::Serialize;

use crate::collar::CollarMetric;
use crate::error::{Error, Result};
use crate::linalg::{BlockTridiag, Vec3, ZERO3};
use crate::target::{NodeCoef, TargetGeometry};

/// Boundary radius `r(+-1)`.
pub const R0: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMap {
    pub v: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub z0: f64,
}

impl SymmetricMap {
    /// Sample `(v, r, z)` at the given half-collar positions and impose the boundary data.
    pub fn from_profile<F: Fn(f64) -> (f64, f64, f64)>(pos: &[f64], z0: f64, f: F) -> Self {
        let mut m = Self { v: vec![], r: vec![], z: vec![], z0 };
        for &s in pos {
            let (v, r, z) = f(s);
            m.v.push(v);
            m.r.push(r);
            m.z.push(z);
        }
        m.enforce_boundary();
        m
    }

    pub fn half(&self) -> usize {
        self.v.len() - 1
    }

    pub fn enforce_boundary(&mut self) {
        let n = self.half();
        self.v[n] = 0.0;
        self.r[n] = R0;
        self.z[n] = self.z0;
        self.z[0] = 0.0;
    }

    pub fn node(&self, j: usize) -> Vec3 {
        [self.v[j], self.r[j], self.z[j]]
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(&self.r).chain(&self.z).all(|x| x.is_finite())
    }

    /// Add `step` to the free nodes `0..N`.
    pub fn add_free(&mut self, step: &[Vec3]) {
        for (j, d) in step.iter().enumerate() {
            self.v[j] += d[0];
            self.r[j] += d[1];
            self.z[j] += d[2];
        }
        self.enforce_boundary();
    }
}

/// Trapezoid (dual-cell) weights on the half collar.
pub fn dual_weights(pos: &[f64]) -> Vec<f64> {
    let n = pos.len() - 1;
    (0..=n)
        .map(|j| {
            let left = if j > 0 { pos[j] - pos[j - 1] } else { 0.0 };
            let right = if j < n { pos[j + 1] - pos[j] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

fn coefs1(map: &SymmetricMap, target: &TargetGeometry) -> Vec<NodeCoef> {
    (0..=map.half()).map(|j| target.node_coef1(map.v[j], map.r[j], map.z[j])).collect()
}

/// Discrete energy of the full collar.
pub fn energy(map: &SymmetricMap, pos: &[f64], target: &TargetGeometry) -> f64 {
    energy_with(map, pos, &coefs1(map, target))
}

fn energy_with(map: &SymmetricMap, pos: &[f64], c: &[NodeCoef]) -> f64 {
    let n = map.half();
    let mut acc = 0.0;
    for j in 0..n {
        let ds = pos[j + 1] - pos[j];
        let dv = map.v[j + 1] - map.v[j];
        let dr = map.r[j + 1] - map.r[j];
        let dz = map.z[j + 1] - map.z[j];
        let ge = 0.5 * (c[j].g + c[j + 1].g);
        acc += (dv * dv + ge * (dr * dr + dz * dz)) / ds;
    }
    let w = dual_weights(pos);
    for j in 0..=n {
        acc += w[j] * c[j].g * map.r[j] * map.r[j];
    }
    2.0 * PI * acc
}

/// Gradient of half the discrete energy with respect to node values (all nodes).
pub fn gradient(map: &SymmetricMap, pos: &[f64], target: &TargetGeometry) -> Vec<Vec3> {
    gradient_with(map, pos, &coefs1(map, target))
}

fn gradient_with(map: &SymmetricMap, pos: &[f64], c: &[NodeCoef]) -> Vec<Vec3> {
    let n = map.half();
    let mut g = vec![[0.0; 3]; n + 1];
    for j in 0..n {
        let k = j + 1;
        let a = PI / (pos[k] - pos[j]);
        let dv = map.v[k] - map.v[j];
        let dr = map.r[k] - map.r[j];
        let dz = map.z[k] - map.z[j];
        let sq = dr * dr + dz * dz;
        let ge = 0.5 * (c[j].g + c[k].g);
        g[k][0] += a * (2.0 * dv + 0.5 * c[k].d[0] * sq);
        g[k][1] += a * (2.0 * ge * dr + 0.5 * c[k].d[1] * sq);
        g[k][2] += a * (2.0 * ge * dz + 0.5 * c[k].d[2] * sq);
        g[j][0] += a * (-2.0 * dv + 0.5 * c[j].d[0] * sq);
        g[j][1] += a * (-2.0 * ge * dr + 0.5 * c[j].d[1] * sq);
        g[j][2] += a * (-2.0 * ge * dz + 0.5 * c[j].d[2] * sq);
    }
    let w = dual_weights(pos);
    for j in 0..=n {
        let r = map.r[j];
        let pw = PI * w[j];
        g[j][0] += pw * c[j].d[0] * r * r;
        g[j][1] += pw * (c[j].d[1] * r * r + 2.0 * c[j].g * r);
        g[j][2] += pw * c[j].d[2] * r * r;
    }
    g
}

/// Hessian of half the discrete energy over the free nodes `0..N`.
pub fn hessian(map: &SymmetricMap, pos: &[f64], target: &TargetGeometry) -> BlockTridiag {
    let n = map.half();
    let c: Vec<NodeCoef> = (0..=n).map(|j| target.node_coef2(map.v[j], map.r[j], map.z[j])).collect();
    let mut h = BlockTridiag::zeros(n);
    for j in 0..n {
        let k = j + 1;
        let a = PI / (pos[k] - pos[j]);
        let du = [map.v[k] - map.v[j], map.r[k] - map.r[j], map.z[k] - map.z[j]];
        let sq = du[1] * du[1] + du[2] * du[2];
        let ge = 0.5 * (c[j].g + c[k].g);
        for (node, sigma) in [(j, -1.0), (k, 1.0)] {
            if node == n {
                continue;
            }
            let cn = &c[node];
            let mut b = ZERO3;
            b[0][0] = 2.0 + 0.5 * cn.dd[0][0] * sq;
            b[0][1] = 0.5 * cn.dd[0][1] * sq + sigma * cn.d[0] * du[1];
            b[0][2] = 0.5 * cn.dd[0][2] * sq + sigma * cn.d[0] * du[2];
            b[1][1] = 2.0 * ge + 2.0 * sigma * cn.d[1] * du[1] + 0.5 * cn.dd[1][1] * sq;
            b[2][2] = 2.0 * ge + 2.0 * sigma * cn.d[2] * du[2] + 0.5 * cn.dd[2][2] * sq;
            b[1][2] = 0.5 * cn.dd[1][2] * sq + sigma * (cn.d[2] * du[1] + cn.d[1] * du[2]);
            b[1][0] = b[0][1];
            b[2][0] = b[0][2];
            b[2][1] = b[1][2];
            for p in 0..3 {
                for q in 0..3 {
                    h.diag[node][p][q] += a * b[p][q];
                }
            }
        }
        if k < n {
            // d/du_j of the gradient at node k
            let (cj, ck) = (&c[j], &c[k]);
            let mut b = ZERO3;
            b[0][0] = -2.0;
            b[0][1] = -ck.d[0] * du[1];
            b[0][2] = -ck.d[0] * du[2];
            b[1][0] = cj.d[0] * du[1];
            b[1][1] = cj.d[1] * du[1] - 2.0 * ge - ck.d[1] * du[1];
            b[1][2] = cj.d[2] * du[1] - ck.d[1] * du[2];
            b[2][0] = cj.d[0] * du[2];
            b[2][1] = cj.d[1] * du[2] - ck.d[2] * du[1];
            b[2][2] = cj.d[2] * du[2] - 2.0 * ge - ck.d[2] * du[2];
            for p in 0..3 {
                for q in 0..3 {
                    h.lower[k][p][q] += a * b[p][q];
                    h.upper[j][q][p] += a * b[p][q];
                }
            }
        }
    }
    let w = dual_weights(pos);
    for j in 0..n {
        let r = map.r[j];
        let cj = &c[j];
        let pw = PI * w[j];
        let mut b = ZERO3;
        b[0][0] = cj.dd[0][0] * r * r;
        b[0][1] = cj.dd[0][1] * r * r + 2.0 * cj.d[0] * r;
        b[0][2] = cj.dd[0][2] * r * r;
        b[1][1] = cj.dd[1][1] * r * r + 4.0 * cj.d[1] * r + 2.0 * cj.g;
        b[1][2] = cj.dd[1][2] * r * r + 2.0 * cj.d[2] * r;
        b[2][2] = cj.dd[2][2] * r * r;
        b[1][0] = b[0][1];
        b[2][0] = b[0][2];
        b[2][1] = b[1][2];
        for p in 0..3 {
            for q in 0..3 {
                h.diag[j][p][q] += pw * b[p][q];
            }
        }
    }
    h
}

/// Diagonal mass of the half collar on the free nodes: `2 pi rho^2 w (1, G, G)`.
pub fn mass(map: &SymmetricMap, pos: &[f64], metric: &CollarMetric, target: &TargetGeometry) -> Vec<Vec3> {
    let w = dual_weights(pos);
    (0..map.half())
        .map(|j| {
            let g = target.node_coef1(map.v[j], map.r[j], map.z[j]).g;
            let m = 2.0 * PI * metric.rho_raw(pos[j]).powi(2) * w[j];
            [m, m * g, m * g]
        })
        .collect()
}

/// Tension field on the free nodes and its `L^2(g)` norm over the full collar.
pub fn tension(
    map: &SymmetricMap,
    pos: &[f64],
    metric: &CollarMetric,
    target: &TargetGeometry,
) -> (Vec<Vec3>, f64) {
    let g = gradient(map, pos, target);
    let m = mass(map, pos, metric, target);
    tension_from(&g, &m)
}

pub(crate) fn tension_from(g: &[Vec3], m: &[Vec3]) -> (Vec<Vec3>, f64) {
    let mut tau = vec![[0.0; 3]; m.len()];
    let mut acc = 0.0;
    for j in 0..m.len() {
        for k in 0..3 {
            if j == 0 && k == 2 {
                continue;
            }
            tau[j][k] = -g[j][k] / m[j][k];
            acc += m[j][k] * tau[j][k] * tau[j][k];
        }
    }
    (tau, (2.0 * acc).sqrt())
}

/// Per-node `|u_s|^2` (metric of the target), interpolated from edges.
pub fn us_squared(map: &SymmetricMap, pos: &[f64], target: &TargetGeometry) -> Vec<f64> {
    let c = coefs1(map, target);
    us_squared_with(map, pos, &c)
}

fn edge_us2(map: &SymmetricMap, pos: &[f64], c: &[NodeCoef], j: usize) -> f64 {
    let ds = pos[j + 1] - pos[j];
    let dv = (map.v[j + 1] - map.v[j]) / ds;
    let dr = (map.r[j + 1] - map.r[j]) / ds;
    let dz = (map.z[j + 1] - map.z[j]) / ds;
    dv * dv + 0.5 * (c[j].g + c[j + 1].g) * (dr * dr + dz * dz)
}

fn us_squared_with(map: &SymmetricMap, pos: &[f64], c: &[NodeCoef]) -> Vec<f64> {
    let n = map.half();
    let e: Vec<f64> = (0..n).map(|j| edge_us2(map, pos, c, j)).collect();
    (0..=n)
        .map(|j| {
            if j == 0 {
                e[0]
            } else if j == n {
                // linear extrapolation from the last two edge midpoints
                let h1 = pos[n] - pos[n - 1];
                let h2 = pos[n - 1] - pos[n - 2];
                e[n - 1] + (e[n - 1] - e[n - 2]) * h1 / (h1 + h2)
            } else {
                let hl = pos[j] - pos[j - 1];
                let hr = pos[j + 1] - pos[j];
                (hr * e[j - 1] + hl * e[j]) / (hl + hr)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MapObservables {
    pub energy: f64,
    pub psi: Vec<f64>,
    pub psi_mean: f64,
    pub psi_std: f64,
    pub b0: f64,
    pub theta: Vec<f64>,
    pub leash: f64,
    pub v_max: f64,
    pub area_w: f64,
    pub tension_norm: f64,
}

/// Hopf function profile `psi = 2 pi (|u_s|^2 - |u_theta|^2)` and the projection coefficient `b0`.
pub fn hopf(map: &SymmetricMap, pos: &[f64], metric: &CollarMetric, target: &TargetGeometry) -> (Vec<f64>, f64) {
    let c = coefs1(map, target);
    hopf_with(map, pos, metric, &c)
}

fn hopf_with(map: &SymmetricMap, pos: &[f64], metric: &CollarMetric, c: &[NodeCoef]) -> (Vec<f64>, f64) {
    let us2 = us_squared_with(map, pos, c);
    let w = dual_weights(pos);
    let mut num = 0.0;
    let mut den = 0.0;
    let psi: Vec<f64> = (0..=map.half())
        .map(|j| {
            let hopf = us2[j] - c[j].g * map.r[j] * map.r[j];
            let wt = w[j] * metric.rho_inv2_raw(pos[j]);
            num += wt * hopf;
            den += wt;
            2.0 * PI * hopf
        })
        .collect();
    (psi, num / den)
}

/// Angular energy profile `theta(s) = 2 pi G r^2`.
pub fn angular_energy(map: &SymmetricMap, target: &TargetGeometry) -> Vec<f64> {
    (0..=map.half())
        .map(|j| 2.0 * PI * target.node_coef1(map.v[j], map.r[j], map.z[j]).g * map.r[j] * map.r[j])
        .collect()
}

/// Leash length over the full collar.
pub fn leash(map: &SymmetricMap, pos: &[f64], target: &TargetGeometry) -> f64 {
    let c = coefs1(map, target);
    2.0 * (0..map.half()).map(|j| (pos[j + 1] - pos[j]) * edge_us2(map, pos, &c, j).sqrt()).sum::<f64>()
}

/// Area of the `w`-component in `(N~, g_N~)`.
pub fn area_w(map: &SymmetricMap, target: &TargetGeometry) -> f64 {
    let mut acc = 0.0;
    for j in 0..map.half() {
        let dr = map.r[j + 1] - map.r[j];
        let dz = map.z[j + 1] - map.z[j];
        let rm = 0.5 * (map.r[j].abs() + map.r[j + 1].abs());
        let zm = 0.5 * (map.z[j] + map.z[j + 1]);
        let p = target.bump.factor_sq(rm * rm + zm * zm).0;
        acc += p * rm * (dr * dr + dz * dz).sqrt();
    }
    2.0 * 2.0 * PI * acc
}

/// `true` iff no node of `w` sits near `|x| = r_max` at polar angle in `[pi/4, 3pi/4]`.
pub fn disjointness_check(map: &SymmetricMap, target: &TargetGeometry) -> bool {
    (0..=map.half()).all(|j| {
        let (r, z) = (map.r[j].abs(), map.z[j]);
        let rad = (r * r + z * z).sqrt();
        let angle = r.atan2(z);
        !((rad - target.r_max).abs() <= 1e-3 && (PI / 4.0 - 1e-12..=3.0 * PI / 4.0 + 1e-12).contains(&angle))
    })
}

/// All observables of one state.
pub fn observables(
    map: &SymmetricMap,
    pos: &[f64],
    metric: &CollarMetric,
    target: &TargetGeometry,
) -> Result<MapObservables> {
    if !map.is_finite() {
        return Err(Error::Numeric("non-finite map values".into()));
    }
    let c = coefs1(map, target);
    let energy = energy_with(map, pos, &c);
    let (psi, b0) = hopf_with(map, pos, metric, &c);
    let w = dual_weights(pos);
    let x = pos[pos.len() - 1];
    let psi_mean = psi.iter().zip(&w).map(|(p, w)| p * w).sum::<f64>() / x;
    let var = psi.iter().zip(&w).map(|(p, w)| (p - psi_mean).powi(2) * w).sum::<f64>() / x;
    let grad = gradient_with(map, pos, &c);
    let m = mass(map, pos, metric, target);
    let (_, tension_norm) = tension_from(&grad, &m);
    let obs = MapObservables {
        energy,
        psi,
        psi_mean,
        psi_std: var.sqrt(),
        b0,
        theta: angular_energy(map, target),
        leash: leash(map, pos, target),
        v_max: map.v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        area_w: area_w(map, target),
        tension_norm,
    };
    if !(obs.energy.is_finite() && obs.b0.is_finite() && obs.tension_norm.is_finite()) {
        return Err(Error::Numeric("non-finite observable".into()));
    }
    Ok(obs)
}

/// Cumulative energy `C(s) = int_0^s e` at the nodes, with `e = pi (|u_s|^2 + G r^2)`.
fn cumulative_energy(map: &SymmetricMap, pos: &[f64], target: &TargetGeometry) -> Vec<f64> {
    let c = coefs1(map, target);
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for j in 0..map.half() {
        let ds = pos[j + 1] - pos[j];
        let pot = 0.5 * (c[j].g * map.r[j].powi(2) + c[j + 1].g * map.r[j + 1].powi(2));
        acc += PI * ds * (edge_us2(map, pos, &c, j) + pot);
        out.push(acc);
    }
    out
}

/// Full-collar node positions and the matching half-grid indices.
fn full_nodes(pos: &[f64]) -> Vec<(f64, usize)> {
    let n = pos.len() - 1;
    let mut out: Vec<(f64, usize)> = (1..=n).rev().map(|j| (-pos[j], j)).collect();
    out.extend((0..=n).map(|j| (pos[j], j)));
    out
}

fn interp_cumulative(pos: &[f64], cum: &[f64], s: f64) -> f64 {
    // odd extension of the half-collar cumulative energy
    let a = s.abs().min(pos[pos.len() - 1]);
    let k = pos.partition_point(|&p| p < a).clamp(1, pos.len() - 1);
    let t = (a - pos[k - 1]) / (pos[k] - pos[k - 1]);
    let val = cum[k - 1] + t * (cum[k] - cum[k - 1]);
    s.signum() * val
}

/// Energy on the window `[s - 1, s + 1]` of the full collar.
pub fn window_energy(pos: &[f64], cum: &[f64], s: f64) -> f64 {
    interp_cumulative(pos, cum, s + 1.0) - interp_cumulative(pos, cum, s - 1.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionSets {
    pub a: Vec<Interval>,
    pub b: Vec<Interval>,
    pub b_tilde: Vec<Interval>,
    pub b_complement: Vec<Interval>,
}

fn runs(nodes: &[(f64, usize)], flag: &[bool]) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut start: Option<f64> = None;
    for (i, &(s, _)) in nodes.iter().enumerate() {
        match (flag[i], start) {
            (true, None) => start = Some(s),
            (false, Some(lo)) => {
                out.push(Interval { lo, hi: nodes[i - 1].0 });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(lo) = start {
        out.push(Interval { lo, hi: nodes[nodes.len() - 1].0 });
    }
    out
}

fn dist_to(set: &[Interval], s: f64) -> f64 {
    set.iter()
        .map(|iv| if s < iv.lo { iv.lo - s } else if s > iv.hi { s - iv.hi } else { 0.0 })
        .fold(f64::INFINITY, f64::min)
}

/// High-energy set and the two distance-defined sets of the collar decomposition.
pub fn region_sets(
    map: &SymmetricMap,
    pos: &[f64],
    metric: &CollarMetric,
    target: &TargetGeometry,
    eps0: f64,
) -> Result<RegionSets> {
    let x = metric.x;
    if x < 2.0 {
        return Err(Error::CollarTooShort(format!("X = {x:.4} < 2 for the collar decomposition")));
    }
    let cum = cumulative_energy(map, pos, target);
    let nodes = full_nodes(pos);
    let in_a: Vec<bool> = nodes
        .iter()
        .map(|&(s, _)| s.abs() >= x - 1.0 || window_energy(pos, &cum, s) >= eps0)
        .collect();
    let mut a = runs(&nodes, &in_a);
    // end bands are exact intervals
    if let Some(first) = a.first_mut() {
        first.lo = -x;
    }
    if let Some(last) = a.last_mut() {
        last.hi = x;
    }
    let lfac = 4.0 * (1.0 / metric.ell).ln() + 2.0;
    let in_b: Vec<bool> = nodes
        .iter()
        .map(|&(s, _)| dist_to(&a, s) >= 4.0 * (1.0 / metric.rho_raw(s)).ln() + 2.0)
        .collect();
    let in_bt: Vec<bool> = nodes.iter().map(|&(s, _)| dist_to(&a, s) >= lfac).collect();
    let not_b: Vec<bool> = in_b.iter().map(|b| !b).collect();
    Ok(RegionSets {
        a,
        b: runs(&nodes, &in_b),
        b_tilde: runs(&nodes, &in_bt),
        b_complement: runs(&nodes, &not_b),
    })
}

/// Distance from each half-collar node to the high-energy set.
pub fn distance_profile(pos: &[f64], sets: &RegionSets) -> Vec<f64> {
    pos.iter().map(|&s| dist_to(&sets.a, s)).collect()
}

/// Full-collar tabular snapshot rows `(xi, s, v, r, z, psi, theta)`.
pub fn snapshot_rows(map: &SymmetricMap, pos: &[f64], psi: &[f64], theta: &[f64]) -> Vec<[f64; 7]> {
    let n = map.half();
    let x = pos[n];
    full_nodes(pos)
        .into_iter()
        .map(|(s, j)| {
            let sign = if s < 0.0 { -1.0 } else { 1.0 };
            [s / x, s, map.v[j], map.r[j], sign * map.z[j], psi[j], theta[j]]
        })
        .collect()
}
