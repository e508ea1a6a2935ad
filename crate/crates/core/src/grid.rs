//! Half-collar node families `s_j = S(xi_j; X)`, `xi_j = j / N`.
//!
//! `Uniform` is the linear stretch `S = xi X`. `Clustered { core }` refines
//! near the center and near the collar end: the node density in `s` is
//! proportional to `1/sqrt(core^2 + s^2) + 1/sqrt(core^2 + (X - s)^2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GridKind {
    Uniform,
    Clustered { core: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub kind: GridKind,
    /// Number of intervals on `[0, X]`; the full grid has `2 * half` intervals.
    pub half: usize,
}

fn eta(s: f64, x: f64, a: f64) -> f64 {
    (s / a).asinh() - ((x - s) / a).asinh() + (x / a).asinh()
}

fn eta_s(s: f64, x: f64, a: f64) -> f64 {
    1.0 / (a * a + s * s).sqrt() + 1.0 / (a * a + (x - s) * (x - s)).sqrt()
}

impl Grid {
    /// `n` is the total number of intervals on `[-X, X]` and must be even.
    pub fn new(kind: GridKind, n: usize) -> Result<Self> {
        if n < 8 || n % 2 != 0 {
            return Err(Error::Domain(format!("grid size n must be even and >= 8, got {n}")));
        }
        if let GridKind::Clustered { core } = kind {
            if !(core > 0.0) {
                return Err(Error::Domain(format!("grid core length must be positive, got {core}")));
            }
        }
        Ok(Self { kind, half: n / 2 })
    }

    pub fn n(&self) -> usize {
        2 * self.half
    }

    pub fn xi(&self, j: usize) -> f64 {
        j as f64 / self.half as f64
    }

    /// Node positions on `[0, X]`.
    pub fn positions(&self, x: f64) -> Vec<f64> {
        let n = self.half;
        match self.kind {
            GridKind::Uniform => (0..=n).map(|j| x * j as f64 / n as f64).collect(),
            GridKind::Clustered { core } => {
                let total = 2.0 * (x / core).asinh();
                let mut out = Vec::with_capacity(n + 1);
                let mut guess = 0.0;
                for j in 0..=n {
                    let target = total * j as f64 / n as f64;
                    let s = if j == 0 {
                        0.0
                    } else if j == n {
                        x
                    } else {
                        invert(target, x, core, guess)
                    };
                    out.push(s);
                    guess = s;
                }
                out
            }
        }
    }

    /// `dS_j/dX` at fixed `xi_j`.
    pub fn d_positions_dx(&self, x: f64, pos: &[f64]) -> Vec<f64> {
        let n = self.half;
        match self.kind {
            GridKind::Uniform => (0..=n).map(|j| j as f64 / n as f64).collect(),
            GridKind::Clustered { core } => {
                let a = core;
                let dtotal = 2.0 / (a * a + x * x).sqrt();
                (0..=n)
                    .map(|j| {
                        let s = pos[j];
                        let xi = j as f64 / n as f64;
                        let deta_dx = -1.0 / (a * a + (x - s) * (x - s)).sqrt() + 1.0 / (a * a + x * x).sqrt();
                        -(deta_dx - xi * dtotal) / eta_s(s, x, a)
                    })
                    .collect()
            }
        }
    }
}

/// Safeguarded Newton for `eta(s) = target` on `[lower, x]`.
fn invert(target: f64, x: f64, a: f64, lower: f64) -> f64 {
    let (mut lo, mut hi) = (lower, x);
    let mut s = lower;
    for _ in 0..100 {
        let f = eta(s, x, a) - target;
        if f > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let mut next = s - f / eta_s(s, x, a);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - s).abs() <= 2e-16 * next.abs().max(1.0);
        s = next;
        if done || hi - lo <= 2e-16 * hi.max(1.0) {
            break;
        }
    }
    s
}
