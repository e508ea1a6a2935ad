//! Block-tridiagonal solves with 3x3 blocks.

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const ZERO3: Mat3 = [[0.0; 3]; 3];

#[inline]
pub fn mat_vec(a: &Mat3, x: &Vec3) -> Vec3 {
    let mut y = [0.0; 3];
    for i in 0..3 {
        y[i] = a[i][0] * x[0] + a[i][1] * x[1] + a[i][2] * x[2];
    }
    y
}

#[inline]
pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = ZERO3;
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

#[inline]
pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = ZERO3;
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

/// Inverse by cofactors; `None` if (relatively) singular.
pub fn inverse(a: &Mat3) -> Option<Mat3> {
    let c00 = a[1][1] * a[2][2] - a[1][2] * a[2][1];
    let c01 = a[1][2] * a[2][0] - a[1][0] * a[2][2];
    let c02 = a[1][0] * a[2][1] - a[1][1] * a[2][0];
    let det = a[0][0] * c00 + a[0][1] * c01 + a[0][2] * c02;
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if !det.is_finite() || det.abs() <= 1e-300 || det.abs() < 1e-15 * scale.powi(3) * 1e-12 {
        return None;
    }
    let inv = 1.0 / det;
    Some([
        [c00 * inv, (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv, (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv],
        [c01 * inv, (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv, (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv],
        [c02 * inv, (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv, (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv],
    ])
}

/// System with `lower[i]` coupling row `i` to `i-1`, `diag[i]`, and `upper[i]` coupling to `i+1`.
#[derive(Debug, Clone)]
pub struct BlockTridiag {
    pub lower: Vec<Mat3>,
    pub diag: Vec<Mat3>,
    pub upper: Vec<Mat3>,
}

impl BlockTridiag {
    pub fn zeros(n: usize) -> Self {
        Self { lower: vec![ZERO3; n], diag: vec![ZERO3; n], upper: vec![ZERO3; n] }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, x: &[Vec3]) -> Vec<Vec3> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut y = mat_vec(&self.diag[i], &x[i]);
                if i > 0 {
                    let l = mat_vec(&self.lower[i], &x[i - 1]);
                    for k in 0..3 {
                        y[k] += l[k];
                    }
                }
                if i + 1 < n {
                    let u = mat_vec(&self.upper[i], &x[i + 1]);
                    for k in 0..3 {
                        y[k] += u[k];
                    }
                }
                y
            })
            .collect()
    }

    /// Block Thomas elimination; `None` on a singular pivot block.
    pub fn solve(&self, rhs: &[Vec3]) -> Option<Vec<Vec3>> {
        let n = self.len();
        let mut inv_piv: Vec<Mat3> = Vec::with_capacity(n);
        let mut d: Vec<Vec3> = rhs.to_vec();
        let mut piv = self.diag[0];
        for i in 0..n {
            if i > 0 {
                let l = mat_mul(&self.lower[i], &inv_piv[i - 1]);
                let lc = mat_mul(&l, &self.upper[i - 1]);
                piv = self.diag[i];
                for a in 0..3 {
                    for b in 0..3 {
                        piv[a][b] -= lc[a][b];
                    }
                }
                let ld = mat_vec(&l, &d[i - 1]);
                for k in 0..3 {
                    d[i][k] -= ld[k];
                }
            }
            inv_piv.push(inverse(&piv)?);
        }
        let mut x = vec![[0.0; 3]; n];
        for i in (0..n).rev() {
            let mut r = d[i];
            if i + 1 < n {
                let u = mat_vec(&self.upper[i], &x[i + 1]);
                for k in 0..3 {
                    r[k] -= u[k];
                }
            }
            x[i] = mat_vec(&inv_piv[i], &r);
            if x[i].iter().any(|v| !v.is_finite()) {
                return None;
            }
        }
        Some(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_round_trip() {
        let a = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let i = inverse(&a).unwrap();
        let p = mat_mul(&a, &i);
        for r in 0..3 {
            for c in 0..3 {
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((p[r][c] - e).abs() < 1e-14);
            }
        }
        assert!(inverse(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_none());
    }

    #[test]
    fn solve_matches_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 40;
        let mut m = BlockTridiag::zeros(n);
        for i in 0..n {
            for a in 0..3 {
                for b in 0..3 {
                    m.lower[i][a][b] = rng.gen_range(-1.0..1.0);
                    m.upper[i][a][b] = rng.gen_range(-1.0..1.0);
                    m.diag[i][a][b] = rng.gen_range(-1.0..1.0);
                }
                m.diag[i][a][a] += 10.0;
            }
        }
        let x: Vec<Vec3> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let b = m.apply(&x);
        let y = m.solve(&b).unwrap();
        for i in 0..n {
            for k in 0..3 {
                assert!((x[i][k] - y[i][k]).abs() < 1e-12);
            }
        }
    }
}
