//! LU factorization with partial pivoting and the quantities derived from it.
//!
//! All dense-matrix solves, log-determinants and inverses in the crate go
//! through [`Lu`]. Cost is O(D³) for the factorization and for the inverse.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pivots with magnitude at or below this are treated as singular.
pub const PIVOT_TOL: f64 = 1e-12;

/// Packed `P·A = L·U` factors (unit-diagonal `L` below the diagonal).
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Self> {
        let n = square_dim(a, "lu")?;
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > PIVOT_TOL) {
                return Err(Error::Singular {
                    pivot: k,
                    value: best,
                });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let (top, bottom) = lu.split_at_mut((k + 1) * n);
            let pivot_row = &top[k * n..];
            let pivot = pivot_row[k];
            for row in bottom.chunks_exact_mut(n) {
                let l = row[k] / pivot;
                row[k] = l;
                if l != 0.0 {
                    for (x, &u) in row[k + 1..].iter_mut().zip(&pivot_row[k + 1..]) {
                        *x -= l * u;
                    }
                }
            }
        }
        Ok(Self { n, lu, perm, sign })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Pivots of `U`, in elimination order.
    pub fn pivots(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.lu[i * self.n + i]).collect()
    }

    /// `(sign, log|det A|)`.
    pub fn slogdet(&self) -> (f64, f64) {
        let mut sign = self.sign;
        let mut logabs = 0.0;
        for p in self.pivots() {
            if p < 0.0 {
                sign = -sign;
            }
            logabs += p.abs().ln();
        }
        (sign, logabs)
    }

    /// Solves `A X = B` for a row-major `n × m` right-hand side.
    pub fn solve_matrix(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.n;
        if b.ndim() != 2 || b.rows() != n {
            return Err(Error::ShapeMismatch {
                op: "lu_solve",
                lhs: vec![n, n],
                rhs: b.shape().to_vec(),
            });
        }
        let m = b.cols();
        let mut x = vec![0.0; n * m];
        for (i, &pi) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(b.row(pi));
        }
        // forward substitution with unit-diagonal L
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for k in 0..i {
                let l = self.lu[i * n + k];
                if l != 0.0 {
                    for (a, &b) in xi.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                        *a -= l * b;
                    }
                }
            }
        }
        // back substitution with U
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                if u != 0.0 {
                    let off = (k - i - 1) * m;
                    for (a, &b) in xi.iter_mut().zip(&tail[off..off + m]) {
                        *a -= u * b;
                    }
                }
            }
            let d = self.lu[i * n + i];
            xi.iter_mut().for_each(|a| *a /= d);
        }
        Tensor::matrix(n, m, x)
    }

    pub fn inverse(&self) -> Tensor {
        self.solve_matrix(&Tensor::eye(self.n))
            .expect("identity has matching rows")
    }
}

fn square_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// `(sign, log|det A|)` via LU.
pub fn slogdet(a: &Tensor) -> Result<(f64, f64)> {
    Ok(Lu::factor(a)?.slogdet())
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    Ok(Lu::factor(a)?.inverse())
}

/// `(Aᵀ)⁻¹`, the gradient of `log|det A|` with respect to `A`.
pub fn inverse_transpose(a: &Tensor) -> Result<Tensor> {
    inverse(a)?.transpose()
}

/// Gradient contribution `upstream · (Wᵀ)⁻¹` of `log|det W|`. O(D³).
pub fn slogdet_adjoint(w: &Tensor, upstream: f64) -> Result<Tensor> {
    Ok(inverse_transpose(w)?.scale(upstream))
}

/// Orthonormalizes the columns of a square matrix (modified Gram-Schmidt),
/// fixing signs so the diagonal of the implied `R` is positive.
pub fn orthonormalize(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a, "orthonormalize")?;
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| a.get(i, j)).collect())
        .collect();
    for j in 0..n {
        for k in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let proj: f64 = done[k].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            for (x, q) in rest[0].iter_mut().zip(&done[k]) {
                *x -= proj * q;
            }
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > PIVOT_TOL) {
            return Err(Error::Singular {
                pivot: j,
                value: norm,
            });
        }
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut out = Tensor::zeros(&[n, n]);
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            out.set(i, j, *v);
        }
    }
    Ok(out)
}
