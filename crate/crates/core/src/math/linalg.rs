//! Factorizations: thin SVD (QR-preconditioned one-sided Jacobi) and Cholesky.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `a = u · diag(s) · vt`, singular values
/// in non-increasing order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.s)
    }

    pub fn reconstruct_with(&self, s: &[f64]) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, sv) in us.row_mut(i).iter_mut().zip(s) {
                *x *= sv;
            }
        }
        us.dot(&self.vt)
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.rows() < a.cols() {
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }
    if a.cols() == 0 {
        return Ok(Svd {
            u: Matrix::zeros(a.rows(), 0),
            s: Vec::new(),
            vt: Matrix::zeros(0, 0),
        });
    }
    if a.rows() > a.cols() {
        let (q, r) = householder_qr(a);
        let inner = jacobi_svd_square(&r)?;
        return Ok(Svd {
            u: q.dot(&inner.u),
            s: inner.s,
            vt: inner.vt,
        });
    }
    jacobi_svd_square(a)
}

/// One-sided (Hestenes) Jacobi on the columns of a square matrix.
fn jacobi_svd_square(a: &Matrix) -> Result<Svd> {
    let n = a.cols();
    // columns stored as rows for contiguous access
    let mut cols = a.transpose();
    let mut v = Matrix::identity(n);
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(cols.row(p), cols.row(p));
                let beta = dot(cols.row(q), cols.row(q));
                let gamma = dot(cols.row(p), cols.row(q));
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric {
            iterations: sweeps,
            msg: "Jacobi SVD did not converge".into(),
        });
    }
    let mut order: Vec<(usize, f64)> = (0..n)
        .map(|j| (j, dot(cols.row(j), cols.row(j)).sqrt()))
        .collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let m = a.rows();
    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &(j, sigma)) in order.iter().enumerate() {
        s.push(sigma);
        vt.row_mut(k).copy_from_slice(v.row(j));
        if sigma > 0.0 {
            for i in 0..m {
                u.set(i, k, cols.get(j, i) / sigma);
            }
        }
    }
    Ok(Svd { u, s, vt })
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.cols();
    let (head, tail) = m.data_mut().split_at_mut(q * n);
    let rp = &mut head[p * n..(p + 1) * n];
    let rq = &mut tail[..n];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Thin Householder QR of a tall matrix: `a = q · r`, `q` is `m×n`, `r` is `n×n`.
pub fn householder_qr(a: &Matrix) -> (Matrix, Matrix) {
    let (m, n) = a.shape();
    assert!(m >= n);
    // work on the transpose so each column is contiguous
    let mut w = a.transpose();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let col = &w.row(k)[k..];
        let norm = dot(col, col).sqrt();
        let mut vk = col.to_vec();
        if norm == 0.0 {
            reflectors.push(vec![0.0; m - k]);
            continue;
        }
        let alpha = if vk[0] >= 0.0 { -norm } else { norm };
        vk[0] -= alpha;
        let vnorm = dot(&vk, &vk).sqrt();
        if vnorm > 0.0 {
            vk.iter_mut().for_each(|x| *x /= vnorm);
        }
        for j in k..n {
            let cj = &mut w.row_mut(j)[k..];
            let proj = 2.0 * dot(&vk, cj);
            for (c, v) in cj.iter_mut().zip(&vk) {
                *c -= proj * v;
            }
        }
        reflectors.push(vk);
    }
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r.set(i, j, w.get(j, i));
        }
    }
    // q = H_0 H_1 ... H_{n-1} applied to the first n unit vectors
    let mut qt = Matrix::zeros(n, m);
    for j in 0..n {
        qt.set(j, j, 1.0);
    }
    for k in (0..n).rev() {
        let vk = &reflectors[k];
        for j in 0..n {
            let cj = &mut qt.row_mut(j)[k..];
            let proj = 2.0 * dot(vk, cj);
            for (c, v) in cj.iter_mut().zip(vk) {
                *c -= proj * v;
            }
        }
    }
    (qt.transpose(), r)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("cholesky of non-square matrix"));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let s = a.get(j, j) - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Numeric {
                iterations: j,
                msg: "matrix is not positive definite".into(),
            });
        }
        let d = s.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let v = (a.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j])) / d;
            l.set(i, j, v);
        }
    }
    Ok(l)
}

/// Solves `l lᵀ x = b` given the Cholesky factor `l`, for each column of `b`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    assert_eq!(b.rows(), n);
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Solves `l lᵀ x = b` for a single right-hand side.
pub fn cholesky_solve_vec(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in 0..n {
        let s = x[i] - dot(&l.row(i)[..i], &x[..i]);
        x[i] = s / l.get(i, i);
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = SplitMix64::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn svd_reconstructs_tall_wide_and_square() {
        for (r, c, seed) in [(12, 5, 1), (5, 12, 2), (7, 7, 3), (40, 3, 4)] {
            let a = random(r, c, seed);
            let d = svd(&a).unwrap();
            assert!(max_abs_diff(&d.reconstruct(), &a) < 1e-12, "{r}x{c}");
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
            let vvt = d.vt.dot_t(&d.vt);
            assert!(max_abs_diff(&vvt, &Matrix::identity(vvt.rows())) < 1e-12);
        }
    }

    #[test]
    fn svd_of_diagonal() {
        let d = svd(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert!((d.s[0] - 3.0).abs() < 1e-15 && (d.s[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn svd_of_rank_deficient() {
        let u = Matrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]);
        let v = Matrix::from_rows(&[[1.0, -1.0, 0.5]]);
        let a = u.dot(&v);
        let d = svd(&a).unwrap();
        assert!(d.s[1] < 1e-12 && d.s[2] < 1e-12);
        assert!(max_abs_diff(&d.reconstruct(), &a) < 1e-12);
    }

    #[test]
    fn qr_factors() {
        let a = random(9, 4, 8);
        let (q, r) = householder_qr(&a);
        assert!(max_abs_diff(&q.dot(&r), &a) < 1e-13);
        assert!(max_abs_diff(&q.t_dot(&q), &Matrix::identity(4)) < 1e-13);
    }

    #[test]
    fn cholesky_solves() {
        let b = random(5, 5, 9);
        let mut spd = b.t_dot(&b);
        for i in 0..5 {
            spd.set(i, i, spd.get(i, i) + 1.0);
        }
        let l = cholesky(&spd).unwrap();
        let rhs = random(5, 2, 10);
        let x = cholesky_solve(&l, &rhs);
        assert!(max_abs_diff(&spd.dot(&x), &rhs) < 1e-12);
        let xv = cholesky_solve_vec(&l, &rhs.column(0));
        assert!(xv.iter().zip(x.column(0)).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(cholesky(&a).is_err());
    }
}
