//! Forward/backward kernels for the transformer blocks.
//!
//! Every kernel is a pure function. Backward functions take the cached
//! forward quantities they need and return input and parameter gradients.

use super::matrix::{axpy, dot, BoolMatrix, Matrix};
use crate::error::{Error, Result};

/// Row-wise softmax. Entries equal to `-inf` map to exactly zero.
pub fn softmax_row(scores: &Matrix) -> Result<Matrix> {
    let mut out = scores.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i)).map_err(|_| Error::FullyMaskedRow { row: i })?;
    }
    Ok(out)
}

fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    Ok(())
}

/// Scaled dot-product attention `softmax(q kᵀ / √d_k) v`, with key positions
/// where `mask` is false pushed to `-inf` before the softmax.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: Option<&BoolMatrix>) -> Result<Matrix> {
    Ok(attention_forward(q, k, v, mask)?.0)
}

/// Attention returning the probability matrix for the backward pass.
pub fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&BoolMatrix>,
) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() {
        return Err(Error::dim("attention: q and k widths differ"));
    }
    if k.rows() != v.rows() {
        return Err(Error::dim("attention: k and v lengths differ"));
    }
    if let Some(m) = mask {
        if m.rows() != q.rows() || m.cols() != k.rows() {
            return Err(Error::dim("attention: mask shape"));
        }
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.dot_t(k);
    scores.scale(scale);
    if let Some(m) = mask {
        for i in 0..scores.rows() {
            for j in 0..scores.cols() {
                if !m.get(i, j) {
                    scores.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
    }
    let probs = softmax_row(&scores)?;
    let out = probs.dot(v);
    Ok((out, probs))
}

/// Gradients of attention with respect to `q`, `k`, `v`.
pub fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &Matrix,
    d_out: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let d_v = probs.t_dot(d_out);
    let mut d_scores = d_out.dot_t(v);
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let row = d_scores.row_mut(i);
        let inner = dot(p, row);
        for (g, &pj) in row.iter_mut().zip(p) {
            *g = pj * (*g - inner) * scale;
        }
    }
    let d_q = d_scores.dot(k);
    let d_k = d_scores.t_dot(q);
    (d_q, d_k, d_v)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

/// Row-wise layer normalization with affine `gamma`, `beta` (each length = cols).
pub fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, LayerNormCache) {
    let n = x.cols();
    assert_eq!(gamma.len(), n);
    assert_eq!(beta.len(), n);
    let mut xhat = x.clone();
    let mut y = x.zeros_like();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
        let yr = y.row_mut(i);
        for j in 0..n {
            yr[j] = xhat.get(i, j) * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    d_y: &Matrix,
    cache: &LayerNormCache,
    gamma: &[f64],
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let n = d_y.cols();
    let mut d_x = d_y.zeros_like();
    let mut d_gamma = vec![0.0; n];
    let mut d_beta = vec![0.0; n];
    let mut g = vec![0.0; n];
    for i in 0..d_y.rows() {
        let dy = d_y.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..n {
            d_gamma[j] += dy[j] * xh[j];
            d_beta[j] += dy[j];
            g[j] = dy[j] * gamma[j];
        }
        let mean_g = g.iter().sum::<f64>() / n as f64;
        let mean_gx = dot(&g, xh) / n as f64;
        let is = cache.inv_std[i];
        let dx = d_x.row_mut(i);
        for j in 0..n {
            dx[j] = is * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    (d_x, d_gamma, d_beta)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_forward(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    y
}

pub fn gelu_backward(x: &Matrix, d_y: &Matrix) -> Matrix {
    let mut d_x = d_y.clone();
    for (g, &xi) in d_x.data_mut().iter_mut().zip(x.data()) {
        *g *= gelu_grad(xi);
    }
    d_x
}

/// `y = x · w + b` where `w` is `in × out` and `b` has length `out`.
pub fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    assert_eq!(b.len(), w.cols());
    let mut y = Matrix::zeros(x.rows(), w.cols());
    for i in 0..y.rows() {
        y.row_mut(i).copy_from_slice(b);
    }
    super::matrix::gemm_acc(x, w, &mut y);
    y
}

/// Returns `dx` and accumulates `dw`, `db` in place.
pub fn linear_backward(x: &Matrix, w: &Matrix, d_y: &Matrix, d_w: &mut Matrix, d_b: &mut [f64]) -> Matrix {
    x.t_dot_acc(d_y, d_w);
    for i in 0..d_y.rows() {
        axpy(1.0, d_y.row(i), d_b);
    }
    d_y.dot_t(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn uniform_softmax() {
        let s = softmax_row(&Matrix::from_rows(&[[0.0, 0.0, 0.0]])).unwrap();
        for &p in s.row(0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_entry_is_exact_zero() {
        let s = softmax_row(&Matrix::from_rows(&[[f64::NEG_INFINITY, 0.0]])).unwrap();
        assert_eq!(s.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn two_entry_closed_form() {
        let s = softmax_row(&Matrix::from_rows(&[[1.0, 2.0]])).unwrap();
        let e = std::f64::consts::E;
        assert!((s.get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s.get(0, 1) - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_error() {
        let s = Matrix::from_rows(&[[0.0, 1.0], [f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        assert!(matches!(softmax_row(&s), Err(Error::FullyMaskedRow { row: 1 })));
    }

    #[test]
    fn single_admissible_key_returns_its_value() {
        let q = Matrix::from_rows(&[[0.3, -0.2]]);
        let k = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]);
        let v = Matrix::from_rows(&[[5.0, -1.0], [7.0, 3.0]]);
        let mut mask = BoolMatrix::filled(1, 2, true);
        mask.set(0, 1, false);
        let out = attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn all_true_mask_matches_unmasked_bitwise() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let (q, k, v) = (random(5, 4, &mut rng), random(6, 4, &mut rng), random(6, 3, &mut rng));
        let mask = BoolMatrix::filled(5, 6, true);
        let a = attention(&q, &k, &v, Some(&mask)).unwrap();
        let b = attention(&q, &k, &v, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn identity_inputs_match_brute_force() {
        // q = k = v = I2: scores = I/√2, each row softmax([1/√2, 0]) in rotated order
        let i2 = Matrix::identity(2);
        let out = attention(&i2, &i2, &i2, None).unwrap();
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let hi = a.exp() / (a.exp() + 1.0);
        let lo = 1.0 / (a.exp() + 1.0);
        let expected = [[hi, lo], [lo, hi]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((out.get(i, j) - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = Matrix::from_rows(&[[2.5, 2.5, 2.5, 2.5]]);
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = SplitMix64::seed_from_u64(11);
        let x = random(3, 4, &mut rng);
        let w = random(4, 5, &mut rng);
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = random(3, 5, &mut rng);
        let loss = |x: &Matrix, w: &Matrix, b: &[f64]| -> f64 {
            linear(x, w, b).data().iter().zip(probe.data()).map(|(a, c)| a * c).sum()
        };
        let mut d_w = w.zeros_like();
        let mut d_b = vec![0.0; 5];
        let d_x = linear_backward(&x, &w, &probe, &mut d_w, &mut d_b);
        let h = 1e-5;
        for idx in 0..x.data().len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!(rel_err(fd, d_x.data()[idx]) < 1e-6);
        }
        for idx in 0..w.data().len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[idx] += h;
            wm.data_mut()[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!(rel_err(fd, d_w.data()[idx]) < 1e-6);
        }
        for idx in 0..5 {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[idx] += h;
            bm[idx] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!(rel_err(fd, d_b[idx]) < 1e-6);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let x = random(3, 6, &mut rng);
        let gamma: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let probe = random(3, 6, &mut rng);
        let loss = |x: &Matrix, g: &[f64], b: &[f64]| -> f64 {
            layer_norm(x, g, b).0.data().iter().zip(probe.data()).map(|(a, c)| a * c).sum()
        };
        let (_, cache) = layer_norm(&x, &gamma, &beta);
        let (d_x, d_g, d_b) = layer_norm_backward(&probe, &cache, &gamma);
        let h = 1e-5;
        for idx in 0..x.data().len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h);
            assert!(rel_err(fd, d_x.data()[idx]) < 1e-4, "dx[{idx}] {fd} vs {}", d_x.data()[idx]);
        }
        for j in 0..6 {
            let (mut gp, mut gm) = (gamma.clone(), gamma.clone());
            gp[j] += h;
            gm[j] -= h;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert!(rel_err(fd, d_g[j]) < 1e-4);
            let (mut bp, mut bm) = (beta.clone(), beta.clone());
            bp[j] += h;
            bm[j] -= h;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert!(rel_err(fd, d_b[j]) < 1e-4);
        }
    }

    #[test]
    fn attention_backward_matches_finite_difference() {
        let mut rng = SplitMix64::seed_from_u64(21);
        let q = random(4, 3, &mut rng);
        let k = random(5, 3, &mut rng);
        let v = random(5, 2, &mut rng);
        let mut mask = BoolMatrix::filled(4, 5, true);
        mask.set(0, 2, false);
        mask.set(3, 4, false);
        let probe = random(4, 2, &mut rng);
        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| -> f64 {
            attention(q, k, v, Some(&mask)).unwrap().data().iter().zip(probe.data()).map(|(a, c)| a * c).sum()
        };
        let (_, probs) = attention_forward(&q, &k, &v, Some(&mask)).unwrap();
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &probs, &probe);
        let h = 1e-5;
        for (m, grad, which) in [(&q, &dq, 0), (&k, &dk, 1), (&v, &dv, 2)] {
            for idx in 0..m.data().len() {
                let (mut mp, mut mm) = (m.clone(), m.clone());
                mp.data_mut()[idx] += h;
                mm.data_mut()[idx] -= h;
                let (lp, lm) = match which {
                    0 => (loss(&mp, &k, &v), loss(&mm, &k, &v)),
                    1 => (loss(&q, &mp, &v), loss(&q, &mm, &v)),
                    _ => (loss(&q, &k, &mp), loss(&q, &k, &mm)),
                };
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel_err(fd, grad.data()[idx]) < 1e-4 || (fd - grad.data()[idx]).abs() < 1e-9);
            }
        }
    }
}
