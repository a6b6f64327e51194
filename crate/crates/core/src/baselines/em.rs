use rayon::prelude::*;

use super::{column_means, ConvergenceLog};
use crate::error::{Error, Result};
use crate::math::{cholesky, cholesky_solve, cholesky_solve_vec, Matrix};

/// Ridge added to Σ is `EM_EPS_SCALE · trace(Σ₀) / F`, with Σ₀ the initial
/// diagonal estimate, held fixed across iterations.
pub const EM_EPS_SCALE: f64 = 1e-6;

const ROW_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct EmFit {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
    pub eps: f64,
}

struct Conditional {
    /// Row with missing coordinates replaced by their conditional means.
    filled: Vec<f64>,
    miss: Vec<usize>,
    /// Conditional covariance of the missing block.
    cov: Option<Matrix>,
    loglik: f64,
}

fn conditional(row: &[f64], mu: &[f64], sigma: &Matrix, with_cov: bool) -> Result<Conditional> {
    let p = row.len();
    let obs: Vec<usize> = (0..p).filter(|&j| !row[j].is_nan()).collect();
    let miss: Vec<usize> = (0..p).filter(|&j| row[j].is_nan()).collect();
    let mut filled = row.to_vec();
    if obs.is_empty() {
        for &j in &miss {
            filled[j] = mu[j];
        }
        let cov = with_cov.then(|| sub(sigma, &miss, &miss));
        return Ok(Conditional {
            filled,
            miss,
            cov,
            loglik: 0.0,
        });
    }
    let soo = sub(sigma, &obs, &obs);
    let l = cholesky(&soo)?;
    let resid: Vec<f64> = obs.iter().map(|&j| row[j] - mu[j]).collect();
    let alpha = cholesky_solve_vec(&l, &resid);
    let logdet: f64 = (0..obs.len()).map(|k| l.get(k, k).ln()).sum::<f64>() * 2.0;
    let quad: f64 = resid.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let loglik = -0.5 * (obs.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
    let mut cov = None;
    if !miss.is_empty() {
        let smo = sub(sigma, &miss, &obs);
        for (r, &j) in miss.iter().enumerate() {
            filled[j] = mu[j] + smo.row(r).iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
        }
        if with_cov {
            // Σ_MM − Σ_MO Σ_OO⁻¹ Σ_OM
            let b = cholesky_solve(&l, &smo.transpose());
            let mut c = sub(sigma, &miss, &miss);
            let prod = smo.dot(&b);
            for (x, y) in c.data_mut().iter_mut().zip(prod.data()) {
                *x -= y;
            }
            cov = Some(c);
        }
    }
    Ok(Conditional {
        filled,
        miss,
        cov,
        loglik,
    })
}

fn sub(m: &Matrix, rows: &[usize], cols: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), cols.len());
    for (r, &i) in rows.iter().enumerate() {
        for (c, &j) in cols.iter().enumerate() {
            out.set(r, c, m.get(i, j));
        }
    }
    out
}

/// E-step sums: `Σ x̂`, `Σ (x̂ x̂ᵀ + C)`, observed-data log-likelihood.
fn e_step(x: &Matrix, mu: &[f64], sigma: &Matrix) -> Result<(Vec<f64>, Matrix, f64)> {
    let p = x.cols();
    let idx: Vec<usize> = (0..x.rows()).collect();
    let parts: Vec<Result<(Vec<f64>, Matrix, f64)>> = idx
        .par_chunks(ROW_CHUNK)
        .map(|chunk| {
            let mut s1 = vec![0.0; p];
            let mut s2 = Matrix::zeros(p, p);
            let mut ll = 0.0;
            for &i in chunk {
                let c = conditional(x.row(i), mu, sigma, true)?;
                ll += c.loglik;
                for a in 0..p {
                    s1[a] += c.filled[a];
                    let fa = c.filled[a];
                    let row = s2.row_mut(a);
                    for b in 0..p {
                        row[b] += fa * c.filled[b];
                    }
                }
                if let Some(cov) = c.cov {
                    for (r, &a) in c.miss.iter().enumerate() {
                        for (k, &b) in c.miss.iter().enumerate() {
                            let v = s2.get(a, b) + cov.get(r, k);
                            s2.set(a, b, v);
                        }
                    }
                }
            }
            Ok((s1, s2, ll))
        })
        .collect();
    let mut s1 = vec![0.0; p];
    let mut s2 = Matrix::zeros(p, p);
    let mut ll = 0.0;
    for part in parts {
        let (a, b, l) = part?;
        for (x, y) in s1.iter_mut().zip(&a) {
            *x += y;
        }
        s2.add_assign(&b);
        ll += l;
    }
    Ok((s1, s2, ll))
}

fn trace_inverse(sigma: &Matrix) -> Result<f64> {
    let l = cholesky(sigma)?;
    let inv = cholesky_solve(&l, &Matrix::identity(sigma.rows()));
    Ok((0..sigma.rows()).map(|i| inv.get(i, i)).sum())
}

pub(super) fn fit(x: &Matrix, max_iter: usize, tol: f64) -> Result<(EmFit, Matrix, ConvergenceLog)> {
    let (n, p) = x.shape();
    let mut mu = column_means(x);
    let mut sigma = Matrix::zeros(p, p);
    for j in 0..p {
        let vals: Vec<f64> = (0..n).map(|i| x.get(i, j)).filter(|v| !v.is_nan()).collect();
        let var = vals.iter().map(|v| (v - mu[j]) * (v - mu[j])).sum::<f64>() / vals.len() as f64;
        sigma.set(j, j, var);
    }
    let trace: f64 = (0..p).map(|j| sigma.get(j, j)).sum();
    let eps = (EM_EPS_SCALE * trace / p as f64).max(1e-12);
    for j in 0..p {
        sigma.set(j, j, sigma.get(j, j) + eps);
    }
    let mut log = ConvergenceLog::default();
    let mut prev = f64::NEG_INFINITY;
    for it in 0..max_iter {
        let (s1, s2, ll) = e_step(x, &mu, &sigma).map_err(|e| numeric(e, it))?;
        // penalized objective; the ridge acts as a prior, keeping EM monotone
        let obj = ll - 0.5 * n as f64 * eps * trace_inverse(&sigma).map_err(|e| numeric(e, it))?;
        log.trace.push(obj);
        log.iterations = it + 1;
        if (obj - prev).abs() <= tol * (obj.abs() + 1.0) {
            log.converged = true;
            break;
        }
        prev = obj;
        let nf = n as f64;
        mu = s1.iter().map(|s| s / nf).collect();
        for a in 0..p {
            for b in 0..p {
                let mut v = s2.get(a, b) / nf - mu[a] * mu[b];
                if a == b {
                    v += eps;
                }
                sigma.set(a, b, v);
            }
        }
    }
    let fit = EmFit { mu, sigma, eps };
    let completed = fit.transform(x)?;
    Ok((fit, completed, log))
}

fn numeric(e: Error, it: usize) -> Error {
    match e {
        Error::Numeric { msg, .. } => Error::Numeric {
            iterations: it,
            msg: format!("EM: {msg}"),
        },
        other => other,
    }
}

impl EmFit {
    /// Conditional mean `μ_M + Σ_MO Σ_OO⁻¹ (x_O − μ_O)` per row.
    pub(super) fn transform(&self, x: &Matrix) -> Result<Matrix> {
        let rows: Vec<Result<Vec<f64>>> = (0..x.rows())
            .into_par_iter()
            .map(|i| Ok(conditional(x.row(i), &self.mu, &self.sigma, false)?.filled))
            .collect();
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&r?);
        }
        Ok(out)
    }
}
