use super::{column_means, ConvergenceLog};
use crate::error::Result;
use crate::math::{cholesky, cholesky_solve_vec, Matrix};

/// Chained ridge regressions from the last sweep. `coef[j]` has length `p`
/// with a zero at `j`.
#[derive(Clone, Debug)]
pub struct MiceFit {
    pub means: Vec<f64>,
    pub intercept: Vec<f64>,
    pub coef: Vec<Vec<f64>>,
    pub n_sweeps: usize,
}

fn predict(intercept: f64, coef: &[f64], row: &[f64]) -> f64 {
    intercept + coef.iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
}

/// Ridge fit of column `j` on every other column, over the rows where `j`
/// is observed. Sums over those rows come from whole-matrix sums minus the
/// missing rows.
fn ridge(
    filled: &Matrix,
    missing_rows: &[usize],
    sum: &[f64],
    gram: &Matrix,
    j: usize,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let p = filled.cols();
    let mut s = sum.to_vec();
    let mut g = gram.clone();
    for &i in missing_rows {
        let r = filled.row(i);
        for a in 0..p {
            s[a] -= r[a];
            let ra = r[a];
            let gr = g.row_mut(a);
            for b in 0..p {
                gr[b] -= ra * r[b];
            }
        }
    }
    let n = (filled.rows() - missing_rows.len()) as f64;
    let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
    let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
    let q = others.len();
    let mut a = Matrix::zeros(q, q);
    let mut rhs = vec![0.0; q];
    for (r, &k) in others.iter().enumerate() {
        for (c, &m) in others.iter().enumerate() {
            a.set(r, c, g.get(k, m) - n * mean[k] * mean[m]);
        }
        a.set(r, r, a.get(r, r) + alpha);
        rhs[r] = g.get(k, j) - n * mean[k] * mean[j];
    }
    let beta = if q == 0 {
        Vec::new()
    } else {
        match cholesky(&a) {
            Ok(l) => cholesky_solve_vec(&l, &rhs),
            Err(_) => {
                // collinear predictors with alpha = 0
                for r in 0..q {
                    a.set(r, r, a.get(r, r) + 1e-8 * (1.0 + a.get(r, r)));
                }
                cholesky_solve_vec(&cholesky(&a)?, &rhs)
            }
        }
    };
    let mut coef = vec![0.0; p];
    for (r, &k) in others.iter().enumerate() {
        coef[k] = beta[r];
    }
    let intercept = mean[j] - others.iter().map(|&k| coef[k] * mean[k]).sum::<f64>();
    Ok((intercept, coef))
}

pub(super) fn fit(x: &Matrix, alpha: f64, n_sweeps: usize) -> Result<(MiceFit, Matrix, ConvergenceLog)> {
    let (n, p) = x.shape();
    let means = column_means(x);
    let mut filled = x.clone();
    let mut missing: Vec<Vec<usize>> = vec![Vec::new(); p];
    for i in 0..n {
        for j in 0..p {
            if x.get(i, j).is_nan() {
                filled.set(i, j, means[j]);
                missing[j].push(i);
            }
        }
    }
    let n_missing: usize = missing.iter().map(Vec::len).sum();
    let mut sum: Vec<f64> = (0..p).map(|j| (0..n).map(|i| filled.get(i, j)).sum()).collect();
    let mut gram = filled.t_dot(&filled);
    let mut intercept = means.clone();
    let mut coef = vec![vec![0.0; p]; p];
    let mut log = ConvergenceLog::default();
    for _ in 0..n_sweeps {
        let mut change = 0.0;
        for j in 0..p {
            let (b0, b) = ridge(&filled, &missing[j], &sum, &gram, j, alpha)?;
            for &i in &missing[j] {
                let new = predict(b0, &b, filled.row(i));
                change += (new - filled.get(i, j)).abs();
                filled.set(i, j, new);
            }
            intercept[j] = b0;
            coef[j] = b;
            if !missing[j].is_empty() {
                // refresh sums touching column j
                sum[j] = (0..n).map(|i| filled.get(i, j)).sum();
                for k in 0..p {
                    let v: f64 = (0..n).map(|i| filled.get(i, j) * filled.get(i, k)).sum();
                    gram.set(j, k, v);
                    gram.set(k, j, v);
                }
            }
        }
        log.iterations += 1;
        log.trace.push(if n_missing == 0 { 0.0 } else { change / n_missing as f64 });
    }
    log.converged = true;
    Ok((
        MiceFit {
            means,
            intercept,
            coef,
            n_sweeps,
        },
        filled,
        log,
    ))
}

impl MiceFit {
    pub(super) fn transform(&self, x: &Matrix) -> Matrix {
        let p = x.cols();
        let mut out = x.clone();
        for i in 0..x.rows() {
            let miss: Vec<usize> = (0..p).filter(|&j| x.get(i, j).is_nan()).collect();
            if miss.is_empty() {
                continue;
            }
            let row = out.row_mut(i);
            for &j in &miss {
                row[j] = self.means[j];
            }
            for _ in 0..self.n_sweeps {
                for &j in &miss {
                    row[j] = predict(self.intercept[j], &self.coef[j], row);
                }
            }
        }
        out
    }
}
