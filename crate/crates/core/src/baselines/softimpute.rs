use super::{column_means, ConvergenceLog};
use crate::error::Result;
use crate::math::{cholesky, cholesky_solve_vec, svd, Matrix, Svd};

/// Stages of the warm-start path from the largest singular value down to
/// the requested shrinkage.
const PATH_STAGES: usize = 8;

/// `U · max(S − λ, 0) · Vᵀ`.
pub fn svd_soft_threshold(x: &Matrix, lambda: f64) -> Result<Matrix> {
    let d = svd(x)?;
    let s: Vec<f64> = d.s.iter().map(|s| (s - lambda).max(0.0)).collect();
    Ok(d.reconstruct_with(&s))
}

/// Column means plus the right singular vectors and shrink factors
/// `(s − λ)₊ / s` of the final filled matrix. A new row's missing cells
/// solve the per-row fixed point `z = x̃ V diag(shrink) Vᵀ`.
#[derive(Clone, Debug)]
pub struct SoftFit {
    pub means: Vec<f64>,
    pub v: Matrix,
    pub shrink: Vec<f64>,
    pub lambda: f64,
}

fn centered(x: &Matrix, means: &[f64]) -> Matrix {
    let mut c = x.clone();
    for i in 0..c.rows() {
        for (v, m) in c.row_mut(i).iter_mut().zip(means) {
            *v -= m;
        }
    }
    c
}

fn fill(xc: &Matrix, z: &Matrix) -> Matrix {
    let mut out = xc.clone();
    for (o, &zv) in out.data_mut().iter_mut().zip(z.data()) {
        if o.is_nan() {
            *o = zv;
        }
    }
    out
}

fn objective(xc: &Matrix, z: &Matrix, nuclear: f64, lambda: f64) -> f64 {
    let fit: f64 = xc
        .data()
        .iter()
        .zip(z.data())
        .filter(|(x, _)| !x.is_nan())
        .map(|(x, z)| (x - z) * (x - z))
        .sum();
    0.5 * fit + lambda * nuclear
}

pub(super) fn fit(x: &Matrix, lambda: f64, max_iter: usize, tol: f64) -> Result<(SoftFit, Matrix, ConvergenceLog)> {
    let means = column_means(x);
    let xc = centered(x, &means);
    let mut z = Matrix::zeros(x.rows(), x.cols());
    let top = svd(&fill(&xc, &z))?.s.first().copied().unwrap_or(0.0);
    let stages: Vec<f64> = if lambda >= top || top == 0.0 {
        vec![lambda]
    } else {
        let floor = lambda.max(top * 1e-4);
        let mut v: Vec<f64> = (1..PATH_STAGES)
            .map(|k| top * (floor / top).powf(k as f64 / PATH_STAGES as f64))
            .collect();
        v.push(lambda);
        v
    };
    let mut log = ConvergenceLog::default();
    let mut last: Option<Svd> = None;
    for (stage, &lam) in stages.iter().enumerate() {
        let final_stage = stage + 1 == stages.len();
        log.converged = false;
        for _ in 0..max_iter {
            let d = svd(&fill(&xc, &z))?;
            let s: Vec<f64> = d.s.iter().map(|s| (s - lam).max(0.0)).collect();
            let z_new = d.reconstruct_with(&s);
            log.iterations += 1;
            if final_stage {
                log.trace.push(objective(&xc, &z_new, s.iter().sum(), lam));
            }
            let diff: f64 = z_new.data().iter().zip(z.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            let norm: f64 = z.data().iter().map(|a| a * a).sum();
            z = z_new;
            last = Some(d);
            if diff <= tol * norm.max(f64::MIN_POSITIVE) {
                log.converged = true;
                break;
            }
        }
    }
    let d = match last {
        Some(d) => d,
        None => svd(&fill(&xc, &z))?,
    };
    // shrink factors of the filled matrix at the final iterate
    let shrink = d
        .s
        .iter()
        .map(|&s| if s > 0.0 { (s - lambda).max(0.0) / s } else { 0.0 })
        .collect();
    let mut completed = fill(&xc, &z);
    for i in 0..completed.rows() {
        for (v, m) in completed.row_mut(i).iter_mut().zip(&means) {
            *v += m;
        }
    }
    let fit = SoftFit {
        means,
        v: d.vt.transpose(),
        shrink,
        lambda,
    };
    Ok((fit, completed, log))
}

impl SoftFit {
    pub(super) fn transform(&self, x: &Matrix) -> Result<Matrix> {
        let p = x.cols();
        // projection P = V diag(shrink) Vᵀ
        let mut vd = self.v.clone();
        for i in 0..p {
            for (a, s) in vd.row_mut(i).iter_mut().zip(&self.shrink) {
                *a *= s;
            }
        }
        let proj = vd.dot_t(&self.v);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = x.row(i);
            let miss: Vec<usize> = (0..p).filter(|&j| row[j].is_nan()).collect();
            if miss.is_empty() {
                continue;
            }
            let obs: Vec<usize> = (0..p).filter(|&j| !row[j].is_nan()).collect();
            // (I − P_MM) z_M = P_MO (x_O − μ_O)
            let m = miss.len();
            let mut a = Matrix::zeros(m, m);
            let mut b = vec![0.0; m];
            for (r, &jm) in miss.iter().enumerate() {
                for (c, &jn) in miss.iter().enumerate() {
                    a.set(r, c, if r == c { 1.0 } else { 0.0 } - proj.get(jm, jn));
                }
                b[r] = obs.iter().map(|&jo| proj.get(jm, jo) * (row[jo] - self.means[jo])).sum();
            }
            let l = match cholesky(&a) {
                Ok(l) => l,
                Err(_) => {
                    for r in 0..m {
                        a.set(r, r, a.get(r, r) + 1e-8);
                    }
                    cholesky(&a)?
                }
            };
            let zm = cholesky_solve_vec(&l, &b);
            for (r, &jm) in miss.iter().enumerate() {
                out.set(i, jm, zm[r] + self.means[jm]);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_fixtures() {
        let d = Matrix::diag(&[3.0, 1.0]);
        let t = svd_soft_threshold(&d, 2.0).unwrap();
        let want = Matrix::diag(&[1.0, 0.0]);
        for (a, b) in t.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let x = Matrix::from_rows(&[[1.0, 2.0, 0.5], [0.3, -1.0, 2.0], [4.0, 0.0, 1.0], [2.0, 2.0, 2.0]]);
        let same = svd_soft_threshold(&x, 0.0).unwrap();
        for (a, b) in same.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let top = svd(&x).unwrap().s[0];
        assert!(svd_soft_threshold(&x, top).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }
}
