//! Classical imputers: column mean, softimpute, Gaussian EM and chained
//! ridge regression (MICE-style).
//!
//! Matrices use NaN for missing cells. Every imputer has a `fit` on one
//! matrix and a `transform` that fills new rows with the fitted state, so
//! evaluation rows never influence what was learned.

mod em;
mod mice;
mod softimpute;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::rng::{derive_seed, rng_from_seed};

pub use em::{EmFit, EM_EPS_SCALE};
pub use mice::MiceFit;
pub use softimpute::{svd_soft_threshold, SoftFit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputerKind {
    Mean,
    Softimpute,
    EmGaussian,
    MiceRidge,
}

impl ImputerKind {
    pub const ALL: [ImputerKind; 4] = [Self::Mean, Self::Softimpute, Self::EmGaussian, Self::MiceRidge];

    /// Short label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Softimpute => "softimpute",
            Self::EmGaussian => "em",
            Self::MiceRidge => "mice",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputerSpec {
    pub kind: ImputerKind,
    /// Softimpute shrinkage; ignored when `lambda_grid` is non-empty.
    pub lambda: f64,
    /// Candidate shrinkages scored on held-out observed cells.
    pub lambda_grid: Vec<f64>,
    /// Ridge penalty for MICE.
    pub alpha: f64,
    pub n_sweeps: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Fraction of observed cells held out when tuning `lambda`.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ImputerSpec {
    fn default() -> Self {
        Self {
            kind: ImputerKind::Mean,
            lambda: 1.0,
            lambda_grid: vec![0.1, 1.0, 10.0],
            alpha: 1.0,
            n_sweeps: 10,
            max_iter: 100,
            tol: 1e-6,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl ImputerSpec {
    pub fn new(kind: ImputerKind) -> Self {
        Self { kind, ..Default::default() }
    }

    pub fn softimpute(lambda: f64) -> Self {
        Self {
            kind: ImputerKind::Softimpute,
            lambda,
            lambda_grid: Vec::new(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || self.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub iterations: usize,
    pub converged: bool,
    /// Softimpute objective, EM observed-data log-likelihood (penalized), or
    /// MICE mean absolute change of the imputed cells, one per iteration.
    pub trace: Vec<f64>,
    /// Shrinkage actually used by softimpute.
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum FittedState {
    Mean(Vec<f64>),
    Softimpute(SoftFit),
    Em(EmFit),
    Mice(MiceFit),
}

#[derive(Clone, Debug)]
pub struct FittedImputer {
    pub spec: ImputerSpec,
    pub state: FittedState,
}

impl FittedImputer {
    pub fn n_cols(&self) -> usize {
        match &self.state {
            FittedState::Mean(m) => m.len(),
            FittedState::Softimpute(s) => s.means.len(),
            FittedState::Em(e) => e.mu.len(),
            FittedState::Mice(m) => m.means.len(),
        }
    }

    /// Fills the NaN cells of `x`; present cells are copied unchanged.
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_cols() {
            return Err(Error::dim(format!(
                "imputer fitted on {} columns, got {}",
                self.n_cols(),
                x.cols()
            )));
        }
        let mut out = match &self.state {
            FittedState::Mean(means) => {
                let mut out = x.clone();
                for i in 0..out.rows() {
                    for (v, m) in out.row_mut(i).iter_mut().zip(means) {
                        if v.is_nan() {
                            *v = *m;
                        }
                    }
                }
                out
            }
            FittedState::Softimpute(s) => s.transform(x)?,
            FittedState::Em(e) => e.transform(x)?,
            FittedState::Mice(m) => m.transform(x),
        };
        restore_observed(x, &mut out);
        Ok(out)
    }
}

/// Copies every present cell of `x` into `out` bit for bit.
fn restore_observed(x: &Matrix, out: &mut Matrix) {
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if !v.is_nan() {
            *o = v;
        }
    }
}

/// Observed mean of each column.
pub fn column_means(x: &Matrix) -> Vec<f64> {
    (0..x.cols())
        .map(|j| {
            let (s, n) = (0..x.rows())
                .map(|i| x.get(i, j))
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                s / n as f64
            }
        })
        .collect()
}

/// Columns with at least `min_obs` present cells.
pub fn usable_columns(x: &Matrix, min_obs: usize) -> Vec<usize> {
    (0..x.cols())
        .filter(|&j| (0..x.rows()).filter(|&i| !x.get(i, j).is_nan()).count() >= min_obs)
        .collect()
}

fn check_input(x: &Matrix) -> Result<()> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::EmptyInput);
    }
    for j in 0..x.cols() {
        let n = (0..x.rows()).filter(|&i| !x.get(i, j).is_nan()).count();
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "column {j} has {n} observed entries; at least 2 are needed"
            )));
        }
    }
    if x.data().iter().any(|v| v.is_infinite()) {
        return Err(Error::Numeric {
            iterations: 0,
            msg: "input contains infinite values".into(),
        });
    }
    Ok(())
}

/// Fits on `x` and returns the fitted imputer, the completed `x` and the
/// convergence log.
pub fn fit(x: &Matrix, spec: &ImputerSpec) -> Result<(FittedImputer, Matrix, ConvergenceLog)> {
    spec.validate()?;
    check_input(x)?;
    let (state, mut completed, log) = match spec.kind {
        ImputerKind::Mean => {
            let means = column_means(x);
            let fitted = FittedImputer {
                spec: spec.clone(),
                state: FittedState::Mean(means),
            };
            let completed = fitted.transform(x)?;
            return Ok((
                fitted,
                completed,
                ConvergenceLog {
                    iterations: 0,
                    converged: true,
                    ..Default::default()
                },
            ));
        }
        ImputerKind::Softimpute => {
            let lambda = if spec.lambda_grid.is_empty() {
                spec.lambda
            } else {
                tune_lambda(x, spec)?
            };
            let (fit, z, mut log) = softimpute::fit(x, lambda, spec.max_iter, spec.tol)?;
            log.lambda = Some(lambda);
            (FittedState::Softimpute(fit), z, log)
        }
        ImputerKind::EmGaussian => {
            let (fit, z, log) = em::fit(x, spec.max_iter, spec.tol)?;
            (FittedState::Em(fit), z, log)
        }
        ImputerKind::MiceRidge => {
            let (fit, z, log) = mice::fit(x, spec.alpha, spec.n_sweeps)?;
            (FittedState::Mice(fit), z, log)
        }
    };
    restore_observed(x, &mut completed);
    Ok((
        FittedImputer {
            spec: spec.clone(),
            state,
        },
        completed,
        log,
    ))
}

/// Completed matrix plus convergence log.
pub fn fit_impute(x: &Matrix, spec: &ImputerSpec) -> Result<(Matrix, ConvergenceLog)> {
    let (_, z, log) = fit(x, spec)?;
    Ok((z, log))
}

/// Picks the grid value with the lowest RMSE on a seeded hold-out of
/// observed cells. Ties go to the earlier grid entry.
pub fn tune_lambda(x: &Matrix, spec: &ImputerSpec) -> Result<f64> {
    let observed: Vec<usize> = (0..x.data().len()).filter(|&k| !x.data()[k].is_nan()).collect();
    let mut shuffled = observed.clone();
    shuffled.shuffle(&mut rng_from_seed(derive_seed(spec.seed, 0x4c41)));
    let n_hold = ((observed.len() as f64) * spec.val_fraction).round() as usize;
    let mut train = x.clone();
    let mut held = Vec::new();
    let cols = x.cols();
    let mut per_col: Vec<usize> = (0..cols)
        .map(|j| (0..x.rows()).filter(|&i| !x.get(i, j).is_nan()).count())
        .collect();
    for &k in &shuffled {
        if held.len() == n_hold {
            break;
        }
        let j = k % cols;
        // keep two observations per column so the fit stays well-posed
        if per_col[j] <= 2 {
            continue;
        }
        per_col[j] -= 1;
        train.data_mut()[k] = f64::NAN;
        held.push(k);
    }
    if held.is_empty() {
        return Ok(spec.lambda_grid[0]);
    }
    let mut best = (f64::INFINITY, spec.lambda_grid[0]);
    for &lambda in &spec.lambda_grid {
        let (_, z, _) = softimpute::fit(&train, lambda, spec.max_iter, spec.tol)?;
        let err: f64 = held.iter().map(|&k| (z.data()[k] - x.data()[k]).powi(2)).sum();
        if err < best.0 {
            best = (err, lambda);
        }
    }
    Ok(best.1)
}
