//! Synthetic EHR-like cohorts with known ground truth.
//!
//! Each row draws a latent `z ~ N(0, I_r)`; standardized feature values are
//! `G(z)·W + group_offset + noise`, then mapped to positive raw units per
//! feature. Missingness is applied afterwards, so the complete matrix is
//! kept as ground truth.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Cohort, LabSchema, PatientRow};
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::rng::{derive_seed, rng_from_seed, SplitMix64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    /// Purely linear in the latent factors.
    None,
    /// Adds a centred square of a second projection per feature.
    Quadratic,
    /// Adds a product of two projections per feature, passed through a
    /// saturating map, so no finite set of features spans the rest linearly.
    Interaction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingMechanism {
    Mcar,
    Mar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_rows: usize,
    pub n_features: usize,
    pub latent_rank: usize,
    pub noise_sd: f64,
    pub nonlinearity: Nonlinearity,
    pub missing_mechanism: MissingMechanism,
    pub missing_rate: f64,
    pub followup_prob: f64,
    /// Follow-up drift in standardized units.
    pub followup_drift_sd: f64,
    pub n_groups: usize,
    pub group_shift_sd: f64,
    pub seed: u64,
    /// First admission timestamp (seconds since the Unix epoch).
    pub start_time: i64,
    /// Admissions are spread uniformly over this many seconds.
    pub time_span: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_rows: 1000,
            n_features: 20,
            latent_rank: 3,
            noise_sd: 0.1,
            nonlinearity: Nonlinearity::None,
            missing_mechanism: MissingMechanism::Mcar,
            missing_rate: 0.25,
            followup_prob: 0.5,
            followup_drift_sd: 0.1,
            n_groups: 5,
            group_shift_sd: 0.0,
            seed: 0,
            start_time: 4_102_444_800,
            time_span: 10 * 365 * 86_400,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_features == 0 || self.latent_rank == 0 {
            return bad("n_features and latent_rank must be positive".into());
        }
        if self.latent_rank > self.n_features {
            return bad(format!(
                "latent_rank {} exceeds n_features {}",
                self.latent_rank, self.n_features
            ));
        }
        for (name, v) in [("missing_rate", self.missing_rate), ("followup_prob", self.followup_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.noise_sd < 0.0 || self.followup_drift_sd < 0.0 || self.group_shift_sd < 0.0 {
            return bad("standard deviations must be non-negative".into());
        }
        if self.n_groups == 0 {
            return bad("n_groups must be at least 1".into());
        }
        if self.time_span <= 0 {
            return bad("time_span must be positive".into());
        }
        Ok(())
    }
}

/// Interaction terms are scaled so their variance is comparable to the
/// linear part.
const NONLINEAR_WEIGHT: f64 = 1.5;

/// Fixed generative parameters derived from a config's seed.
#[derive(Clone, Debug)]
pub struct SynthModel {
    config: SynthConfig,
    loadings: Matrix,
    second: Matrix,
    third: Matrix,
    group_offsets: Matrix,
    scale: Vec<f64>,
}

impl SynthModel {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let (f, r) = (config.n_features, config.latent_rank);
        let mut rng = rng_from_seed(derive_seed(config.seed, 0));
        let norm = 1.0 / (r as f64).sqrt();
        let gauss = |rng: &mut SplitMix64, rows: usize, cols: usize, s: f64| {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect())
                .expect("shape")
        };
        let loadings = gauss(&mut rng, f, r, norm);
        let second = gauss(&mut rng, f, r, norm);
        let third = gauss(&mut rng, f, r, norm);
        let group_offsets = gauss(&mut rng, config.n_groups, f, config.group_shift_sd);
        // heterogeneous lab units: scales spread over two decades
        let scale = (0..f).map(|_| 10f64.powf(rng.random_range(-0.5..1.5))).collect();
        Ok(Self {
            config,
            loadings,
            second,
            third,
            group_offsets,
            scale,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    /// The `F × r` linear loading matrix `W`.
    pub fn loadings(&self) -> &Matrix {
        &self.loadings
    }

    /// Noise-free standardized feature values for a latent vector.
    pub fn signal(&self, z: &[f64]) -> Vec<f64> {
        let f = self.config.n_features;
        let proj = |m: &Matrix, j: usize| -> f64 { m.row(j).iter().zip(z).map(|(a, b)| a * b).sum() };
        (0..f)
            .map(|j| {
                let lin = proj(&self.loadings, j);
                match self.config.nonlinearity {
                    Nonlinearity::None => lin,
                    Nonlinearity::Quadratic => {
                        let p = proj(&self.second, j);
                        let norm2: f64 = self.second.row(j).iter().map(|x| x * x).sum();
                        lin + NONLINEAR_WEIGHT * (p * p - norm2) / std::f64::consts::SQRT_2
                    }
                    Nonlinearity::Interaction => {
                        let a = proj(&self.second, j);
                        let b = proj(&self.third, j);
                        lin + NONLINEAR_WEIGHT * (2.0 * a * b).tanh()
                    }
                }
            })
            .collect()
    }

    /// Latent vector of row `i`, as drawn by [`SynthModel::generate`].
    pub fn latent(&self, i: usize) -> Vec<f64> {
        let mut rng = rng_from_seed(derive_seed(self.config.seed, 1 + i as u64));
        (0..self.config.latent_rank).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn generate(&self) -> Result<Cohort> {
        let cfg = &self.config;
        let (n, f, r) = (cfg.n_rows, cfg.n_features, cfg.latent_rank);
        let mut latent = Matrix::zeros(n, r);
        let mut standardized = Matrix::zeros(n, f);
        let mut groups = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = rng_from_seed(derive_seed(cfg.seed, 1 + i as u64));
            let z: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
            let g = rng.random_range(0..cfg.n_groups);
            let sig = self.signal(&z);
            for j in 0..f {
                let eps: f64 = rng.sample(StandardNormal);
                standardized.set(i, j, sig[j] + self.group_offsets.get(g, j) + cfg.noise_sd * eps);
            }
            latent.row_mut(i).copy_from_slice(&z);
            groups.push(g);
        }

        // positive raw units: shift each feature so its minimum sits at 10% of its scale
        let mut truth = Matrix::zeros(n, f);
        for j in 0..f {
            let lo = (0..n).map(|i| standardized.get(i, j)).fold(f64::INFINITY, f64::min);
            let lo = if lo.is_finite() { lo } else { 0.0 };
            for i in 0..n {
                truth.set(i, j, self.scale[j] * (standardized.get(i, j) - lo + 0.1));
            }
        }

        let std_normal = Normal::standard();
        let ids: Vec<String> = (0..f).map(|j| format!("{}", 50_000 + j)).collect();
        let schema = LabSchema::from_ids(&ids)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = rng_from_seed(derive_seed(cfg.seed ^ 0x5EED_0F_F0_11_0C, 1 + i as u64));
            let mut row = PatientRow::empty(f);
            row.subject_id = format!("S{:06}", i);
            row.admission_id = format!("A{:06}", i);
            row.group = format!("g{}", groups[i]);
            row.admission_time = cfg.start_time + rng.random_range(0..cfg.time_span);
            let p_missing = match cfg.missing_mechanism {
                MissingMechanism::Mcar => cfg.missing_rate,
                MissingMechanism::Mar => (2.0 * cfg.missing_rate * std_normal.cdf(latent.get(i, 0))).clamp(0.0, 1.0),
            };
            let mut offsets = Vec::with_capacity(f);
            for j in 0..f {
                let u: f64 = rng.random();
                let t: f64 = rng.random_range(0.0..72.0);
                let fu: f64 = rng.random();
                let fu_gap: f64 = rng.random_range(1.0..48.0);
                let drift: f64 = rng.sample(StandardNormal);
                if u < p_missing {
                    continue;
                }
                let v = truth.get(i, j);
                row.values[j] = Some(v);
                offsets.push((j, t));
                if fu < cfg.followup_prob {
                    row.followup_values[j] = Some((v + cfg.followup_drift_sd * self.scale[j] * drift).max(0.0));
                    row.followup_times[j] = Some(t + fu_gap);
                }
            }
            // offsets are hours since the earliest lab in the admission
            let t0 = offsets.iter().map(|&(_, t)| t).fold(f64::INFINITY, f64::min);
            for (j, t) in offsets {
                row.times[j] = Some(t - t0);
                if let Some(ft) = row.followup_times[j] {
                    row.followup_times[j] = Some(ft - t0);
                }
            }
            rows.push(row);
        }
        Cohort::new(schema, rows)?.with_truth(truth)
    }
}

/// Generates a cohort (with ground truth) from a config.
pub fn generate(config: &SynthConfig) -> Result<Cohort> {
    SynthModel::new(config.clone())?.generate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SlotKind;

    fn cfg() -> SynthConfig {
        SynthConfig {
            n_rows: 300,
            n_features: 6,
            latent_rank: 2,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn zero_missing_rate_is_fully_observed() {
        let c = generate(&SynthConfig { missing_rate: 0.0, ..cfg() }).unwrap();
        assert!(c.rows.iter().all(|r| r.values.iter().all(Option::is_some)));
    }

    #[test]
    fn same_seed_same_cohort() {
        assert_eq!(generate(&cfg()).unwrap(), generate(&cfg()).unwrap());
        assert_ne!(generate(&cfg()).unwrap(), generate(&SynthConfig { seed: 10, ..cfg() }).unwrap());
    }

    #[test]
    fn observed_cells_match_truth() {
        let c = generate(&SynthConfig { nonlinearity: Nonlinearity::Interaction, ..cfg() }).unwrap();
        let t = c.ground_truth().unwrap();
        for (i, r) in c.rows.iter().enumerate() {
            for j in 0..6 {
                if let Some(v) = r.values[j] {
                    assert_eq!(v, t.get(i, j));
                }
                assert!(t.get(i, j) > 0.0);
            }
        }
    }

    #[test]
    fn followups_only_with_base_and_later() {
        let c = generate(&SynthConfig { followup_prob: 0.7, ..cfg() }).unwrap();
        for r in &c.rows {
            for j in 0..6 {
                if r.get(j, SlotKind::FollowupValue).is_some() {
                    assert!(r.values[j].is_some());
                    assert!(r.followup_times[j].unwrap() > r.times[j].unwrap());
                }
            }
            if r.times.iter().any(Option::is_some) {
                let min = r.times.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
                assert_eq!(min, 0.0);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&SynthConfig { latent_rank: 7, ..cfg() }).is_err());
        assert!(generate(&SynthConfig { missing_rate: 1.5, ..cfg() }).is_err());
        assert!(generate(&SynthConfig { noise_sd: -1.0, ..cfg() }).is_err());
    }
}
