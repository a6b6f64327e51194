use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mae, r2, rmse, wasserstein1};
use crate::baselines::{self, FittedImputer, ImputerKind, ImputerSpec};
use crate::data::{Cohort, LabSchema, SlotKind};
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::LabMae;
use crate::rng::rng_from_seed;

/// Groups with fewer evaluated cells than this are flagged low-support.
pub const DEFAULT_MIN_GROUP_N: usize = 30;

/// Anything that can fill one feature's value cells. `predict` receives a
/// raw cohort whose target value cells are already blank and returns one
/// raw-unit prediction per row.
pub trait Imputer: Sync {
    fn name(&self) -> &str;
    fn predict(&self, hidden: &Cohort, feature: usize) -> Result<Vec<f64>>;
}

impl Imputer for LabMae {
    fn name(&self) -> &str {
        "labmae"
    }

    fn predict(&self, hidden: &Cohort, feature: usize) -> Result<Vec<f64>> {
        self.impute(hidden, &self.schema.features()[feature].id)
    }
}

/// A classical imputer fitted once on normalized training slots and
/// applied row by row to test cohorts.
#[derive(Clone, Debug)]
pub struct BaselineMethod {
    pub schema: LabSchema,
    /// Slot indices the imputer sees, in increasing order.
    pub columns: Vec<usize>,
    pub fitted: FittedImputer,
}

impl BaselineMethod {
    /// `schema` must be fitted; `train` is raw. Every slot column with at
    /// least two training observations is used, follow-ups included.
    pub fn fit(train: &Cohort, schema: &LabSchema, spec: &ImputerSpec) -> Result<Self> {
        let full = train.normalized(schema)?.slot_matrix();
        let columns = baselines::usable_columns(&full, 2);
        let (fitted, _, _) = baselines::fit(&select(&full, &columns), spec)?;
        Ok(Self {
            schema: schema.clone(),
            columns,
            fitted,
        })
    }
}

fn select(m: &Matrix, columns: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), columns.len());
    for i in 0..m.rows() {
        let r = m.row(i);
        for (c, &j) in out.row_mut(i).iter_mut().zip(columns) {
            *c = r[j];
        }
    }
    out
}

impl Imputer for BaselineMethod {
    fn name(&self) -> &str {
        self.fitted.spec.kind.label()
    }

    fn predict(&self, hidden: &Cohort, feature: usize) -> Result<Vec<f64>> {
        let slot = LabSchema::slot(feature, SlotKind::Value);
        let col = self
            .columns
            .binary_search(&slot)
            .map_err(|_| Error::InsufficientData(format!("feature {feature} was too sparse in training")))?;
        let x = select(&hidden.normalized(&self.schema)?.slot_matrix(), &self.columns);
        let z = self.fitted.transform(&x)?;
        (0..z.rows())
            .map(|i| self.schema.invert(feature, SlotKind::Value, z.get(i, col)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    All,
    With,
    Without,
}

/// Metrics for one (feature, method[, group][, stratum]) cell, on raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub feature_id: String,
    pub method: String,
    pub group: Option<String>,
    pub stratum: Stratum,
    pub rmse: f64,
    /// `None` when the held-out values have zero variance.
    pub r2: Option<f64>,
    pub mae: f64,
    pub wasserstein: f64,
    pub n: usize,
    pub low_support: bool,
}

impl MetricRecord {
    pub fn mse(&self) -> f64 {
        self.rmse * self.rmse
    }
}

/// Held-out truth and predictions behind a record.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub rows: Vec<usize>,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
}

/// Hides every observed value of `feature` and asks `method` for it.
/// Only a blanked copy reaches the method.
pub fn predict_feature(test: &Cohort, method: &dyn Imputer, feature: usize) -> Result<Predictions> {
    let rows: Vec<usize> = (0..test.len()).filter(|&i| test.rows[i].values[feature].is_some()).collect();
    let truth: Vec<f64> = rows.iter().map(|&i| test.rows[i].values[feature].unwrap()).collect();
    let mut hidden = test.subset(&rows);
    hidden.truth = None;
    for r in &mut hidden.rows {
        r.values[feature] = None;
    }
    let pred = if rows.is_empty() {
        Vec::new()
    } else {
        method.predict(&hidden, feature)?
    };
    if pred.len() != rows.len() {
        return Err(Error::dim(format!(
            "{} returned {} predictions for {} rows",
            method.name(),
            pred.len(),
            rows.len()
        )));
    }
    Ok(Predictions { rows, truth, pred })
}

fn record(feature_id: &str, method: &str, p: &Predictions) -> Result<MetricRecord> {
    let r2 = match r2(&p.truth, &p.pred) {
        Ok(v) => Some(v),
        Err(Error::DegenerateVariance) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricRecord {
        feature_id: feature_id.to_string(),
        method: method.to_string(),
        group: None,
        stratum: Stratum::All,
        rmse: rmse(&p.truth, &p.pred)?,
        r2,
        mae: mae(&p.truth, &p.pred)?,
        wasserstein: wasserstein1(&p.truth, &p.pred)?,
        n: p.truth.len(),
        low_support: false,
    })
}

/// Masks `feature_id` in every test row that has it and scores the method's
/// predictions against the hidden values.
pub fn evaluate_feature(test: &Cohort, method: &dyn Imputer, feature_id: &str) -> Result<MetricRecord> {
    let f = test.schema.feature_index(feature_id)?;
    let p = predict_feature(test, method, f)?;
    if p.truth.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "feature {feature_id} has {} observed test values",
            p.truth.len()
        )));
    }
    record(feature_id, method.name(), &p)
}

/// [`evaluate_feature`] over every feature, in schema order.
pub fn evaluate_all(test: &Cohort, method: &dyn Imputer) -> Result<Vec<MetricRecord>> {
    test.schema
        .features()
        .par_iter()
        .map(|f| evaluate_feature(test, method, &f.id))
        .collect()
}

/// Per (feature, group) records. `groups` lists the allowed labels; an
/// empty slice accepts whatever labels appear. Groups are evaluated in
/// sorted label order; those with fewer than `min_n` cells are flagged.
pub fn stratify_by_group(
    test: &Cohort,
    method: &dyn Imputer,
    groups: &[String],
    min_n: usize,
) -> Result<Vec<MetricRecord>> {
    let allowed: BTreeSet<&str> = groups.iter().map(String::as_str).collect();
    for r in &test.rows {
        if r.group.is_empty() || (!allowed.is_empty() && !allowed.contains(r.group.as_str())) {
            return Err(Error::UnknownGroup(r.group.clone()));
        }
    }
    let labels = test.groups();
    let jobs: Vec<(usize, &String)> = (0..test.schema.n_features())
        .flat_map(|f| labels.iter().map(move |g| (f, g)))
        .collect();
    let out: Vec<Option<MetricRecord>> = jobs
        .par_iter()
        .map(|&(f, g)| {
            let sub = test.filter(|r| &r.group == g);
            let p = predict_feature(&sub, method, f)?;
            if p.truth.is_empty() {
                return Ok(None);
            }
            let mut rec = record(&test.schema.features()[f].id, method.name(), &p)?;
            rec.group = Some(g.clone());
            rec.low_support = rec.n < min_n;
            Ok(Some(rec))
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// Records for rows with and without the feature's follow-up value. An
/// empty stratum comes back as `None`.
#[derive(Clone, Debug)]
pub struct Ablation {
    pub with: Option<MetricRecord>,
    pub without: Option<MetricRecord>,
}

pub fn followup_ablation(test: &Cohort, method: &dyn Imputer, feature_id: &str) -> Result<Ablation> {
    let f = test.schema.feature_index(feature_id)?;
    let run = |has: bool, stratum: Stratum| -> Result<Option<MetricRecord>> {
        let sub = test.filter(|r| r.followup_values[f].is_some() == has);
        let p = predict_feature(&sub, method, f)?;
        if p.truth.is_empty() {
            return Ok(None);
        }
        let mut rec = record(feature_id, method.name(), &p)?;
        rec.stratum = stratum;
        Ok(Some(rec))
    };
    Ok(Ablation {
        with: run(true, Stratum::With)?,
        without: run(false, Stratum::Without)?,
    })
}

/// Percentile bootstrap for `rmse(a) − rmse(b)` with independent resampling
/// of each group. Returns `(estimate, lo, hi)`.
pub fn bootstrap_rmse_gap(a: &Predictions, b: &Predictions, n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64, f64)> {
    if a.truth.is_empty() || b.truth.is_empty() || n_boot == 0 {
        return Err(Error::EmptyInput);
    }
    let est = rmse(&a.truth, &a.pred)? - rmse(&b.truth, &b.pred)?;
    let mut rng = rng_from_seed(seed);
    let resample = |p: &Predictions, rng: &mut rand_xoshiro::SplitMix64| -> f64 {
        let n = p.truth.len();
        let s: f64 = (0..n)
            .map(|_| {
                let k = rng.random_range(0..n);
                (p.truth[k] - p.pred[k]).powi(2)
            })
            .sum();
        (s / n as f64).sqrt()
    };
    let mut gaps: Vec<f64> = (0..n_boot).map(|_| resample(a, &mut rng) - resample(b, &mut rng)).collect();
    gaps.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo = crate::data::quantile_sorted(&gaps, tail);
    let hi = crate::data::quantile_sorted(&gaps, 1.0 - tail);
    Ok((est, lo, hi))
}

/// n-weighted mean of per-record MSEs.
pub fn pooled_mse(records: &[MetricRecord]) -> Result<f64> {
    let n: usize = records.iter().map(|r| r.n).sum();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(records.iter().map(|r| r.mse() * r.n as f64).sum::<f64>() / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmse,
    Wasserstein,
    R2,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Rmse, Metric::Wasserstein, Metric::R2];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Rmse => "RMSE",
            Metric::Wasserstein => "WD",
            Metric::R2 => "R2",
        }
    }

    /// Strict improvement of `a` over `b`. A missing R² never wins.
    pub fn better(self, a: &MetricRecord, b: &MetricRecord) -> bool {
        match self {
            Metric::Rmse => a.rmse < b.rmse,
            Metric::Wasserstein => a.wasserstein < b.wasserstein,
            Metric::R2 => match (a.r2, b.r2) {
                (Some(x), Some(y)) => x > y,
                (Some(_), None) => true,
                _ => false,
            },
        }
    }
}

/// Per baseline and metric: features where the baseline strictly beats the
/// reference (`baseline_wins`) and the converse (`reference_wins`). Ties
/// count for neither.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinCountTable {
    pub reference: String,
    pub n_features: usize,
    pub baselines: Vec<String>,
    pub baseline_wins: BTreeMap<String, BTreeMap<Metric, usize>>,
    pub reference_wins: BTreeMap<String, BTreeMap<Metric, usize>>,
}

impl WinCountTable {
    pub fn baseline(&self, method: &str, metric: Metric) -> usize {
        self.baseline_wins[method][&metric]
    }

    pub fn reference(&self, method: &str, metric: Metric) -> usize {
        self.reference_wins[method][&metric]
    }

    /// Markdown in the layout "method | RMSE | WD | R2" counting features
    /// where the baseline beats the reference.
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "Features (out of {}) where the baseline strictly beats {}; ties count for neither.\n\n| Method |",
            self.n_features, self.reference
        );
        for m in Metric::ALL {
            s.push_str(&format!(" {} |", m.label()));
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(Metric::ALL.len()));
        s.push('\n');
        for b in &self.baselines {
            s.push_str(&format!("| {b} |"));
            for m in Metric::ALL {
                s.push_str(&format!(" {} |", self.baseline(b, m)));
            }
            s.push('\n');
        }
        s
    }
}

/// Records must hold exactly one unstratified record per (feature, method)
/// and every method must cover the same features.
pub fn win_counts(records: &[MetricRecord], reference: &str) -> Result<WinCountTable> {
    let mut grid: BTreeMap<&str, BTreeMap<&str, &MetricRecord>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if r.group.is_some() || r.stratum != Stratum::All {
            return Err(Error::Coverage("win counts take unstratified records only".into()));
        }
        if !grid.contains_key(r.method.as_str()) {
            order.push(&r.method);
        }
        if grid.entry(&r.method).or_default().insert(&r.feature_id, r).is_some() {
            return Err(Error::Coverage(format!("duplicate record for {} / {}", r.method, r.feature_id)));
        }
    }
    let refs = grid
        .get(reference)
        .ok_or_else(|| Error::Coverage(format!("no records for reference method {reference}")))?;
    let features: BTreeSet<&str> = refs.keys().copied().collect();
    let mut table = WinCountTable {
        reference: reference.to_string(),
        n_features: features.len(),
        baselines: Vec::new(),
        baseline_wins: BTreeMap::new(),
        reference_wins: BTreeMap::new(),
    };
    for m in order.into_iter().filter(|m| *m != reference) {
        let recs = &grid[m];
        if recs.keys().copied().collect::<BTreeSet<_>>() != features {
            return Err(Error::Coverage(format!("{m} does not cover the same features as {reference}")));
        }
        let mut bw = BTreeMap::new();
        let mut rw = BTreeMap::new();
        for metric in Metric::ALL {
            bw.insert(metric, features.iter().filter(|f| metric.better(recs[*f], refs[*f])).count());
            rw.insert(metric, features.iter().filter(|f| metric.better(refs[*f], recs[*f])).count());
        }
        table.baselines.push(m.to_string());
        table.baseline_wins.insert(m.to_string(), bw);
        table.reference_wins.insert(m.to_string(), rw);
    }
    Ok(table)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    feature_id: &'a str,
    method: &'a str,
    group: &'a str,
    stratum: Stratum,
    rmse: String,
    r2: String,
    mae: String,
    wasserstein: String,
    n: usize,
    low_support: bool,
}

#[derive(Deserialize)]
struct CsvIn {
    feature_id: String,
    method: String,
    group: String,
    stratum: Stratum,
    rmse: f64,
    r2: Option<f64>,
    mae: f64,
    wasserstein: f64,
    n: usize,
    low_support: bool,
}

/// Inverse of [`write_records_csv`].
pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<MetricRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    rd.deserialize::<CsvIn>()
        .map(|row| {
            let r = row.map_err(csv_err)?;
            Ok(MetricRecord {
                feature_id: r.feature_id,
                method: r.method,
                group: (!r.group.is_empty()).then_some(r.group),
                stratum: r.stratum,
                rmse: r.rmse,
                r2: r.r2,
                mae: r.mae,
                wasserstein: r.wasserstein,
                n: r.n,
                low_support: r.low_support,
            })
        })
        .collect()
}

/// One CSV row per record; floats use shortest round-trip formatting.
pub fn write_records_csv<W: Write>(records: &[MetricRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt = crate::data::io::render;
    for r in records {
        w.serialize(CsvRow {
            feature_id: &r.feature_id,
            method: &r.method,
            group: r.group.as_deref().unwrap_or(""),
            stratum: r.stratum,
            rmse: fmt(r.rmse),
            r2: r.r2.map(fmt).unwrap_or_default(),
            mae: fmt(r.mae),
            wasserstein: fmt(r.wasserstein),
            n: r.n,
            low_support: r.low_support,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Follow-up ablation rows, one per stratum. Empty strata keep their row
/// with `status = empty` and blank metrics.
pub fn write_ablation_csv<W: Write>(rows: &[(String, String, Ablation)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt = crate::data::io::render;
    w.write_record(["feature_id", "method", "stratum", "status", "rmse", "r2", "mae", "wasserstein", "n"])
        .map_err(csv_err)?;
    for (feature, method, a) in rows {
        for (label, rec) in [("with", &a.with), ("without", &a.without)] {
            let fields = match rec {
                Some(r) => [
                    "ok".to_string(),
                    fmt(r.rmse),
                    r.r2.map(fmt).unwrap_or_default(),
                    fmt(r.mae),
                    fmt(r.wasserstein),
                    r.n.to_string(),
                ],
                None => ["empty".into(), String::new(), String::new(), String::new(), String::new(), "0".into()],
            };
            let mut row = vec![feature.as_str(), method.as_str(), label];
            row.extend(fields.iter().map(String::as_str));
            w.write_record(row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        row: e.position().map(|p| p.line() as usize).unwrap_or(0),
        column: String::new(),
        msg: e.to_string(),
    }
}

/// Raw cohorts in, one record per feature and method out. Each baseline is
/// fitted on `train` under `schema`.
pub fn benchmark(
    train: &Cohort,
    test: &Cohort,
    schema: &LabSchema,
    model: Option<&LabMae>,
    kinds: &[ImputerKind],
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    if let Some(m) = model {
        out.extend(evaluate_all(test, m)?);
    }
    for &kind in kinds {
        let mut spec = ImputerSpec::new(kind);
        spec.seed = seed;
        let method = BaselineMethod::fit(train, schema, &spec)?;
        out.extend(evaluate_all(test, &method)?);
    }
    Ok(out)
}
