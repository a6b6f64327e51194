use std::collections::HashSet;

use super::schema::{FeatureStats, LabSchema, ScaleStats, SlotKind};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// One patient admission. Per-feature vectors have length F; `None` marks a
/// missing cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRow {
    pub subject_id: String,
    pub admission_id: String,
    pub group: String,
    /// Admission timestamp, seconds since the Unix epoch.
    pub admission_time: i64,
    pub values: Vec<Option<f64>>,
    /// Hours since the earliest lab of the admission.
    pub times: Vec<Option<f64>>,
    pub followup_values: Vec<Option<f64>>,
    pub followup_times: Vec<Option<f64>>,
}

impl PatientRow {
    pub fn empty(n_features: usize) -> Self {
        Self {
            subject_id: String::new(),
            admission_id: String::new(),
            group: String::new(),
            admission_time: 0,
            values: vec![None; n_features],
            times: vec![None; n_features],
            followup_values: vec![None; n_features],
            followup_times: vec![None; n_features],
        }
    }

    #[inline]
    pub fn n_features(&self) -> usize {
        self.values.len()
    }

    fn column(&self, kind: SlotKind) -> &[Option<f64>] {
        match kind {
            SlotKind::Value => &self.values,
            SlotKind::Time => &self.times,
            SlotKind::FollowupValue => &self.followup_values,
            SlotKind::FollowupTime => &self.followup_times,
        }
    }

    fn column_mut(&mut self, kind: SlotKind) -> &mut Vec<Option<f64>> {
        match kind {
            SlotKind::Value => &mut self.values,
            SlotKind::Time => &mut self.times,
            SlotKind::FollowupValue => &mut self.followup_values,
            SlotKind::FollowupTime => &mut self.followup_times,
        }
    }

    #[inline]
    pub fn get(&self, feature: usize, kind: SlotKind) -> Option<f64> {
        self.column(kind)[feature]
    }

    #[inline]
    pub fn set(&mut self, feature: usize, kind: SlotKind, v: Option<f64>) {
        self.column_mut(kind)[feature] = v;
    }

    /// Cell at a token slot (see [`LabSchema::slot`]).
    #[inline]
    pub fn cell(&self, slot: usize) -> Option<f64> {
        self.get(LabSchema::slot_feature(slot), LabSchema::slot_kind(slot))
    }

    /// Number of present primary value and time cells.
    pub fn observed_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count() + self.times.iter().filter(|v| v.is_some()).count()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.values.len();
        if self.times.len() != n || self.followup_values.len() != n || self.followup_times.len() != n {
            return Err(Error::dim(format!("row {} has ragged per-feature arrays", self.admission_id)));
        }
        for f in 0..n {
            if let Some(t) = self.times[f] {
                if t < 0.0 {
                    return Err(Error::State(format!("negative time offset in row {}", self.admission_id)));
                }
            }
            if self.values[f].is_none() && self.times[f].is_some() {
                return Err(Error::State(format!(
                    "row {}: time present without its value (feature {f})",
                    self.admission_id
                )));
            }
            if let (Some(t), Some(ft)) = (self.times[f], self.followup_times[f]) {
                if ft < t {
                    return Err(Error::State(format!(
                        "row {}: follow-up precedes first measurement (feature {f})",
                        self.admission_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A collection of admissions sharing one schema. Synthetic cohorts also
/// carry the complete pre-missingness value matrix (`rows × F`).
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub schema: LabSchema,
    pub rows: Vec<PatientRow>,
    pub truth: Option<Matrix>,
}

impl Cohort {
    pub fn new(schema: LabSchema, rows: Vec<PatientRow>) -> Result<Self> {
        let f = schema.n_features();
        for r in &rows {
            if r.n_features() != f {
                return Err(Error::dim(format!(
                    "row {} has {} features, schema has {f}",
                    r.admission_id,
                    r.n_features()
                )));
            }
            r.check_invariants()?;
        }
        Ok(Self {
            schema,
            rows,
            truth: None,
        })
    }

    pub fn with_truth(mut self, truth: Matrix) -> Result<Self> {
        if truth.shape() != (self.rows.len(), self.schema.n_features()) {
            return Err(Error::dim("truth matrix shape does not match the cohort"));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Complete pre-missingness values (synthetic cohorts only).
    pub fn ground_truth(&self) -> Result<&Matrix> {
        self.truth.as_ref().ok_or(Error::TruthUnavailable)
    }

    /// New cohort holding the listed rows (and the matching truth rows).
    pub fn subset(&self, idx: &[usize]) -> Cohort {
        Cohort {
            schema: self.schema.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            truth: self.truth.as_ref().map(|t| t.select_rows(idx)),
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&PatientRow) -> bool) -> Cohort {
        let idx: Vec<usize> = (0..self.rows.len()).filter(|&i| keep(&self.rows[i])).collect();
        self.subset(&idx)
    }

    /// Observed values of one slot kind for a feature.
    pub fn observed(&self, feature: usize, kind: SlotKind) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.get(feature, kind)).collect()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.rows.iter().map(|r| r.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Fits clip-then-min-max scaling per feature: value stats from primary
    /// and follow-up values, time stats from primary and follow-up times.
    /// Returns the schema with stats attached.
    pub fn fit_normalizer(&self, clip_quantiles: (f64, f64)) -> Result<LabSchema> {
        let mut stats = Vec::with_capacity(self.schema.n_features());
        for (f, feat) in self.schema.features().iter().enumerate() {
            let primary = self.observed(f, SlotKind::Value);
            if primary.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "feature {} has {} observed values; at least 2 are needed",
                    feat.id,
                    primary.len()
                )));
            }
            let mut values = primary;
            values.extend(self.observed(f, SlotKind::FollowupValue));
            let mut times = self.observed(f, SlotKind::Time);
            times.extend(self.observed(f, SlotKind::FollowupTime));
            let time = if times.len() >= 2 {
                ScaleStats::fit(&times, clip_quantiles)?
            } else {
                ScaleStats {
                    min: 0.0,
                    max: 0.0,
                    clip_lo: 0.0,
                    clip_hi: 0.0,
                }
            };
            stats.push(FeatureStats {
                value: ScaleStats::fit(&values, clip_quantiles)?,
                time,
            });
        }
        let mut schema = self.schema.clone();
        schema.set_stats(stats)?;
        Ok(schema)
    }

    /// Maps every present cell into `[0, 1]` using the fitted schema, which
    /// replaces this cohort's schema. Truth, when present, stays raw.
    pub fn normalized(&self, fitted: &LabSchema) -> Result<Cohort> {
        self.transform(fitted, |s, f, k, x| s.apply(f, k, x))
    }

    /// Inverse of [`Cohort::normalized`] (up to clipping).
    pub fn denormalized(&self) -> Result<Cohort> {
        let schema = self.schema.clone();
        self.transform(&schema, |s, f, k, x| s.invert(f, k, x))
    }

    fn transform(
        &self,
        schema: &LabSchema,
        op: impl Fn(&LabSchema, usize, SlotKind, f64) -> Result<f64>,
    ) -> Result<Cohort> {
        if schema.n_features() != self.schema.n_features() {
            return Err(Error::dim("schema feature count differs from cohort"));
        }
        let mut rows = self.rows.clone();
        for row in &mut rows {
            for f in 0..schema.n_features() {
                for kind in SlotKind::ALL {
                    if let Some(x) = row.get(f, kind) {
                        row.set(f, kind, Some(op(schema, f, kind, x)?));
                    }
                }
            }
        }
        Ok(Cohort {
            schema: schema.clone(),
            rows,
            truth: self.truth.clone(),
        })
    }

    /// Rows admitted strictly before `cutoff` go to train, the rest to test.
    pub fn temporal_split(&self, cutoff: i64) -> (Cohort, Cohort) {
        let (train, test): (Vec<usize>, Vec<usize>) =
            (0..self.rows.len()).partition(|&i| self.rows[i].admission_time < cutoff);
        (self.subset(&train), self.subset(&test))
    }

    /// Keeps rows with at least `k` present primary value/time cells.
    pub fn filter_min_observed(&self, k: usize) -> Cohort {
        self.filter(|r| r.observed_count() >= k)
    }

    pub fn admission_ids(&self) -> HashSet<&str> {
        self.rows.iter().map(|r| r.admission_id.as_str()).collect()
    }

    /// `rows × F` matrix of primary values with NaN for missing cells.
    pub fn value_matrix(&self) -> Matrix {
        let f = self.schema.n_features();
        let mut m = Matrix::filled(self.rows.len(), f, f64::NAN);
        for (i, r) in self.rows.iter().enumerate() {
            for (j, v) in r.values.iter().enumerate() {
                if let Some(v) = v {
                    m.set(i, j, *v);
                }
            }
        }
        m
    }

    /// `rows × 4F` matrix of every slot with NaN for missing cells.
    pub fn slot_matrix(&self) -> Matrix {
        let l = self.schema.seq_len();
        let mut m = Matrix::filled(self.rows.len(), l, f64::NAN);
        for (i, r) in self.rows.iter().enumerate() {
            for s in 0..l {
                if let Some(v) = r.cell(s) {
                    m.set(i, s, v);
                }
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: usize, time: i64, observed: usize, f: usize) -> PatientRow {
        let mut r = PatientRow::empty(f);
        r.subject_id = format!("s{id}");
        r.admission_id = format!("a{id}");
        r.group = "g".into();
        r.admission_time = time;
        for j in 0..observed {
            r.values[j] = Some(1.0 + j as f64);
            r.times[j] = Some(j as f64);
        }
        r
    }

    fn cohort(rows: Vec<PatientRow>, f: usize) -> Cohort {
        let ids: Vec<String> = (0..f).map(|j| format!("f{j}")).collect();
        Cohort::new(LabSchema::from_ids(&ids).unwrap(), rows).unwrap()
    }

    #[test]
    fn split_extremes() {
        let c = cohort((0..10).map(|i| row(i, 100 + i as i64, 1, 2)).collect(), 2);
        let (tr, te) = c.temporal_split(0);
        assert_eq!((tr.len(), te.len()), (0, 10));
        let (tr, te) = c.temporal_split(1000);
        assert_eq!((tr.len(), te.len()), (10, 0));
    }

    #[test]
    fn split_at_median_is_disjoint() {
        let c = cohort((0..10).map(|i| row(i, 100 + i as i64, 1, 2)).collect(), 2);
        let (tr, te) = c.temporal_split(105);
        assert_eq!((tr.len(), te.len()), (5, 5));
        assert!(tr.admission_ids().is_disjoint(&te.admission_ids()));
    }

    #[test]
    fn min_observed_boundary_is_inclusive() {
        // 9 features -> 18 possible value+time cells
        let rows = vec![row(0, 0, 0, 9), row(1, 0, 8, 9), row(2, 0, 9, 9)];
        let mut exactly_17 = row(3, 0, 9, 9);
        exactly_17.times[8] = None;
        exactly_17.values[8] = Some(2.0);
        let mut rows = rows;
        rows.push(exactly_17);
        let c = cohort(rows, 9);
        let filtered = c.filter_min_observed(17);
        let kept: Vec<&str> = filtered.rows.iter().map(|r| r.admission_id.as_str()).collect();
        assert_eq!(kept, ["a2", "a3"]);
        assert_eq!(c.filter_min_observed(0).len(), 4);
    }

    #[test]
    fn row_invariants() {
        let mut r = row(0, 0, 1, 1);
        r.values[0] = None;
        assert!(r.check_invariants().is_err());
        let mut r = row(0, 0, 1, 1);
        r.followup_times[0] = Some(-1.0);
        assert!(r.check_invariants().is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let rows: Vec<PatientRow> = (0..20)
            .map(|i| {
                let mut r = row(i, 0, 2, 2);
                r.values[0] = Some(10.0 + i as f64);
                r.times[1] = Some(i as f64 * 0.5);
                r
            })
            .collect();
        let c = cohort(rows, 2);
        let fitted = c.fit_normalizer((0.0, 1.0)).unwrap();
        let n = c.normalized(&fitted).unwrap();
        assert_eq!(n.rows[0].values[0], Some(0.0));
        assert_eq!(n.rows[19].values[0], Some(1.0));
        let back = n.denormalized().unwrap();
        for (a, b) in back.rows.iter().zip(&c.rows) {
            for f in 0..2 {
                for k in SlotKind::ALL {
                    match (a.get(f, k), b.get(f, k)) {
                        (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9),
                        (None, None) => {}
                        _ => panic!("missingness changed"),
                    }
                }
            }
        }
    }
}
