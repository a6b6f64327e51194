use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token slots per feature, in sequence order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotKind {
    Value,
    Time,
    FollowupValue,
    FollowupTime,
}

impl SlotKind {
    pub const ALL: [SlotKind; 4] = [
        SlotKind::Value,
        SlotKind::Time,
        SlotKind::FollowupValue,
        SlotKind::FollowupTime,
    ];

    #[inline]
    pub fn offset(self) -> usize {
        match self {
            SlotKind::Value => 0,
            SlotKind::Time => 1,
            SlotKind::FollowupValue => 2,
            SlotKind::FollowupTime => 3,
        }
    }

    pub fn is_value(self) -> bool {
        matches!(self, SlotKind::Value | SlotKind::FollowupValue)
    }

    /// CSV column prefix.
    pub fn column_prefix(self) -> &'static str {
        match self {
            SlotKind::Value => "npval_",
            SlotKind::Time => "nptime_",
            SlotKind::FollowupValue => "npval_last_",
            SlotKind::FollowupTime => "nptime_last_",
        }
    }
}

pub const SLOTS_PER_FEATURE: usize = 4;

/// Clip-then-min-max scaling for one quantity.
///
/// `min`/`max` are the raw observed extremes; scaling maps
/// `[clip_lo, clip_hi]` onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub min: f64,
    pub max: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl ScaleStats {
    /// Fits clip bounds at the given quantiles (linear interpolation between
    /// order statistics).
    pub fn fit(values: &[f64], quantiles: (f64, f64)) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "normalizer needs at least 2 observations, got {}",
                values.len()
            )));
        }
        let (q_lo, q_hi) = quantiles;
        if !(0.0..=1.0).contains(&q_lo) || !(0.0..=1.0).contains(&q_hi) || q_lo > q_hi {
            return Err(Error::Config(format!("bad clip quantiles ({q_lo}, {q_hi})")));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            clip_lo: quantile_sorted(&sorted, q_lo),
            clip_hi: quantile_sorted(&sorted, q_hi),
        })
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.clip_hi > self.clip_lo)
    }

    #[inline]
    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.clip_lo, self.clip_hi)
    }

    /// Maps into `[0, 1]`; a degenerate range maps everything to 0.5.
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            return 0.5;
        }
        (self.clip(x) - self.clip_lo) / (self.clip_hi - self.clip_lo)
    }

    #[inline]
    pub fn invert(&self, y: f64) -> f64 {
        if self.is_degenerate() {
            return self.clip_lo;
        }
        self.clip_lo + y * (self.clip_hi - self.clip_lo)
    }
}

/// Empirical quantile with linear interpolation at position `q·(n−1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: String,
    pub name: String,
}

/// Per-feature scaling: one set for values (primary and follow-up), one for
/// times (primary and follow-up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    #[serde(flatten)]
    pub value: ScaleStats,
    pub time: ScaleStats,
}

/// Ordered registry of lab features and their token layout.
///
/// Feature `f` occupies slots `4f .. 4f+4` in the order value, time,
/// follow-up value, follow-up time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabSchema {
    features: Vec<Feature>,
    stats: Option<Vec<FeatureStats>>,
}

impl LabSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for f in &features {
            if !seen.insert(f.id.as_str()) {
                return Err(Error::Config(format!("duplicate feature id `{}`", f.id)));
            }
        }
        Ok(Self { features, stats: None })
    }

    pub fn from_ids<S: AsRef<str>>(ids: &[S]) -> Result<Self> {
        Self::new(
            ids.iter()
                .map(|id| Feature {
                    id: id.as_ref().to_string(),
                    name: id.as_ref().to_string(),
                })
                .collect(),
        )
    }

    #[inline]
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.features.len() * SLOTS_PER_FEATURE
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn feature_index(&self, id: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|f| f.id == id)
            .ok_or_else(|| Error::UnknownFeature(id.to_string()))
    }

    #[inline]
    pub fn slot(feature: usize, kind: SlotKind) -> usize {
        feature * SLOTS_PER_FEATURE + kind.offset()
    }

    #[inline]
    pub fn slot_kind(slot: usize) -> SlotKind {
        SlotKind::ALL[slot % SLOTS_PER_FEATURE]
    }

    #[inline]
    pub fn slot_feature(slot: usize) -> usize {
        slot / SLOTS_PER_FEATURE
    }

    pub fn stats(&self) -> Option<&[FeatureStats]> {
        self.stats.as_deref()
    }

    pub fn is_fitted(&self) -> bool {
        self.stats.is_some()
    }

    pub fn set_stats(&mut self, stats: Vec<FeatureStats>) -> Result<()> {
        if stats.len() != self.features.len() {
            return Err(Error::dim(format!(
                "{} stats for {} features",
                stats.len(),
                self.features.len()
            )));
        }
        self.stats = Some(stats);
        Ok(())
    }

    fn scale_for(&self, feature: usize, kind: SlotKind) -> Result<&ScaleStats> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::State("normalizer has not been fitted".into()))?;
        let fs = stats
            .get(feature)
            .ok_or_else(|| Error::State(format!("no fitted stats for feature index {feature}")))?;
        Ok(if kind.is_value() { &fs.value } else { &fs.time })
    }

    pub fn apply(&self, feature: usize, kind: SlotKind, x: f64) -> Result<f64> {
        Ok(self.scale_for(feature, kind)?.apply(x))
    }

    pub fn invert(&self, feature: usize, kind: SlotKind, y: f64) -> Result<f64> {
        Ok(self.scale_for(feature, kind)?.invert(y))
    }

    /// Ids of features whose fitted value range is degenerate.
    pub fn degenerate_features(&self) -> Vec<&str> {
        match &self.stats {
            None => Vec::new(),
            Some(st) => self
                .features
                .iter()
                .zip(st)
                .filter(|(_, s)| s.value.is_degenerate())
                .map(|(f, _)| f.id.as_str())
                .collect(),
        }
    }
}
