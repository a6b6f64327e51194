use std::path::Path;

use rayon::prelude::*;

use super::checkpoint::load_trainer;
use super::forward::{active_slots, forward_subset};
use super::params::{ModelConfig, ModelParams};
use super::train::Trainer;
use crate::data::{Cohort, LabSchema, MaskPlan, SlotKind};
use crate::error::{Error, Result};

/// Predictions for one feature across all rows of a normalized cohort, in
/// normalized units. The target's value cell is forced to MASKED in every
/// row; nothing else is hidden.
pub fn impute_normalized(
    cohort: &Cohort,
    params: &ModelParams,
    cfg: &ModelConfig,
    feature: usize,
) -> Result<Vec<f64>> {
    let slot = LabSchema::slot(feature, SlotKind::Value);
    cohort
        .rows
        .par_iter()
        .map(|row| {
            let mut plan = MaskPlan::unmasked(row);
            plan.force_mask(feature);
            let subset = active_slots(&plan, &[]);
            let tr = forward_subset(row, &plan, params, cfg, &subset, None)?;
            let k = subset.binary_search(&slot).expect("target slot is active");
            Ok(tr.preds[k])
        })
        .collect()
}

/// Denormalized predictions for `feature_id`. `cohort` must be normalized
/// with a fitted schema.
pub fn impute(cohort: &Cohort, params: &ModelParams, cfg: &ModelConfig, feature_id: &str) -> Result<Vec<f64>> {
    let f = cohort.schema.feature_index(feature_id)?;
    let preds = impute_normalized(cohort, params, cfg, f)?;
    preds
        .into_iter()
        .map(|p| cohort.schema.invert(f, SlotKind::Value, p))
        .collect()
}

/// A trained model bundled with the scaling it was trained under.
#[derive(Clone, Debug)]
pub struct LabMae {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub schema: LabSchema,
}

impl LabMae {
    pub fn from_trainer(t: &Trainer) -> Result<Self> {
        let schema = t
            .schema
            .clone()
            .ok_or_else(|| Error::State("trainer has no fitted schema; train on a normalized cohort".into()))?;
        Ok(Self {
            config: t.model.clone(),
            params: t.params.clone(),
            schema,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_trainer(&load_trainer(path)?)
    }

    /// Normalizes a raw cohort with the training stats.
    pub fn prepare(&self, raw: &Cohort) -> Result<Cohort> {
        if raw.schema.features() != self.schema.features() {
            return Err(Error::dim("cohort features differ from the trained schema"));
        }
        raw.normalized(&self.schema)
    }

    /// Denormalized predictions for `feature_id` over a raw cohort.
    pub fn impute(&self, raw: &Cohort, feature_id: &str) -> Result<Vec<f64>> {
        impute(&self.prepare(raw)?, &self.params, &self.config, feature_id)
    }
}
