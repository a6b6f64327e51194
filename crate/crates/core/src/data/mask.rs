use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cohort::PatientRow;
use super::schema::{LabSchema, SlotKind, SLOTS_PER_FEATURE};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellState {
    /// Absent in the data; never supervised, never attended to.
    Missing,
    /// Present and visible to the model.
    Observed,
    /// Present but hidden behind the mask token; a reconstruction target.
    Masked,
}

/// Per-slot cell states for one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub cells: Vec<CellState>,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// Observed/missing states with nothing masked.
    pub fn unmasked(row: &PatientRow) -> Self {
        let l = row.n_features() * SLOTS_PER_FEATURE;
        let cells = (0..l)
            .map(|s| if row.cell(s).is_some() { CellState::Observed } else { CellState::Missing })
            .collect();
        Self {
            cells,
            mask_ratio: 0.0,
            seed: 0,
        }
    }

    /// Each present value cell (primary or follow-up) is masked independently
    /// with probability `mask_ratio`. Paired time cells stay visible unless
    /// `mask_times` is set.
    pub fn draw(row: &PatientRow, mask_ratio: f64, seed: u64, mask_times: bool) -> Self {
        assert!((0.0..=1.0).contains(&mask_ratio), "mask_ratio must lie in [0, 1]");
        let mut plan = Self::unmasked(row);
        plan.mask_ratio = mask_ratio;
        plan.seed = seed;
        let mut rng = rng_from_seed(seed);
        for s in 0..plan.cells.len() {
            let kind = LabSchema::slot_kind(s);
            if !kind.is_value() || plan.cells[s] != CellState::Observed {
                continue;
            }
            // one draw per present value cell keeps the stream aligned
            let u: f64 = rng.random();
            if u < mask_ratio {
                plan.cells[s] = CellState::Masked;
                if mask_times && plan.cells[s + 1] == CellState::Observed {
                    plan.cells[s + 1] = CellState::Masked;
                }
            }
        }
        plan
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn count(&self, state: CellState) -> usize {
        self.cells.iter().filter(|&&c| c == state).count()
    }

    /// Forces the primary value cell of `feature` to be masked.
    pub fn force_mask(&mut self, feature: usize) {
        self.cells[LabSchema::slot(feature, SlotKind::Value)] = CellState::Masked;
    }
}

/// Free-function form of [`MaskPlan::draw`].
pub fn draw_mask_plan(row: &PatientRow, mask_ratio: f64, seed: u64) -> MaskPlan {
    MaskPlan::draw(row, mask_ratio, seed, false)
}
