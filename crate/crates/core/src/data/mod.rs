//! Schema, cohort storage, normalization, mask plans and file formats.

mod cohort;
pub mod io;
mod mask;
mod schema;

pub use cohort::{Cohort, PatientRow};
pub use io::{load_cohort, save_cohort};
pub use mask::{draw_mask_plan, CellState, MaskPlan};
pub use schema::{quantile_sorted, Feature, FeatureStats, LabSchema, ScaleStats, SlotKind, SLOTS_PER_FEATURE};

/// Default clip quantiles for outlier limiting.
pub const DEFAULT_CLIP_QUANTILES: (f64, f64) = (0.005, 0.995);

/// Default minimum number of present value/time cells for a training row.
pub const DEFAULT_MIN_OBSERVED: usize = 17;
