//! Metrics and the evaluation protocol.

mod metrics;
mod protocol;

pub use metrics::{mae, mse, r2, rmse, wasserstein1};
pub use protocol::{
    benchmark, bootstrap_rmse_gap, evaluate_all, evaluate_feature, followup_ablation, pooled_mse, predict_feature, read_records_csv,
    stratify_by_group, win_counts, write_ablation_csv, write_records_csv, Ablation, BaselineMethod, Imputer, Metric, MetricRecord,
    Predictions, Stratum, WinCountTable, DEFAULT_MIN_GROUP_N,
};
