//! Ensemble inference, metrics, cross-validation and N/P sweeps.

mod cv;
mod ensemble;
mod metrics;
mod report;
mod sweep;

pub use cv::{build_instances, cross_validate, cross_validate_with, run_fold, CvConfig, CvOutcome, FoldRun, VolumeStore};
pub use ensemble::{
    ensemble_predict, ensemble_probabilities, group_ensembles, hard_label, mean_probabilities, score_source,
    EnsembleResult, ScoredInstance, Scorer, DEFAULT_THRESHOLD,
};
pub use metrics::{compute_auprc, compute_f1, mean_std, Confusion};
pub use report::{evaluate_scored, FoldMetrics, MetricsReport, REPORT_HEADER, STD_ESTIMATOR};
pub use sweep::{sweep, SeriesPoint, SweepCell, SweepConfig, SweepMode, SweepResults, N_GRID, P_GRID};
