//! Configuration-driven orchestration of the pipeline stages.

mod config;
mod stages;
mod store;

pub use config::{
    ConfigError, EvalStage, ModelStage, Overrides, PipelineConfig, RegistrationStage, SamplingStage, SplitStage,
    SweepStage, DATA_ROOT_ENV, RESOLVED_CONFIG_FILE,
};
pub use stages::{
    mode_name, run, scored_from_tsv, scored_to_tsv, stage_dir, Locked, Log, MissingPrerequisite, RunLock, Stage,
    CENTROID_MODEL_FILE, CHECKPOINT_FILE, ENSEMBLES_FILE, HISTORY_FILE, LOCK_FILE, METRICS_FILE, REGISTERED_DIM,
    REPORT_FILE, SCORES_FILE, SERIES_FILE, SWEEP_RESULTS_FILE,
};
pub use store::{resolve, DiskInstances, DiskVolumeStore};
