//! Declarative pipeline configuration: a TOML file, flag overrides on top,
//! validation before any stage runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SplitRatios;
use crate::ensemble_eval::{CvConfig, SweepConfig, SweepMode, DEFAULT_THRESHOLD, N_GRID, P_GRID};
use crate::model::{NetworkConfig, TrainConfig};
use crate::phantom::PhantomSpec;
use crate::registration::RegistrationConfig;
use crate::volume::PatchSize;

/// Overrides `data_root` when set and non-empty.
pub const DATA_ROOT_ENV: &str = "SINUS_MIL_DATA_ROOT";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// Invalid configuration, detected before any work starts.
#[derive(Debug, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Input dataset directory holding `manifest.tsv`, the volumes it names
    /// and the centroid annotations. Unset means the phantom stage output.
    pub data_root: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub phantom: PhantomSpec,
    pub registration: RegistrationStage,
    pub sampling: SamplingStage,
    pub split: SplitStage,
    pub model: ModelStage,
    pub train: TrainConfig,
    pub eval: EvalStage,
    pub sweep: SweepStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_root: None,
            out: PathBuf::from("runs/default"),
            seed: 0,
            threads: 0,
            phantom: PhantomSpec::default(),
            registration: RegistrationStage::default(),
            sampling: SamplingStage::default(),
            split: SplitStage::default(),
            model: ModelStage::default(),
            train: TrainConfig::default(),
            eval: EvalStage::default(),
            sweep: SweepStage::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationStage {
    /// Fixed volume relative to the data root. Unset: the first subject.
    pub reference: Option<PathBuf>,
    pub levels: Vec<usize>,
    pub max_iterations: usize,
    pub initial_rotation_step: f64,
    pub initial_translation_step: f64,
    pub min_rotation_step: f64,
    pub min_translation_step: f64,
}

impl Default for RegistrationStage {
    fn default() -> Self {
        let c = RegistrationConfig::default();
        RegistrationStage {
            reference: None,
            levels: c.levels,
            max_iterations: c.max_iterations,
            initial_rotation_step: c.initial_rotation_step,
            initial_translation_step: c.initial_translation_step,
            min_rotation_step: c.min_rotation_step,
            min_translation_step: c.min_translation_step,
        }
    }
}

impl RegistrationStage {
    pub fn search(&self) -> RegistrationConfig {
        RegistrationConfig {
            levels: self.levels.clone(),
            max_iterations: self.max_iterations,
            initial_rotation_step: self.initial_rotation_step,
            initial_translation_step: self.initial_translation_step,
            min_rotation_step: self.min_rotation_step,
            min_translation_step: self.min_translation_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingStage {
    /// Centroid annotation table relative to the data root.
    pub annotations: PathBuf,
    pub n: usize,
    pub patch_size: usize,
    /// Every draw is the side mean instead of a Gaussian sample.
    pub mean_centroids: bool,
    /// Accept N and P outside the experimental grids.
    pub allow_off_grid: bool,
}

impl Default for SamplingStage {
    fn default() -> Self {
        SamplingStage {
            annotations: PathBuf::from("annotations.tsv"),
            n: 5,
            patch_size: 35,
            mean_centroids: false,
            allow_off_grid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitStage {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub folds: usize,
}

impl Default for SplitStage {
    fn default() -> Self {
        let r = SplitRatios::default();
        SplitStage {
            train: r.train,
            val: r.val,
            test: r.test,
            folds: 3,
        }
    }
}

impl SplitStage {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelStage {
    /// `full` or `tiny`.
    pub network: String,
}

impl Default for ModelStage {
    fn default() -> Self {
        ModelStage { network: "full".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    pub ensembled: bool,
    pub threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalStage {
    fn default() -> Self {
        EvalStage {
            ensembled: true,
            threshold: DEFAULT_THRESHOLD,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepStage {
    pub n_grid: Vec<usize>,
    pub p_grid: Vec<usize>,
    pub mode: SweepMode,
    pub parallel_folds: bool,
}

impl Default for SweepStage {
    fn default() -> Self {
        let g = SweepConfig::default();
        SweepStage {
            n_grid: g.n_grid,
            p_grid: g.p_grid,
            mode: g.mode,
            parallel_folds: false,
        }
    }
}

impl SweepStage {
    pub fn grid(&self) -> SweepConfig {
        SweepConfig {
            n_grid: self.n_grid.clone(),
            p_grid: self.p_grid.clone(),
            mode: self.mode,
        }
    }
}

/// Values given on the command line; each replaces its config entry.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub patch_size: Option<usize>,
    pub folds: Option<usize>,
    pub ensembled: Option<bool>,
    pub network: Option<String>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    /// File (or defaults), then flags, then the data-root environment
    /// variable, then validation.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            cfg.data_root = Some(PathBuf::from(root));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.n {
            self.sampling.n = v;
        }
        if let Some(v) = o.patch_size {
            self.sampling.patch_size = v;
        }
        if let Some(v) = o.folds {
            self.split.folds = v;
        }
        if let Some(v) = o.ensembled {
            self.eval.ensembled = v;
        }
        if let Some(v) = &o.network {
            self.model.network = v.clone();
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        let lib = |e: crate::error::Error| ConfigError(e.to_string());
        self.phantom.validate().map_err(lib)?;
        self.network().map_err(lib)?.validate().map_err(lib)?;
        self.train.validate().map_err(lib)?;
        self.split.ratios().validate(self.split.folds).map_err(lib)?;
        let r = &self.registration;
        if r.levels.is_empty() || r.levels.contains(&0) {
            return err("registration.levels must be non-empty and positive".into());
        }
        if r.max_iterations == 0 {
            return err("registration.max_iterations must be positive".into());
        }
        let steps = [r.initial_rotation_step, r.initial_translation_step, r.min_rotation_step, r.min_translation_step];
        if steps.iter().any(|s| !(*s > 0.0)) {
            return err("registration step sizes must be positive".into());
        }
        self.check_sampling(self.sampling.n, self.sampling.patch_size)?;
        let cells = self.sweep.grid().cells().map_err(lib)?;
        for (n, p) in cells {
            self.check_sampling(n, p)?;
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return err(format!("eval.threshold {} must lie in (0, 1)", self.eval.threshold));
        }
        if self.eval.batch_size == 0 {
            return err("eval.batch_size must be positive".into());
        }
        Ok(())
    }

    fn check_sampling(&self, n: usize, p: usize) -> Result<(), ConfigError> {
        if n == 0 {
            return Err(ConfigError("N must be at least 1".into()));
        }
        PatchSize::new(p).map_err(|e| ConfigError(e.to_string()))?;
        if p > super::REGISTERED_DIM {
            return Err(ConfigError(format!(
                "P={p} exceeds the registered grid of {} voxels",
                super::REGISTERED_DIM
            )));
        }
        if !self.sampling.allow_off_grid {
            if !N_GRID.contains(&n) {
                return Err(ConfigError(format!(
                    "N={n} is outside the grid {N_GRID:?}; set sampling.allow_off_grid = true to use it"
                )));
            }
            if !P_GRID.contains(&p) {
                return Err(ConfigError(format!(
                    "P={p} is outside the grid {P_GRID:?}; set sampling.allow_off_grid = true to use it"
                )));
            }
        }
        Ok(())
    }

    pub fn network(&self) -> crate::error::Result<NetworkConfig> {
        NetworkConfig::preset(&self.model.network)
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(|| self.out.join("phantom"))
    }

    /// Cross-validation settings shared by `train`, `predict` and `sweep`.
    pub fn cv(&self) -> CvConfig {
        CvConfig {
            n: self.sampling.n,
            patch_size: self.sampling.patch_size,
            network: self.network().expect("validated"),
            train: self.train.clone(),
            ensembled: self.eval.ensembled,
            threshold: self.eval.threshold,
            seed: self.seed,
            eval_batch: self.eval.batch_size,
            parallel_folds: self.sweep.parallel_folds,
        }
    }
}
