//! K-fold cross-validation over a split manifest.

use std::borrow::Cow;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ensemble::{score_source, ScoredInstance, DEFAULT_THRESHOLD};
use super::report::{evaluate_scored, FoldMetrics, MetricsReport};
use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::model::{train_with, EpochRecord, NetworkConfig, ResNet3d, TrainConfig};
use crate::sampling::{extract_sides, subject_seed, CentroidModel, Instance, SamplingMode};
use crate::seed;
use crate::volume::{PatchSize, Volume};

/// Registered volumes addressed by subject id.
pub trait VolumeStore: Sync {
    fn volume(&self, subject_id: &str) -> Result<Cow<'_, Volume>>;
}

impl VolumeStore for HashMap<String, Volume> {
    fn volume(&self, subject_id: &str) -> Result<Cow<'_, Volume>> {
        self.get(subject_id)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::InvalidArgument(format!("no volume for subject {subject_id}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub n: usize,
    pub patch_size: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub ensembled: bool,
    pub threshold: f64,
    /// Master seed; instance draws, weight init and batch order derive from it.
    pub seed: u64,
    pub eval_batch: usize,
    /// Run folds concurrently.
    pub parallel_folds: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            n: 5,
            patch_size: 35,
            network: NetworkConfig::full(),
            train: TrainConfig::default(),
            ensembled: true,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            eval_batch: 16,
            parallel_folds: false,
        }
    }
}

impl CvConfig {
    pub fn init_seed(&self, fold: usize) -> u64 {
        seed::derive(self.seed, 0x1000 + fold as u64)
    }

    pub fn train_config(&self, fold: usize) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(self.seed, 0x2000 + fold as u64),
            ..self.train.clone()
        }
    }
}

/// Instances of every included sinus in `split` under `fold`, `n` per side.
/// Draws depend only on the master seed and the subject id, so the first
/// draw at any `n` is the same crop.
#[allow(clippy::too_many_arguments)]
pub fn build_instances(
    manifest: &Manifest,
    store: &dyn VolumeStore,
    model: &CentroidModel,
    split: Split,
    fold: usize,
    n: usize,
    p: PatchSize,
    master_seed: u64,
) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for subj in &manifest.subjects {
        if subj.assignment.split_for_fold(fold) != Some(split) {
            continue;
        }
        let sides: Vec<_> = subj.included_sides().collect();
        if sides.is_empty() {
            continue;
        }
        let v = store.volume(&subj.subject_id)?;
        let seed = subject_seed(master_seed, &subj.subject_id);
        for mut inst in extract_sides(&v, model, n, p, seed, &sides, SamplingMode::Stochastic)? {
            inst.subject_id = subj.subject_id.clone();
            inst.label = Some(subj.side(inst.side).label);
            out.push(inst);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub scored: Vec<ScoredInstance>,
}

impl FoldRun {
    pub fn metrics(&self, ensembled: bool, threshold: f64) -> Result<FoldMetrics> {
        evaluate_scored(self.fold, &self.scored, ensembled, threshold)
    }
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub runs: Vec<FoldRun>,
    pub report: MetricsReport,
}

impl CvOutcome {
    /// Report for either scoring mode from the same trained folds.
    pub fn report_for(&self, ensembled: bool, threshold: f64) -> Result<MetricsReport> {
        let folds = self
            .runs
            .iter()
            .map(|r| r.metrics(ensembled, threshold))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport::from_folds(folds, ensembled, threshold).with_sampling(
            self.report.n.unwrap_or(0),
            self.report.patch_size.unwrap_or(0),
        ))
    }
}

/// Trains one fold and scores its test instances.
pub fn run_fold(
    manifest: &Manifest,
    store: &dyn VolumeStore,
    model: &CentroidModel,
    cfg: &CvConfig,
    fold: usize,
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<FoldRun> {
    let p = PatchSize::new(cfg.patch_size)?;
    let build = |split| build_instances(manifest, store, model, split, fold, cfg.n, p, cfg.seed);
    let train_set = build(Split::Train)?;
    let val_set = build(Split::Val)?;
    let test_set = build(Split::Test)?;
    if test_set.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let mut net = ResNet3d::<f32>::new(cfg.network.clone(), cfg.init_seed(fold))?;
    let outcome = train_with(&mut net, &train_set, &val_set, &cfg.train_config(fold), &mut |r| on_epoch(fold, r))?;
    drop(train_set);
    let best = outcome.best.to_network()?;
    let probs = score_source(&best, &test_set, cfg.eval_batch)?;
    let scored = test_set
        .iter()
        .zip(probs)
        .map(|(i, p)| ScoredInstance {
            subject_id: i.subject_id.clone(),
            side: i.side,
            label: i.label.expect("labelled"),
            probabilities: p,
        })
        .collect();
    Ok(FoldRun {
        fold,
        history: outcome.history,
        best_epoch: outcome.best.epoch,
        scored,
    })
}

pub fn cross_validate(
    manifest: &Manifest,
    store: &dyn VolumeStore,
    model: &CentroidModel,
    cfg: &CvConfig,
) -> Result<CvOutcome> {
    cross_validate_with(manifest, store, model, cfg, &|_, _| {})
}

/// As [`cross_validate`], calling `on_epoch(fold, record)` as training
/// progresses.
pub fn cross_validate_with(
    manifest: &Manifest,
    store: &dyn VolumeStore,
    model: &CentroidModel,
    cfg: &CvConfig,
    on_epoch: &(dyn Fn(usize, &EpochRecord) + Sync),
) -> Result<CvOutcome> {
    if !manifest.has_folds() {
        return Err(Error::MissingFolds);
    }
    let folds: Vec<usize> = (0..manifest.folds).collect();
    let one = |fold: usize| run_fold(manifest, store, model, cfg, fold, &mut |f, r| on_epoch(f, r));
    let runs: Vec<FoldRun> = if cfg.parallel_folds {
        folds.into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        folds.into_iter().map(one).collect::<Result<_>>()?
    };
    let metrics = runs
        .iter()
        .map(|r| r.metrics(cfg.ensembled, cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::from_folds(metrics, cfg.ensembled, cfg.threshold).with_sampling(cfg.n, cfg.patch_size);
    Ok(CvOutcome { runs, report })
}
