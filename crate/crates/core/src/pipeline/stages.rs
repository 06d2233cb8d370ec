//! One runner per subcommand. A stage reads earlier outputs, writes only
//! under `<out>/<stage>/` and leaves the resolved configuration there.
//!
//! Path bases: `source_path` entries resolve against the data root;
//! registered volumes and instances resolve against `out`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use thiserror::Error;

use super::config::{ConfigError, PipelineConfig, RESOLVED_CONFIG_FILE};
use super::store::{resolve, DiskInstances, DiskVolumeStore};
use crate::dataset::{make_splits, validate_manifest, Assignment, InstanceRow, Manifest, Side, Split};
use crate::ensemble_eval::{
    evaluate_scored, group_ensembles, mean_std, score_source, sweep, MetricsReport, ScoredInstance, VolumeStore,
    STD_ESTIMATOR,
};
use crate::error::Error;
use crate::model::{train_with, write_history, Checkpoint, ResNet3d};
use crate::phantom::{generate_cohort, MANIFEST_FILE};
use crate::registration::register_with;
use crate::sampling::{extract_sides, fit_centroid_model, read_annotations, subject_seed, CentroidModel, SamplingMode};
use crate::volume::{load_volume, save_volume, PatchSize};

/// Edge length of the registered grid.
pub const REGISTERED_DIM: usize = 128;
pub const LOCK_FILE: &str = ".sinus-mil.lock";
pub const CENTROID_MODEL_FILE: &str = "centroid_model.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.tsv";
pub const SCORES_FILE: &str = "instances.tsv";
pub const ENSEMBLES_FILE: &str = "ensembles.tsv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const SWEEP_RESULTS_FILE: &str = "results.tsv";
pub const SERIES_FILE: &str = "series.tsv";
pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantom,
    Register,
    FitCentroids,
    Extract,
    Split,
    Train,
    Predict,
    Evaluate,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Phantom,
        Stage::Register,
        Stage::FitCentroids,
        Stage::Extract,
        Stage::Split,
        Stage::Train,
        Stage::Predict,
        Stage::Evaluate,
        Stage::Sweep,
        Stage::Report,
    ];

    /// Subcommand and output directory name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Register => "register",
            Stage::FitCentroids => "fit-centroids",
            Stage::Extract => "extract",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Error)]
#[error("missing {}: {hint}", path.display())]
pub struct MissingPrerequisite {
    pub path: PathBuf,
    pub hint: String,
}

#[derive(Debug, Error)]
#[error("{} is in use by another run (delete {} if it is stale)", dir.display(), dir.join(LOCK_FILE).display())]
pub struct Locked {
    pub dir: PathBuf,
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Locked { dir: out.to_path_buf() }.into()),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub type Log<'a> = &'a (dyn Fn(&str) + Sync);

pub fn stage_dir(cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    cfg.out.join(stage.name())
}

/// Runs `stage` under the output-directory lock.
pub fn run(stage: Stage, cfg: &PipelineConfig, log: Log) -> Result<()> {
    let _lock = RunLock::acquire(&cfg.out)?;
    match stage {
        Stage::Phantom => phantom(cfg, log),
        Stage::Register => register(cfg, log),
        Stage::FitCentroids => fit_centroids(cfg, log),
        Stage::Extract => extract(cfg, log),
        Stage::Split => split(cfg, log),
        Stage::Train => train(cfg, log),
        Stage::Predict => predict(cfg, log),
        Stage::Evaluate => evaluate(cfg, log),
        Stage::Sweep => run_sweep(cfg, log),
        Stage::Report => report(cfg, log),
    }
}

/// Empties `dir` and records the resolved configuration in it.
fn fresh(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

fn require(path: PathBuf, producer: Stage) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(MissingPrerequisite {
            path,
            hint: format!("run `sinus-mil {}` first", producer.name()),
        }
        .into())
    }
}

fn output(cfg: &PipelineConfig, stage: Stage, file: &str) -> Result<PathBuf> {
    require(stage_dir(cfg, stage).join(file), stage)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("reading {}", path.display()))
}

fn data_manifest(cfg: &PipelineConfig) -> Result<(PathBuf, Manifest)> {
    let root = cfg.data_root();
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(MissingPrerequisite {
            path,
            hint: "run `sinus-mil phantom` first, or point data_root (or SINUS_MIL_DATA_ROOT) at a dataset".into(),
        }
        .into());
    }
    let m = load_manifest(&path)?;
    if m.subjects.is_empty() {
        bail!("{} lists no subjects", path.display());
    }
    Ok((root, m))
}

fn phantom(cfg: &PipelineConfig, log: Log) -> Result<()> {
    let dir = stage_dir(cfg, Stage::Phantom);
    fresh(&dir, cfg)?;
    let out = generate_cohort(&cfg.phantom, &dir)?;
    log(&format!(
        "phantom: {} subjects, {} of {} sinuses anomalous, written to {}",
        out.manifest.subjects.len(),
        out.manifest.sinuses().filter(|(_, _, l)| l.is_positive()).count(),
        out.manifest.sinus_count(),
        dir.display()
    ));
    Ok(())
}

struct RegistrationRow {
    subject_id: String,
    ncc_before: f64,
    ncc_after: f64,
    converged: bool,
    iterations: Vec<usize>,
    transform: String,
}

fn register(cfg: &PipelineConfig, log: Log) -> Result<()> {
    let (root, mut manifest) = data_manifest(cfg)?;
    let fixed_path = match &cfg.registration.reference {
        Some(r) => root.join(r),
        None => resolve(&root, &manifest.subjects[0].source_path),
    };
    if !fixed_path.exists() {
        return Err(MissingPrerequisite {
            path: fixed_path,
            hint: "set registration.reference to an existing volume under the data root".into(),
        }
        .into());
    }
    let fixed = load_volume(&fixed_path).with_context(|| format!("reading {}", fixed_path.display()))?;
    let dir = stage_dir(cfg, Stage::Register);
    fresh(&dir, cfg)?;
    fs::create_dir_all(dir.join("volumes"))?;
    fs::create_dir_all(dir.join("transforms"))?;
    let search = cfg.registration.search();
    log(&format!("register: {} subjects onto {}", manifest.subjects.len(), fixed_path.display()));
    let rows = manifest
        .subjects
        .par_iter()
        .map(|s| -> Result<RegistrationRow> {
            if s.source_path.is_empty() {
                bail!("subject {} has no source volume in the manifest", s.subject_id);
            }
            let src = resolve(&root, &s.source_path);
            let moving = load_volume(&src).with_context(|| format!("reading {}", src.display()))?;
            let r = register_with(&fixed, &moving, &search)?;
            let mut warped = r.warped;
            if warped.dims() != [REGISTERED_DIM; 3] {
                warped = warped.resample([REGISTERED_DIM; 3])?;
            }
            save_volume(&warped, dir.join("volumes").join(format!("{}.nii.gz", s.subject_id)))?;
            r.transform.save(dir.join("transforms").join(format!("{}.txt", s.subject_id)))?;
            log(&format!(
                "register: {} ncc {:.4} -> {:.4}{}",
                s.subject_id,
                r.ncc_before,
                r.ncc_after,
                if r.converged { "" } else { " (iteration budget exhausted)" }
            ));
            Ok(RegistrationRow {
                subject_id: s.subject_id.clone(),
                ncc_before: r.ncc_before,
                ncc_after: r.ncc_after,
                converged: r.converged,
                iterations: r.iterations,
                transform: r.transform.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = String::from("subject_id\tncc_before\tncc_after\tconverged\titerations\ttransform\n");
    for r in &rows {
        let its: Vec<String> = r.iterations.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(
            table,
            "{}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            r.subject_id,
            r.ncc_before,
            r.ncc_after,
            r.converged,
            its.join(","),
            r.transform
        );
    }
    fs::write(dir.join("registration.tsv"), table)?;
    for s in &mut manifest.subjects {
        s.registered_path = format!("{}/volumes/{}.nii.gz", Stage::Register.name(), s.subject_id);
    }
    manifest.data_root = root.display().to_string();
    manifest.save(dir.join(MANIFEST_FILE))?;
    let unconverged = rows.iter().filter(|r| !r.converged).count();
    if unconverged > 0 {
        log(&format!("register: {unconverged} registrations hit the iteration budget"));
    }
    Ok(())
}

fn fit_centroids(cfg: &PipelineConfig, log: Log) -> Result<()> {
    let path = cfg.data_root().join(&cfg.sampling.annotations);
    if !path.exists() {
        return Err(MissingPrerequisite {
            path,
            hint: "provide a centroid annotation table (subject_id, side, x, y, z); `sinus-mil phantom` writes one".into(),
        }
        .into());
    }
    let annotations = read_annotations(&path).with_context(|| format!("reading {}", path.display()))?;
    let model = fit_centroid_model(&annotations)?;
    let dir = stage_dir(cfg, Stage::FitCentroids);
    fresh(&dir, cfg)?;
    model.save(dir.join(CENTROID_MODEL_FILE))?;
    for side in Side::BOTH {
        let g = model.side(side);
        log(&format!("fit-centroids: {side} mean {:.2?} std {:.2?}", g.mean, g.std));
    }
    Ok(())
}

fn split(cfg: &PipelineConfig, log: Log) -> Result<()> {
    let (_, manifest) = data_manifest(cfg)?;
    let m = make_splits(&manifest, cfg.split.ratios(), cfg.seed, cfg.split.folds)?;
    let check = validate_manifest(&m);
    if !check.is_valid() {
        bail!("split manifest failed validation:\n{check}");
    }
    let dir = stage_dir(cfg, Stage::Split);
    fresh(&dir, cfg)?;
    m.save(dir.join(MANIFEST_FILE))?;
    let mut summary = String::from("fold\tsplit\tsinuses\tanomalous\n");
    for fold in 0..m.folds {
        for s in [Split::Train, Split::Val, Split::Test] {
            let sinuses = m.sinuses_in(s, fold);
            let pos = sinuses.iter().filter(|(_, _, l)| l.is_positive()).count();
            let _ = writeln!(summary, "{fold}\t{s}\t{}\t{pos}", sinuses.len());
            if fold == 0 {
                log(&format!("split: {s} {} sinuses, {pos} anomalous", sinuses.len()));
            }
        }
    }
    fs::write(dir.join("summary.tsv"), summary)?;
    Ok(())
}

fn centroid_model(cfg: &PipelineConfig) -> Result<CentroidModel> {
    let path = output(cfg, Stage::FitCentroids, CENTROID_MODEL_FILE)?;
    CentroidModel::load(&path).with_context(|| format!("reading {}", path.display()))
}

fn extract(cfg: &PipelineConfig, log: Log) -> Result<()> {
    let reg = load_manifest(&output(cfg, Stage::Register, MANIFEST_FILE)?)?;
    let model = centroid_model(cfg)?;
    let n = cfg.sampling.n;
    let p = PatchSize::new(cfg.sampling.patch_size)?;
    let mode = if cfg.sampling.mean_centroids {
        SamplingMode::Mean
    } else {
        SamplingMode::Stochastic
    };
    let store = DiskVolumeStore::registered(&reg, &cfg.out)?;
    let dir = stage_dir(cfg, Stage::Extract);
    fresh(&dir, cfg)?;
    fs::create_dir_all(dir.join("instances"))?;
    let rows = reg
        .subjects
        .par_iter()
        .map(|s| -> Result<Vec<InstanceRow>> {
            let sides: Vec<Side> = s.included_sides().collect();
            if sides.is_empty() {
                return Ok(Vec::new());
            }
            let v = store.volume(&s.subject_id)?;
            let seed = subject_seed(cfg.seed, &s.subject_id);
            let mut counters = [0usize; 2];
            let mut rows = Vec::new();
            for inst in extract_sides(&v, &model, n, p, seed, &sides, mode)? {
                let k = &mut counters[inst.side.index()];
                let rel = format!("{}/instances/{}_{}_{:02}.nii", Stage::Extract.name(), s.subject_id, inst.side, *k);
                *k += 1;
                save_volume(&inst.data, cfg.out.join(&rel))?;
                rows.push(InstanceRow {
                    subject_id: s.subject_id.clone(),
                    side: inst.side,
                    centroid: inst.centroid,
                    patch_size: p.get(),
                    path: rel,
                    label: s.side(inst.side).label,
                    assignment: Assignment::Unassigned,
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = reg;
    m.instances = rows.concat();
    m.save(dir.join(MANIFEST_FILE))?;
    log(&format!("extract: {} instances (N={n}, P={})", m.instances.len(), p.get()));
    Ok(())
}

/// Extracted instances joined with the split assignments.
fn dataset_view(cfg: &PipelineConfig) -> Result<Manifest> {
    let mut m = load_manifest(&output(cfg, Stage::Extract, MANIFEST_FILE)?)?;
    let split = load_manifest(&output(cfg, Stage::Split, MANIFEST_FILE)?)?;
    let map: HashMap<&str, Assignment> = split.subjects.iter().map(|s| (s.subject_id.as_str(), s.assignment)).collect();
    for s in &mut m.subjects {
        s.assignment = *map
            .get(s.subject_id.as_str())
            .ok_or_else(|| anyhow!("subject {} is not in the split manifest; rerun `sinus-mil split`", s.subject_id))?;
    }
    m.folds = split.folds;
    m.propagate_assignments();
    if !m.has_folds() {
        return Err(Error::MissingFolds.into());
    }
    Ok(m)
}

fn fold_source(cfg: &PipelineConfig, m: &Manifest, split: Split, fold: usize) -> DiskInstances {
    DiskInstances::new(m.instances_in(split, fold).into_iter().cloned().collect(), &cfg.out)
}

fn fold_dir(cfg: &PipelineConfig, stage: Stage, fold: usize) -> PathBuf {
    stage_dir(cfg, stage).join(format!("fold{fold}"))
}

fn train(cfg: &PipelineConfig, log: Log) -> Result<()> {
    let view = dataset_view(cfg)?;
    let cv = cfg.cv();
    let dir = stage_dir(cfg, Stage::Train);
    fresh(&dir, cfg)?;
    for fold in 0..view.folds {
        let train_set = fold_source(cfg, &view, Split::Train, fold);
        let val_set = fold_source(cfg, &view, Split::Val, fold);
        log(&format!(
            "train: fold {fold}, {} training and {} validation instances",
            train_set.rows.len(),
            val_set.rows.len()
        ));
        let mut net = ResNet3d::<f32>::new(cv.network.clone(), cv.init_seed(fold))?;
        let outcome = train_with(&mut net, &train_set, &val_set, &cv.train_config(fold), &mut |r| {
            log(&format!(
                "train: fold {fold} epoch {} train loss {:.5} val loss {:.5} lr {:e}",
                r.epoch, r.train_loss, r.val_loss, r.lr
            ))
        })?;
        let fdir = fold_dir(cfg, Stage::Train, fold);
        fs::create_dir_all(&fdir)?;
        outcome.best.save(fdir.join(CHECKPOINT_FILE))?;
        write_history(fdir.join(HISTORY_FILE), &outcome.history)?;
        log(&format!("train: fold {fold} best epoch {}", outcome.best.epoch));
    }
    Ok(())
}

pub fn scored_to_tsv(scored: &[ScoredInstance]) -> String {
    let mut s = String::from("subject_id\tside\tlabel\tp_normal\tp_anomaly\n");
    for r in scored {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:?}\t{:?}",
            r.subject_id, r.side, r.label, r.probabilities[0], r.probabilities[1]
        );
    }
    s
}

pub fn scored_from_tsv(text: &str) -> crate::error::Result<Vec<ScoredInstance>> {
    let ctx = "instance scores";
    let mut lines = text.lines();
    if lines.next() != Some("subject_id\tside\tlabel\tp_normal\tp_anomaly") {
        return Err(Error::Parse {
            context: ctx.into(),
            reason: "missing header".into(),
        });
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Parse {
                context: ctx.into(),
                reason: format!("bad row `{line}`"),
            };
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 5 {
                return Err(bad());
            }
            Ok(ScoredInstance {
                subject_id: c[0].to_string(),
                side: c[1].parse().map_err(|_| bad())?,
                label: c[2].parse().map_err(|_| bad())?,
                probabilities: [c[3].parse().map_err(|_| bad())?, c[4].parse().map_err(|_| bad())?],
            })
        })
        .collect()
}

fn predict(cfg: &PipelineConfig, log: Log) -> Result<()> {
    let view = dataset_view(cfg)?;
    let checkpoints = (0..view.folds)
        .map(|f| require(fold_dir(cfg, Stage::Train, f).join(CHECKPOINT_FILE), Stage::Train))
        .collect::<Result<Vec<_>>>()?;
    let dir = stage_dir(cfg, Stage::Predict);
    fresh(&dir, cfg)?;
    for (fold, ck) in checkpoints.iter().enumerate() {
        let net = Checkpoint::<f32>::load(ck)
            .with_context(|| format!("reading {}", ck.display()))?
            .to_network()?;
        let test = fold_source(cfg, &view, Split::Test, fold);
        if test.rows.is_empty() {
            return Err(Error::EmptySplit("test".into()).into());
        }
        let probs = score_source(&net, &test, cfg.eval.batch_size)?;
        let scored: Vec<ScoredInstance> = test
            .rows
            .iter()
            .zip(probs)
            .map(|(r, p)| ScoredInstance {
                subject_id: r.subject_id.clone(),
                side: r.side,
                label: r.label,
                probabilities: p,
            })
            .collect();
        let fdir = fold_dir(cfg, Stage::Predict, fold);
        fs::create_dir_all(&fdir)?;
        fs::write(fdir.join(SCORES_FILE), scored_to_tsv(&scored))?;
        let mut ens = String::from("subject_id\tside\tn\tp_normal\tp_anomaly\tprediction\tlabel\n");
        let groups = group_ensembles(&scored, cfg.eval.threshold)?;
        for (r, label) in &groups {
            let _ = writeln!(
                ens,
                "{}\t{}\t{}\t{:?}\t{:?}\t{}\t{}",
                r.subject_id, r.side, r.n, r.probabilities[0], r.probabilities[1], r.prediction, label
            );
        }
        fs::write(fdir.join(ENSEMBLES_FILE), ens)?;
        log(&format!(
            "predict: fold {fold}, {} instances over {} sinuses",
            scored.len(),
            groups.len()
        ));
    }
    Ok(())
}

/// Directory name for a scoring mode under `evaluate/`.
pub fn mode_name(ensembled: bool) -> &'static str {
    if ensembled {
        "ensembled"
    } else {
        "per-instance"
    }
}

/// N and P as extracted, falling back to the configuration.
fn extracted_sampling(cfg: &PipelineConfig) -> (usize, usize) {
    let path = stage_dir(cfg, Stage::Extract).join(MANIFEST_FILE);
    let Ok(m) = Manifest::load(path) else {
        return (cfg.sampling.n, cfg.sampling.patch_size);
    };
    let Some(first) = m.instances.first() else {
        return (cfg.sampling.n, cfg.sampling.patch_size);
    };
    let n = m
        .instances
        .iter()
        .filter(|r| r.subject_id == first.subject_id && r.side == first.side)
        .count();
    (n, first.patch_size)
}

fn evaluate(cfg: &PipelineConfig, log: Log) -> Result<()> {
    let split = load_manifest(&output(cfg, Stage::Split, MANIFEST_FILE)?)?;
    let ensembled = cfg.eval.ensembled;
    let folds = (0..split.folds)
        .map(|fold| -> Result<_> {
            let path = require(fold_dir(cfg, Stage::Predict, fold).join(SCORES_FILE), Stage::Predict)?;
            let scored = scored_from_tsv(&fs::read_to_string(&path)?).with_context(|| format!("reading {}", path.display()))?;
            Ok(evaluate_scored(fold, &scored, ensembled, cfg.eval.threshold)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let (n, p) = extracted_sampling(cfg);
    let report = MetricsReport::from_folds(folds, ensembled, cfg.eval.threshold).with_sampling(n, p);
    let dir = stage_dir(cfg, Stage::Evaluate).join(mode_name(ensembled));
    fresh(&dir, cfg)?;
    report.save(dir.join(METRICS_FILE))?;
    log(&format!(
        "evaluate ({}): AUPRC {:.4} ± {:.4}, F1 {:.4} ± {:.4} over {} folds",
        mode_name(ensembled),
        report.auprc_mean,
        report.auprc_std,
        report.f1_mean,
        report.f1_std,
        report.folds.len()
    ));
    Ok(())
}

fn run_sweep(cfg: &PipelineConfig, log: Log) -> Result<()> {
    if cfg.sampling.mean_centroids {
        return Err(ConfigError("sampling.mean_centroids is not supported by sweep".into()).into());
    }
    let reg = load_manifest(&output(cfg, Stage::Register, MANIFEST_FILE)?)?;
    let split = load_manifest(&output(cfg, Stage::Split, MANIFEST_FILE)?)?;
    let model = centroid_model(cfg)?;
    let store = DiskVolumeStore::registered(&reg, &cfg.out)?;
    let dir = stage_dir(cfg, Stage::Sweep);
    fresh(&dir, cfg)?;
    let base = cfg.cv();
    let mut failure: Option<anyhow::Error> = None;
    let write_cell = |n: usize, p: usize, outcome: &crate::ensemble_eval::CvOutcome| -> Result<()> {
        let cdir = dir.join("cells").join(format!("N{n}_P{p}"));
        fs::create_dir_all(&cdir)?;
        outcome.report.save(cdir.join(METRICS_FILE))?;
        let other = outcome.report_for(!base.ensembled, base.threshold)?;
        other.save(cdir.join(format!("metrics.{}.txt", mode_name(!base.ensembled))))?;
        log(&format!(
            "sweep: N={n} P={p} AUPRC {:.4} ± {:.4} F1 {:.4} ± {:.4}",
            outcome.report.auprc_mean, outcome.report.auprc_std, outcome.report.f1_mean, outcome.report.f1_std
        ));
        Ok(())
    };
    let results = sweep(
        &split,
        &store,
        &model,
        &base,
        &cfg.sweep.grid(),
        &|fold, r| log(&format!("sweep: fold {fold} epoch {} val loss {:.5}", r.epoch, r.val_loss)),
        &mut |n, p, outcome| {
            if let Err(e) = write_cell(n, p, outcome) {
                failure.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    fs::write(dir.join(SWEEP_RESULTS_FILE), results.to_tsv())?;
    fs::write(dir.join(SERIES_FILE), results.series_text())?;
    Ok(())
}

fn metrics_table(title: &str, r: &MetricsReport) -> String {
    let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
    let mut s = format!("## {title}\n\n");
    let _ = writeln!(
        s,
        "N = {}, P = {}, threshold {}, std estimator: {STD_ESTIMATOR}\n",
        opt(r.n),
        opt(r.patch_size),
        r.threshold
    );
    s.push_str("| fold | AUPRC | F1 | scored | positives |\n|---|---|---|---|---|\n");
    for f in &r.folds {
        let _ = writeln!(s, "| {} | {:.4} | {:.4} | {} | {} |", f.fold, f.auprc, f.f1, f.scored, f.positives);
    }
    let _ = writeln!(
        s,
        "| mean ± std | {:.4} ± {:.4} | {:.4} ± {:.4} | | |\n",
        r.auprc_mean, r.auprc_std, r.f1_mean, r.f1_std
    );
    s
}

/// Per-(N, P) mean ± std from a sweep results table.
fn sweep_table(results: &str) -> Result<String> {
    let mut cells: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for line in results.lines().skip(1).filter(|l| !l.is_empty()) {
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 5 {
            bail!("bad sweep row `{line}`");
        }
        let e = cells.entry((c[0].parse()?, c[1].parse()?)).or_default();
        e.0.push(c[3].parse()?);
        e.1.push(c[4].parse()?);
    }
    let mut s = String::from("## Sweep\n\n| N | P | folds | AUPRC | F1 |\n|---|---|---|---|---|\n");
    for ((n, p), (a, f)) in &cells {
        let (am, asd) = mean_std(a, true);
        let (fm, fsd) = mean_std(f, true);
        let _ = writeln!(s, "| {n} | {p} | {} | {am:.4} ± {asd:.4} | {fm:.4} ± {fsd:.4} |", a.len());
    }
    s.push('\n');
    Ok(s)
}

fn report(cfg: &PipelineConfig, log: Log) -> Result<()> {
    let mut doc = String::from("# sinus-mil report\n\n");
    let mut found = false;
    for ensembled in [true, false] {
        let path = stage_dir(cfg, Stage::Evaluate).join(mode_name(ensembled)).join(METRICS_FILE);
        if path.exists() {
            let r = MetricsReport::load(&path).with_context(|| format!("reading {}", path.display()))?;
            let title = if ensembled {
                "Evaluation, ensembled per sinus"
            } else {
                "Evaluation, per instance"
            };
            doc.push_str(&metrics_table(title, &r));
            found = true;
        }
    }
    let sweep_dir = stage_dir(cfg, Stage::Sweep);
    let results = sweep_dir.join(SWEEP_RESULTS_FILE);
    let mut series = None;
    if results.exists() {
        doc.push_str(&sweep_table(&fs::read_to_string(&results)?)?);
        series = Some(fs::read_to_string(sweep_dir.join(SERIES_FILE))?);
        found = true;
    }
    if !found {
        return Err(MissingPrerequisite {
            path: stage_dir(cfg, Stage::Evaluate),
            hint: "run `sinus-mil evaluate` or `sinus-mil sweep` first".into(),
        }
        .into());
    }
    let dir = stage_dir(cfg, Stage::Report);
    fresh(&dir, cfg)?;
    fs::write(dir.join(REPORT_FILE), &doc)?;
    if let Some(s) = series {
        fs::write(dir.join(SERIES_FILE), s)?;
    }
    log(&format!("report: written to {}", dir.join(REPORT_FILE).display()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;

    #[test]
    fn scores_round_trip_exactly() {
        let scored = vec![
            ScoredInstance {
                subject_id: "a".into(),
                side: Side::Left,
                label: Label::Anomaly,
                probabilities: [0.1 + 0.2, 1.0 - (0.1 + 0.2)],
            },
            ScoredInstance {
                subject_id: "b".into(),
                side: Side::Right,
                label: Label::Normal,
                probabilities: [std::f64::consts::FRAC_1_PI, 1.0 - std::f64::consts::FRAC_1_PI],
            },
        ];
        assert_eq!(scored_from_tsv(&scored_to_tsv(&scored)).unwrap(), scored);
    }

    #[test]
    fn second_lock_is_rejected_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        let err = RunLock::acquire(dir.path()).unwrap_err();
        assert!(err.downcast_ref::<Locked>().is_some());
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn sweep_table_aggregates_folds() {
        let t = sweep_table("N\tP\tfold\tAUPRC\tF1\n5\t35\t0\t0.8\t0.7\n5\t35\t1\t0.9\t0.9\n").unwrap();
        assert!(t.contains("| 5 | 35 | 2 | 0.8500 ± 0.0707 | 0.8000 ± 0.1414 |"), "{t}");
    }
}
