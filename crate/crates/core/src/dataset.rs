//! Subject/instance manifest, patient-level stratified splitting and
//! manifest validation.
//!
//! Split assignment is per subject. A subject is either in the fixed test
//! set or in the train+val pool; pool subjects may additionally carry a
//! validation fold index. Under fold `f`, pool subjects whose fold is `f`
//! form the validation split and every other pool subject trains.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Side::Left),
            "right" | "r" => Ok(Side::Right),
            other => Err(Error::parse("side", format!("unknown side {other:?}"))),
        }
    }
}

/// Binary label; `Anomaly` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Label::Anomaly
        } else {
            Label::Normal
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Anomaly
    }

    pub fn class_index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Anomaly => "anomaly",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" => Ok(Label::Normal),
            "anomaly" | "anomalous" | "1" => Ok(Label::Anomaly),
            other => Err(Error::parse("label", format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Subject-level placement produced by [`make_splits`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Assignment {
    #[default]
    Unassigned,
    Test,
    Pool {
        val_fold: Option<usize>,
    },
}

impl Assignment {
    pub fn split_for_fold(self, fold: usize) -> Option<Split> {
        match self {
            Assignment::Unassigned => None,
            Assignment::Test => Some(Split::Test),
            Assignment::Pool { val_fold } if val_fold == Some(fold) => Some(Split::Val),
            Assignment::Pool { .. } => Some(Split::Train),
        }
    }

    fn columns(self) -> (&'static str, String) {
        match self {
            Assignment::Unassigned => ("none", "-".into()),
            Assignment::Test => ("test", "-".into()),
            Assignment::Pool { val_fold: None } => ("trainval", "-".into()),
            Assignment::Pool { val_fold: Some(f) } => ("trainval", f.to_string()),
        }
    }

    fn from_columns(split: &str, fold: &str) -> Result<Self> {
        let fold = match fold.trim() {
            "-" | "" => None,
            f => Some(
                f.parse::<usize>()
                    .map_err(|e| Error::parse("fold column", e.to_string()))?,
            ),
        };
        match (split.trim(), fold) {
            ("none", None) => Ok(Assignment::Unassigned),
            ("test", None) => Ok(Assignment::Test),
            ("trainval", val_fold) => Ok(Assignment::Pool { val_fold }),
            (s, f) => Err(Error::parse(
                "split column",
                format!("invalid split/fold combination {s:?}/{f:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SideRecord {
    pub label: Label,
    /// Excluded sinuses are listed for completeness but never sampled.
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub sides: [SideRecord; 2],
    pub source_path: String,
    pub registered_path: String,
    pub assignment: Assignment,
}

impl SubjectRecord {
    pub fn new(subject_id: impl Into<String>, left: Label, right: Label) -> Self {
        SubjectRecord {
            subject_id: subject_id.into(),
            sides: [
                SideRecord {
                    label: left,
                    included: true,
                },
                SideRecord {
                    label: right,
                    included: true,
                },
            ],
            source_path: String::new(),
            registered_path: String::new(),
            assignment: Assignment::Unassigned,
        }
    }

    pub fn side(&self, side: Side) -> &SideRecord {
        &self.sides[side.index()]
    }

    pub fn side_mut(&mut self, side: Side) -> &mut SideRecord {
        &mut self.sides[side.index()]
    }

    pub fn included_sides(&self) -> impl Iterator<Item = Side> + '_ {
        Side::BOTH.into_iter().filter(|s| self.side(*s).included)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRow {
    pub subject_id: String,
    pub side: Side,
    pub centroid: [f64; 3],
    pub patch_size: usize,
    pub path: String,
    pub label: Label,
    pub assignment: Assignment,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub data_root: String,
    pub folds: usize,
    pub subjects: Vec<SubjectRecord>,
    pub instances: Vec<InstanceRow>,
}

impl Manifest {
    pub fn new(subjects: Vec<SubjectRecord>) -> Self {
        Manifest {
            data_root: ".".into(),
            folds: 0,
            subjects,
            instances: Vec::new(),
        }
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    /// Included (subject, side, label) triples.
    pub fn sinuses(&self) -> impl Iterator<Item = (&SubjectRecord, Side, Label)> + '_ {
        self.subjects.iter().flat_map(|s| {
            s.included_sides().map(move |side| (s, side, s.side(side).label))
        })
    }

    pub fn sinus_count(&self) -> usize {
        self.sinuses().count()
    }

    pub fn anomalous_fraction(&self) -> f64 {
        let (n, a) = self
            .sinuses()
            .fold((0usize, 0usize), |(n, a), (_, _, l)| (n + 1, a + l.is_positive() as usize));
        if n == 0 {
            0.0
        } else {
            a as f64 / n as f64
        }
    }

    fn assignment_map(&self) -> HashMap<&str, Assignment> {
        self.subjects
            .iter()
            .map(|s| (s.subject_id.as_str(), s.assignment))
            .collect()
    }

    /// Copies subject assignments onto every instance row.
    pub fn propagate_assignments(&mut self) {
        let map: HashMap<String, Assignment> = self
            .subjects
            .iter()
            .map(|s| (s.subject_id.clone(), s.assignment))
            .collect();
        for row in &mut self.instances {
            if let Some(a) = map.get(&row.subject_id) {
                row.assignment = *a;
            }
        }
    }

    pub fn split_of(&self, subject_id: &str, fold: usize) -> Option<Split> {
        self.subject(subject_id)
            .and_then(|s| s.assignment.split_for_fold(fold))
    }

    /// Included sinuses falling in `split` under `fold`.
    pub fn sinuses_in(&self, split: Split, fold: usize) -> Vec<(&SubjectRecord, Side, Label)> {
        self.sinuses()
            .filter(|(s, _, _)| s.assignment.split_for_fold(fold) == Some(split))
            .collect()
    }

    pub fn instances_in(&self, split: Split, fold: usize) -> Vec<&InstanceRow> {
        let map = self.assignment_map();
        self.instances
            .iter()
            .filter(|r| {
                map.get(r.subject_id.as_str())
                    .and_then(|a| a.split_for_fold(fold))
                    == Some(split)
            })
            .collect()
    }

    pub fn has_folds(&self) -> bool {
        self.folds >= 1
            && self
                .subjects
                .iter()
                .all(|s| s.assignment != Assignment::Unassigned)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Manifest::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# sinus-mil manifest v{MANIFEST_VERSION}\n"));
        out.push_str(&format!("# data_root\t{}\n", self.data_root));
        out.push_str(&format!("# folds\t{}\n", self.folds));
        out.push_str("[subjects]\n");
        out.push_str("subject_id\tleft_label\tleft_included\tright_label\tright_included\tsource_path\tregistered_path\tsplit\tfold\n");
        for s in &self.subjects {
            let (split, fold) = s.assignment.columns();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                s.subject_id,
                s.sides[0].label,
                s.sides[0].included as u8,
                s.sides[1].label,
                s.sides[1].included as u8,
                dash_if_empty(&s.source_path),
                dash_if_empty(&s.registered_path),
                split,
                fold
            ));
        }
        out.push_str("[instances]\n");
        out.push_str("subject_id\tside\tcx\tcy\tcz\tpatch_size\tpath\tlabel\tsplit\tfold\n");
        for r in &self.instances {
            let (split, fold) = r.assignment.columns();
            out.push_str(&format!(
                "{}\t{}\t{:?}\t{:?}\t{:?}\t{}\t{}\t{}\t{}\t{}\n",
                r.subject_id,
                r.side,
                r.centroid[0],
                r.centroid[1],
                r.centroid[2],
                r.patch_size,
                dash_if_empty(&r.path),
                r.label,
                split,
                fold
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().unwrap_or_default();
        let version = first
            .strip_prefix("# sinus-mil manifest v")
            .ok_or_else(|| Error::parse("manifest", "missing version header"))?
            .trim()
            .parse::<u32>()
            .map_err(|e| Error::parse("manifest version", e.to_string()))?;
        if version != MANIFEST_VERSION {
            return Err(Error::parse(
                "manifest",
                format!("unsupported version {version}"),
            ));
        }
        let mut m = Manifest::default();
        #[derive(PartialEq)]
        enum Section {
            Preamble,
            Subjects,
            Instances,
        }
        let mut section = Section::Preamble;
        let mut expect_header = false;
        for (lineno, line) in lines.enumerate() {
            let ctx = || format!("manifest line {}", lineno + 2);
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix("# ") {
                let mut kv = meta.splitn(2, '\t');
                match (kv.next(), kv.next()) {
                    (Some("data_root"), Some(v)) => m.data_root = v.to_string(),
                    (Some("folds"), Some(v)) => {
                        m.folds = v.parse().map_err(|_| Error::parse(ctx(), "bad folds"))?
                    }
                    _ => {}
                }
                continue;
            }
            match line.trim() {
                "[subjects]" => {
                    section = Section::Subjects;
                    expect_header = true;
                    continue;
                }
                "[instances]" => {
                    section = Section::Instances;
                    expect_header = true;
                    continue;
                }
                _ => {}
            }
            if expect_header {
                expect_header = false;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            match section {
                Section::Preamble => return Err(Error::parse(ctx(), "row outside a section")),
                Section::Subjects => {
                    if cols.len() != 9 {
                        return Err(Error::parse(ctx(), format!("expected 9 columns, got {}", cols.len())));
                    }
                    let included = |c: &str| match c {
                        "1" => Ok(true),
                        "0" => Ok(false),
                        _ => Err(Error::parse(ctx(), "included flag must be 0 or 1")),
                    };
                    m.subjects.push(SubjectRecord {
                        subject_id: cols[0].to_string(),
                        sides: [
                            SideRecord {
                                label: cols[1].parse()?,
                                included: included(cols[2])?,
                            },
                            SideRecord {
                                label: cols[3].parse()?,
                                included: included(cols[4])?,
                            },
                        ],
                        source_path: undash(cols[5]),
                        registered_path: undash(cols[6]),
                        assignment: Assignment::from_columns(cols[7], cols[8])?,
                    });
                }
                Section::Instances => {
                    if cols.len() != 10 {
                        return Err(Error::parse(ctx(), format!("expected 10 columns, got {}", cols.len())));
                    }
                    let num = |c: &str| {
                        c.parse::<f64>()
                            .map_err(|e| Error::parse(ctx(), e.to_string()))
                    };
                    m.instances.push(InstanceRow {
                        subject_id: cols[0].to_string(),
                        side: cols[1].parse()?,
                        centroid: [num(cols[2])?, num(cols[3])?, num(cols[4])?],
                        patch_size: cols[5]
                            .parse()
                            .map_err(|_| Error::parse(ctx(), "bad patch size"))?,
                        path: undash(cols[6]),
                        label: cols[7].parse()?,
                        assignment: Assignment::from_columns(cols[8], cols[9])?,
                    });
                }
            }
        }
        Ok(m)
    }
}

fn dash_if_empty(s: &str) -> &str {
    if s.is_empty() {
        "-"
    } else {
        s
    }
}

fn undash(s: &str) -> String {
    if s == "-" {
        String::new()
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 327 / 37 / 41 out of 405 sinuses.
    fn default() -> Self {
        SplitRatios {
            train: 0.807,
            val: 0.091,
            test: 0.102,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self, folds: usize) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidArgument("split ratios must be positive".into()));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("split ratios must sum to 1".into()));
        }
        if folds < 2 {
            return Err(Error::InvalidArgument("at least 2 folds are required".into()));
        }
        if self.test + folds as f64 * self.val > 1.0 + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "{folds} disjoint validation blocks of {} plus test {} exceed the cohort",
                self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Assigns subjects to the test set and to `folds` disjoint validation
/// blocks, stratified on the per-sinus label. Whole subjects move together.
///
/// Sinus targets per bin are `round(ratio * total)`; the remainder of the
/// pool always trains, so every fold sees the same train/val/test sizes.
pub fn make_splits(manifest: &Manifest, ratios: SplitRatios, seed: u64, folds: usize) -> Result<Manifest> {
    ratios.validate(folds)?;
    let total = manifest.sinus_count();
    let positives = manifest
        .sinuses()
        .filter(|(_, _, l)| l.is_positive())
        .count();
    let negatives = total - positives;
    let needed = folds + 2;
    for (name, count) in [("anomaly", positives), ("normal", negatives)] {
        if count < needed {
            return Err(Error::StratumTooSmall {
                stratum: name.into(),
                count,
            });
        }
    }

    // bins: 0 = test, 1..=folds = validation blocks, folds+1 = train remainder
    let nbins = folds + 2;
    let mut target_total = vec![0usize; nbins];
    target_total[0] = (ratios.test * total as f64).round() as usize;
    for b in 1..=folds {
        target_total[b] = (ratios.val * total as f64).round() as usize;
    }
    let assigned: usize = target_total.iter().sum();
    target_total[nbins - 1] = total.saturating_sub(assigned);
    let frac = positives as f64 / total as f64;
    let target_pos: Vec<f64> = target_total.iter().map(|&t| t as f64 * frac).collect();
    let target_neg: Vec<f64> = target_total.iter().map(|&t| t as f64 * (1.0 - frac)).collect();

    let mut order: Vec<usize> = (0..manifest.subjects.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let counts = |s: &SubjectRecord| {
        s.included_sides().fold((0usize, 0usize), |(p, n), side| {
            if s.side(side).label.is_positive() {
                (p + 1, n)
            } else {
                (p, n + 1)
            }
        })
    };
    // Subjects carrying the minority label are placed first so their
    // distribution is settled while every bin still has room.
    order.sort_by_key(|&i| {
        let (p, n) = counts(&manifest.subjects[i]);
        (std::cmp::Reverse(p), std::cmp::Reverse(n))
    });

    let mut cur_pos = vec![0usize; nbins];
    let mut cur_neg = vec![0usize; nbins];
    let mut bin_of = vec![usize::MAX; manifest.subjects.len()];
    for &i in &order {
        let (p, n) = counts(&manifest.subjects[i]);
        if p + n == 0 {
            bin_of[i] = nbins - 1;
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0usize);
        for b in 0..nbins {
            let mut score = 0.0;
            if p > 0 {
                score += if target_pos[b] > 0.0 {
                    (target_pos[b] - cur_pos[b] as f64) / target_pos[b] * p as f64
                } else {
                    -1e9
                };
            }
            if n > 0 {
                score += if target_neg[b] > 0.0 {
                    (target_neg[b] - cur_neg[b] as f64) / target_neg[b] * n as f64
                } else {
                    -1e9
                };
            }
            if score > best.0 {
                best = (score, b);
            }
        }
        let b = best.1;
        cur_pos[b] += p;
        cur_neg[b] += n;
        bin_of[i] = b;
    }

    let mut out = manifest.clone();
    out.folds = folds;
    for (i, s) in out.subjects.iter_mut().enumerate() {
        s.assignment = match bin_of[i] {
            0 => Assignment::Test,
            b if b <= folds => Assignment::Pool {
                val_fold: Some(b - 1),
            },
            _ => Assignment::Pool { val_fold: None },
        };
    }
    out.propagate_assignments();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// A subject's instances (or its record) disagree on split or fold.
    Leakage { subject_id: String, assignments: Vec<String> },
    /// An instance references a (subject, side) with no included record.
    Orphan { subject_id: String, side: Side },
    /// Instances of one (subject, side) carry a label different from the record.
    LabelMismatch { subject_id: String, side: Side },
    /// A fold index beyond the declared fold count.
    FoldOutOfRange { subject_id: String, fold: usize },
    DuplicateSubject { subject_id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Leakage {
                subject_id,
                assignments,
            } => write!(f, "leakage: subject {subject_id} appears in {}", assignments.join(", ")),
            Violation::Orphan { subject_id, side } => {
                write!(f, "orphan: instance of {subject_id}/{side} has no included subject record")
            }
            Violation::LabelMismatch { subject_id, side } => {
                write!(f, "label mismatch: {subject_id}/{side}")
            }
            Violation::FoldOutOfRange { subject_id, fold } => {
                write!(f, "fold out of range: subject {subject_id} has fold {fold}")
            }
            Violation::DuplicateSubject { subject_id } => {
                write!(f, "duplicate subject record {subject_id}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "manifest valid");
        }
        writeln!(f, "{} violation(s)", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

pub fn validate_manifest(manifest: &Manifest) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for s in &manifest.subjects {
        if !seen.insert(s.subject_id.as_str()) {
            violations.push(Violation::DuplicateSubject {
                subject_id: s.subject_id.clone(),
            });
        }
        if let Assignment::Pool { val_fold: Some(f) } = s.assignment {
            if f >= manifest.folds {
                violations.push(Violation::FoldOutOfRange {
                    subject_id: s.subject_id.clone(),
                    fold: f,
                });
            }
        }
    }

    let mut per_subject: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    let mut reported_orphans = BTreeSet::new();
    let mut reported_labels = BTreeSet::new();
    for row in &manifest.instances {
        let (split, fold) = row.assignment.columns();
        per_subject
            .entry(row.subject_id.as_str())
            .or_default()
            .insert(format!("{split}/{fold}"));
        match manifest.subject(&row.subject_id) {
            Some(rec) if rec.side(row.side).included => {
                if rec.side(row.side).label != row.label
                    && reported_labels.insert((row.subject_id.clone(), row.side))
                {
                    violations.push(Violation::LabelMismatch {
                        subject_id: row.subject_id.clone(),
                        side: row.side,
                    });
                }
            }
            _ => {
                if reported_orphans.insert((row.subject_id.clone(), row.side)) {
                    violations.push(Violation::Orphan {
                        subject_id: row.subject_id.clone(),
                        side: row.side,
                    });
                }
            }
        }
    }
    for (id, mut set) in per_subject {
        if let Some(rec) = manifest.subject(id) {
            let (split, fold) = rec.assignment.columns();
            set.insert(format!("{split}/{fold}"));
        }
        if set.len() > 1 {
            violations.push(Violation::Leakage {
                subject_id: id.to_string(),
                assignments: set.into_iter().collect(),
            });
        }
    }
    ValidationReport { violations }
}
