//! Per-fold metrics and their aggregate report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ensemble::{group_ensembles, hard_label, ScoredInstance};
use super::metrics::{compute_auprc, compute_f1, mean_std};
use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "# sinus-mil metrics v1";
pub const STD_ESTIMATOR: &str = "sample (n-1)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auprc: f64,
    pub f1: f64,
    /// Scored units: sinuses when ensembled, instances otherwise.
    pub scored: usize,
    pub positives: usize,
}

/// Metrics of one test set. Ensembled: one score per (subject, side).
/// Otherwise: one score per instance.
pub fn evaluate_scored(fold: usize, scored: &[ScoredInstance], ensembled: bool, threshold: f64) -> Result<FoldMetrics> {
    if scored.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let (probs, labels): (Vec<[f64; 2]>, Vec<bool>) = if ensembled {
        group_ensembles(scored, threshold)?
            .into_iter()
            .map(|(r, l)| (r.probabilities, l.is_positive()))
            .unzip()
    } else {
        scored.iter().map(|s| (s.probabilities, s.label.is_positive())).unzip()
    };
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let preds: Vec<bool> = probs.iter().map(|&p| hard_label(p, threshold).is_positive()).collect();
    Ok(FoldMetrics {
        fold,
        auprc: compute_auprc(&scores, &labels)?,
        f1: compute_f1(&preds, &labels),
        scored: labels.len(),
        positives: labels.iter().filter(|&&l| l).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ensembled: bool,
    pub threshold: f64,
    pub n: Option<usize>,
    pub patch_size: Option<usize>,
    pub folds: Vec<FoldMetrics>,
    pub auprc_mean: f64,
    pub auprc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>, ensembled: bool, threshold: f64) -> Self {
        let a: Vec<f64> = folds.iter().map(|f| f.auprc).collect();
        let f: Vec<f64> = folds.iter().map(|f| f.f1).collect();
        let (auprc_mean, auprc_std) = mean_std(&a, true);
        let (f1_mean, f1_std) = mean_std(&f, true);
        MetricsReport {
            ensembled,
            threshold,
            n: None,
            patch_size: None,
            folds,
            auprc_mean,
            auprc_std,
            f1_mean,
            f1_std,
        }
    }

    pub fn with_sampling(mut self, n: usize, patch_size: usize) -> Self {
        self.n = Some(n);
        self.patch_size = Some(patch_size);
        self
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        let _ = writeln!(s, "ensembled\t{}", self.ensembled);
        let _ = writeln!(s, "threshold\t{}", self.threshold);
        let _ = writeln!(s, "n\t{}", opt(self.n));
        let _ = writeln!(s, "patch_size\t{}", opt(self.patch_size));
        let _ = writeln!(s, "folds\t{}", self.folds.len());
        let _ = writeln!(s, "std_estimator\t{STD_ESTIMATOR}");
        let _ = writeln!(s, "auprc_mean\t{}", self.auprc_mean);
        let _ = writeln!(s, "auprc_std\t{}", self.auprc_std);
        let _ = writeln!(s, "f1_mean\t{}", self.f1_mean);
        let _ = writeln!(s, "f1_std\t{}", self.f1_std);
        s.push('\n');
        s.push_str("fold\tauprc\tf1\tscored\tpositives\n");
        for f in &self.folds {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", f.fold, f.auprc, f.f1, f.scored, f.positives);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ctx = "metrics report";
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::parse(ctx, "missing header line"));
        }
        let mut kv = std::collections::HashMap::new();
        for line in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(ctx, format!("bad key/value line `{line}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::parse(ctx, format!("missing key `{k}`")));
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse(ctx, format!("`{k}` is not a number")))
        };
        let opt = |k: &str| -> Result<Option<usize>> {
            let v = get(k)?;
            if v == "-" {
                Ok(None)
            } else {
                v.parse()
                    .map(Some)
                    .map_err(|_| Error::parse(ctx, format!("`{k}` is not an integer")))
            }
        };
        if lines.next() != Some("fold\tauprc\tf1\tscored\tpositives") {
            return Err(Error::parse(ctx, "missing fold table header"));
        }
        let mut folds = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 5 {
                return Err(Error::parse(ctx, format!("fold row `{line}` needs 5 columns")));
            }
            let bad = |_| Error::parse(ctx, format!("bad fold row `{line}`"));
            folds.push(FoldMetrics {
                fold: c[0].parse().map_err(bad)?,
                auprc: c[1].parse().map_err(|_| Error::parse(ctx, format!("bad fold row `{line}`")))?,
                f1: c[2].parse().map_err(|_| Error::parse(ctx, format!("bad fold row `{line}`")))?,
                scored: c[3].parse().map_err(bad)?,
                positives: c[4].parse().map_err(bad)?,
            });
        }
        let declared: usize = get("folds")?
            .parse()
            .map_err(|_| Error::parse(ctx, "`folds` is not an integer"))?;
        if declared != folds.len() {
            return Err(Error::parse(ctx, "fold count does not match the fold table"));
        }
        Ok(MetricsReport {
            ensembled: get("ensembled")? == "true",
            threshold: num("threshold")?,
            n: opt("n")?,
            patch_size: opt("patch_size")?,
            folds,
            auprc_mean: num("auprc_mean")?,
            auprc_std: num("auprc_std")?,
            f1_mean: num("f1_mean")?,
            f1_std: num("f1_std")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Label, Side};

    #[test]
    fn report_text_round_trip() {
        let folds = vec![
            FoldMetrics { fold: 0, auprc: 0.8, f1: 0.7, scored: 20, positives: 6 },
            FoldMetrics { fold: 1, auprc: 0.9, f1: 0.75, scored: 20, positives: 7 },
            FoldMetrics { fold: 2, auprc: 0.7, f1: 0.5, scored: 21, positives: 6 },
        ];
        let r = MetricsReport::from_folds(folds, true, 0.5).with_sampling(5, 35);
        assert!((r.auprc_mean - 0.8).abs() < 1e-9 && (r.auprc_std - 0.1).abs() < 1e-9);
        let back = MetricsReport::from_text(&r.to_text()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_text().contains("std_estimator\tsample (n-1)"));
    }

    #[test]
    fn ensembled_n1_equals_per_instance() {
        let scored: Vec<ScoredInstance> = (0..6)
            .map(|i| ScoredInstance {
                subject_id: format!("s{}", i / 2),
                side: if i % 2 == 0 { Side::Left } else { Side::Right },
                label: Label::from_positive(i % 3 == 0),
                probabilities: [1.0 - 0.13 * i as f64, 0.13 * i as f64],
            })
            .collect();
        let a = evaluate_scored(0, &scored, true, 0.5).unwrap();
        let b = evaluate_scored(0, &scored, false, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(matches!(evaluate_scored(0, &[], true, 0.5), Err(Error::EmptySplit(_))));
    }
}
