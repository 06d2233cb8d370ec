//! Cross-validation sweeps over sample size N and patch size P.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::cv::{cross_validate_with, CvConfig, CvOutcome, VolumeStore};
use super::report::MetricsReport;
use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::model::EpochRecord;
use crate::sampling::CentroidModel;

pub const N_GRID: [usize; 5] = [1, 5, 10, 15, 20];
pub const P_GRID: [usize; 5] = [25, 30, 35, 40, 45];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SweepMode {
    FullFactorial,
    /// N varies at `p_for_n_sweep`; P varies at `n_for_p_sweep`.
    AxisWise { p_for_n_sweep: usize, n_for_p_sweep: usize },
}

impl SweepMode {
    pub fn axis_wise_default() -> Self {
        SweepMode::AxisWise { p_for_n_sweep: 35, n_for_p_sweep: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_grid: Vec<usize>,
    pub p_grid: Vec<usize>,
    pub mode: SweepMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_grid: N_GRID.to_vec(),
            p_grid: P_GRID.to_vec(),
            mode: SweepMode::axis_wise_default(),
        }
    }
}

impl SweepConfig {
    /// The (N, P) cells to run, without duplicates, in run order.
    pub fn cells(&self) -> Result<Vec<(usize, usize)>> {
        if self.n_grid.is_empty() || self.p_grid.is_empty() {
            return Err(Error::InvalidArgument("sweep grids must be non-empty".into()));
        }
        let mut cells = Vec::new();
        match self.mode {
            SweepMode::FullFactorial => {
                for &n in &self.n_grid {
                    for &p in &self.p_grid {
                        cells.push((n, p));
                    }
                }
            }
            SweepMode::AxisWise { p_for_n_sweep, n_for_p_sweep } => {
                for &n in &self.n_grid {
                    cells.push((n, p_for_n_sweep));
                }
                for &p in &self.p_grid {
                    cells.push((n_for_p_sweep, p));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        cells.retain(|c| seen.insert(*c));
        Ok(cells)
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub n: usize,
    pub p: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Default)]
pub struct SweepResults {
    pub cells: Vec<SweepCell>,
}

/// One point of a plot series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub x: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub auprc_mean: f64,
    pub auprc_std: f64,
}

impl SweepResults {
    /// Delimited table with one row per (N, P, fold).
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("N\tP\tfold\tAUPRC\tF1\n");
        for c in &self.cells {
            for f in &c.report.folds {
                let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", c.n, c.p, f.fold, f.auprc, f.f1);
            }
        }
        s
    }

    fn point(c: &SweepCell, x: usize) -> SeriesPoint {
        SeriesPoint {
            x,
            f1_mean: c.report.f1_mean,
            f1_std: c.report.f1_std,
            auprc_mean: c.report.auprc_mean,
            auprc_std: c.report.auprc_std,
        }
    }

    /// Metrics against P at fixed N, ordered by P.
    pub fn series_vs_p(&self, n: usize) -> Vec<SeriesPoint> {
        let mut v: Vec<_> = self.cells.iter().filter(|c| c.n == n).map(|c| Self::point(c, c.p)).collect();
        v.sort_by_key(|p| p.x);
        v
    }

    /// Metrics against N at fixed P, ordered by N.
    pub fn series_vs_n(&self, p: usize) -> Vec<SeriesPoint> {
        let mut v: Vec<_> = self.cells.iter().filter(|c| c.p == p).map(|c| Self::point(c, c.n)).collect();
        v.sort_by_key(|p| p.x);
        v
    }

    /// Plot-ready blocks: every fixed-N P series and fixed-P N series with
    /// more than one point.
    pub fn series_text(&self) -> String {
        let mut ns: Vec<usize> = self.cells.iter().map(|c| c.n).collect();
        let mut ps: Vec<usize> = self.cells.iter().map(|c| c.p).collect();
        ns.sort_unstable();
        ns.dedup();
        ps.sort_unstable();
        ps.dedup();
        let mut s = String::new();
        let block = |s: &mut String, title: String, axis: &str, pts: Vec<SeriesPoint>| {
            let _ = writeln!(s, "# {title}");
            let _ = writeln!(s, "{axis}\tF1_mean\tF1_std\tAUPRC_mean\tAUPRC_std");
            for p in pts {
                let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", p.x, p.f1_mean, p.f1_std, p.auprc_mean, p.auprc_std);
            }
            s.push('\n');
        };
        for &n in &ns {
            let pts = self.series_vs_p(n);
            if pts.len() > 1 {
                block(&mut s, format!("metrics vs P at N={n}"), "P", pts);
            }
        }
        for &p in &ps {
            let pts = self.series_vs_n(p);
            if pts.len() > 1 {
                block(&mut s, format!("metrics vs N at P={p}"), "N", pts);
            }
        }
        s
    }
}

/// Runs [`cross_validate_with`] for every cell; `on_cell` sees each finished
/// cell with its full outcome.
pub fn sweep(
    manifest: &Manifest,
    store: &dyn VolumeStore,
    model: &CentroidModel,
    base: &CvConfig,
    grid: &SweepConfig,
    on_epoch: &(dyn Fn(usize, &EpochRecord) + Sync),
    on_cell: &mut dyn FnMut(usize, usize, &CvOutcome),
) -> Result<SweepResults> {
    let mut results = SweepResults::default();
    for (n, p) in grid.cells()? {
        let cfg = CvConfig { n, patch_size: p, ..base.clone() };
        let outcome = cross_validate_with(manifest, store, model, &cfg, on_epoch)?;
        on_cell(n, p, &outcome);
        results.cells.push(SweepCell { n, p, report: outcome.report });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_wise_cells_follow_the_fixed_values() {
        let cells = SweepConfig::default().cells().unwrap();
        assert_eq!(cells.len(), 9);
        assert!(cells[..5].iter().all(|&(_, p)| p == 35));
        assert!(cells[5..].iter().all(|&(n, _)| n == 15));
        assert!(!cells[5..].contains(&(15, 35)));
    }

    #[test]
    fn full_factorial_is_complete() {
        let g = SweepConfig { mode: SweepMode::FullFactorial, ..Default::default() };
        assert_eq!(g.cells().unwrap().len(), 25);
        let one = SweepConfig { n_grid: vec![5], p_grid: vec![35], mode: SweepMode::FullFactorial };
        assert_eq!(one.cells().unwrap(), vec![(5, 35)]);
        assert!(SweepConfig { n_grid: vec![], ..Default::default() }.cells().is_err());
    }
}
