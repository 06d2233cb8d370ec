//! Gaussian centroid models and stochastic sub-volume extraction.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Side};
use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{PatchSize, Volume};

/// Edge length of every instance fed to the classifier.
pub const INSTANCE_DIM: usize = 64;

/// Sample sizes used in the experimental grid.
pub const N_GRID: [usize; 5] = [1, 5, 10, 15, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidAnnotation {
    pub subject_id: String,
    pub side: Side,
    /// Voxel coordinates in the registered grid.
    pub centroid: [f64; 3],
}

/// Reads a tab- or comma-separated table with columns
/// `subject_id, side, x, y, z`. A header row is optional.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<CentroidAnnotation>> {
    let text = std::fs::read_to_string(path)?;
    parse_annotations(&text)
}

pub fn parse_annotations(text: &str) -> Result<Vec<CentroidAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else {
            line.split(',').collect()
        };
        if i == 0 && cols.first().map(|c| c.trim()) == Some("subject_id") {
            continue;
        }
        if cols.len() != 5 {
            return Err(Error::parse(
                format!("annotation line {}", i + 1),
                format!("expected 5 columns, got {}", cols.len()),
            ));
        }
        let num = |c: &str| {
            c.trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(format!("annotation line {}", i + 1), e.to_string()))
        };
        out.push(CentroidAnnotation {
            subject_id: cols[0].trim().to_string(),
            side: cols[1].parse()?,
            centroid: [num(cols[2])?, num(cols[3])?, num(cols[4])?],
        });
    }
    Ok(out)
}

pub fn write_annotations(path: impl AsRef<Path>, annotations: &[CentroidAnnotation]) -> Result<()> {
    let mut s = String::from("subject_id\tside\tx\ty\tz\n");
    for a in annotations {
        let _ = writeln!(
            s,
            "{}\t{}\t{:?}\t{:?}\t{:?}",
            a.subject_id, a.side, a.centroid[0], a.centroid[1], a.centroid[2]
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Independent per-axis Gaussians for one side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisGaussians {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidModel {
    pub left: AxisGaussians,
    pub right: AxisGaussians,
}

impl CentroidModel {
    pub fn side(&self, side: Side) -> &AxisGaussians {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Per-side, per-axis sample mean and unbiased (n - 1) standard deviation.
pub fn fit_centroid_model(annotations: &[CentroidAnnotation]) -> Result<CentroidModel> {
    let fit = |side: Side| -> Result<AxisGaussians> {
        let pts: Vec<[f64; 3]> = annotations
            .iter()
            .filter(|a| a.side == side)
            .map(|a| a.centroid)
            .collect();
        if pts.len() < 2 {
            return Err(Error::TooFewAnnotations {
                side: side.to_string(),
                count: pts.len(),
            });
        }
        let n = pts.len() as f64;
        let mean: [f64; 3] = std::array::from_fn(|a| pts.iter().map(|p| p[a]).sum::<f64>() / n);
        let std = std::array::from_fn(|a| {
            let ss: f64 = pts.iter().map(|p| (p[a] - mean[a]).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        });
        Ok(AxisGaussians { mean, std })
    };
    Ok(CentroidModel {
        left: fit(Side::Left)?,
        right: fit(Side::Right)?,
    })
}

/// `n` independent draws for one side; each axis uses its own Gaussian.
pub fn sample_centroids(model: &CentroidModel, side: Side, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let g = model.side(side);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: [Normal<f64>; 3] = std::array::from_fn(|a| {
        Normal::new(g.mean[a], g.std[a]).expect("std is finite and non-negative")
    });
    (0..n)
        .map(|_| std::array::from_fn(|a| dists[a].sample(&mut rng)))
        .collect()
}

/// Start index of the `p`-voxel window centred as close as possible to
/// `centroid`, clamped so the window lies inside `[0, extent)`.
pub fn crop_start(centroid: f64, p: usize, extent: usize) -> usize {
    debug_assert!(p <= extent);
    let ideal = (centroid - (p as f64 - 1.0) / 2.0).round();
    let max = (extent - p) as f64;
    if ideal.is_nan() {
        return 0;
    }
    ideal.clamp(0.0, max) as usize
}

pub fn crop_window(centroid: [f64; 3], p: usize, dims: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|a| crop_start(centroid[a], p, dims[a]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub subject_id: String,
    pub side: Side,
    pub centroid: [f64; 3],
    pub patch_size: usize,
    /// 64³, z-scored; right-side crops are mirrored before resampling.
    pub data: Volume,
    pub label: Option<Label>,
}

/// Crops the cube of side `p` around `centroid`, mirrors right-side crops,
/// resamples to 64³ and z-scores.
pub fn extract_instance(
    v: &Volume,
    centroid: [f64; 3],
    p: PatchSize,
    side: Side,
) -> Result<Instance> {
    let dims = v.dims();
    let extent = *dims.iter().min().expect("three dims");
    if p.get() > extent {
        return Err(Error::PatchTooLarge {
            patch: p.get(),
            extent,
        });
    }
    let start = crop_window(centroid, p.get(), dims);
    let mut crop = v.crop(start, [p.get(); 3])?;
    if side == Side::Right {
        crop = crop.flip_lr();
    }
    let data = crop
        .resample([INSTANCE_DIM; 3])?
        .normalize_intensity();
    Ok(Instance {
        subject_id: String::new(),
        side,
        centroid,
        patch_size: p.get(),
        data,
        label: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    #[default]
    Stochastic,
    /// Every draw is the side mean.
    Mean,
}

/// Seed used for the draws of one side of one subject.
pub fn side_seed(seed: u64, side: Side) -> u64 {
    seed::derive(seed, side.index() as u64 + 1)
}

pub fn subject_seed(master: u64, subject_id: &str) -> u64 {
    seed::derive_str(master, subject_id)
}

/// `n` left and `n` right instances, left first, with independent
/// per-side draws derived from `seed`.
pub fn extract_all(
    v: &Volume,
    model: &CentroidModel,
    n: usize,
    p: PatchSize,
    seed: u64,
) -> Result<Vec<Instance>> {
    extract_sides(v, model, n, p, seed, &Side::BOTH, SamplingMode::Stochastic)
}

pub fn extract_sides(
    v: &Volume,
    model: &CentroidModel,
    n: usize,
    p: PatchSize,
    seed: u64,
    sides: &[Side],
    mode: SamplingMode,
) -> Result<Vec<Instance>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(n * sides.len());
    for &side in sides {
        let centroids = match mode {
            SamplingMode::Stochastic => sample_centroids(model, side, n, side_seed(seed, side)),
            SamplingMode::Mean => vec![model.side(side).mean; n],
        };
        for c in centroids {
            out.push(extract_instance(v, c, p, side)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: &str, side: Side, c: [f64; 3]) -> CentroidAnnotation {
        CentroidAnnotation {
            subject_id: id.into(),
            side,
            centroid: c,
        }
    }

    fn two_point_annotations() -> Vec<CentroidAnnotation> {
        vec![
            ann("a", Side::Left, [10.0, 20.0, 30.0]),
            ann("b", Side::Left, [14.0, 20.0, 30.0]),
            ann("a", Side::Right, [90.0, 20.0, 30.0]),
            ann("b", Side::Right, [90.0, 20.0, 30.0]),
        ]
    }

    #[test]
    fn two_point_statistics() {
        let m = fit_centroid_model(&two_point_annotations()).unwrap();
        assert_eq!(m.left.mean, [12.0, 20.0, 30.0]);
        assert!((m.left.std[0] - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-9);
        assert_eq!(m.left.std[1], 0.0);
        assert_eq!(m.right.std, [0.0; 3]);
    }

    #[test]
    fn too_few_annotations() {
        let mut a = two_point_annotations();
        a.pop();
        assert!(matches!(
            fit_centroid_model(&a),
            Err(Error::TooFewAnnotations { count: 1, .. })
        ));
    }

    #[test]
    fn zero_variance_draws_equal_mean() {
        let m = fit_centroid_model(&two_point_annotations()).unwrap();
        for c in sample_centroids(&m, Side::Right, 20, 99) {
            assert_eq!(c, [90.0, 20.0, 30.0]);
        }
    }

    #[test]
    fn draws_are_seeded() {
        let m = fit_centroid_model(&two_point_annotations()).unwrap();
        assert_eq!(
            sample_centroids(&m, Side::Left, 5, 3),
            sample_centroids(&m, Side::Left, 5, 3)
        );
        assert_ne!(
            sample_centroids(&m, Side::Left, 5, 3),
            sample_centroids(&m, Side::Left, 5, 4)
        );
    }

    #[test]
    fn annotation_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.tsv");
        let a = two_point_annotations();
        write_annotations(&p, &a).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), a);
        let csv = "subject_id,side,x,y,z\ns1,left,1,2,3\ns1,right,4,5,6\n";
        assert_eq!(parse_annotations(csv).unwrap().len(), 2);
        assert!(parse_annotations("s1,left,1,2\n").is_err());
    }

    #[test]
    fn full_crop_at_centre() {
        let v = Volume::from_fn([128; 3], [1.0; 3], |i, j, k| (i + j + k) as f32).unwrap();
        assert_eq!(crop_window([63.5; 3], 128, v.dims()), [0, 0, 0]);
        let inst = extract_instance(&v, [63.5; 3], PatchSize::new(128).unwrap(), Side::Left).unwrap();
        let expected = v.resample([64; 3]).unwrap().normalize_intensity();
        assert_eq!(inst.data.data(), expected.data());
    }

    #[test]
    fn corner_centroid_clamps_to_origin() {
        assert_eq!(crop_window([0.0; 3], 25, [128; 3]), [0, 0, 0]);
        assert_eq!(crop_window([127.0; 3], 25, [128; 3]), [103, 103, 103]);
        assert_eq!(crop_window([-50.0, 500.0, 60.0], 25, [128; 3]), [0, 103, 48]);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let v = Volume::filled([128; 3], [1.0; 3], 0.0).unwrap();
        assert!(matches!(
            extract_instance(&v, [64.0; 3], PatchSize::new(129).unwrap(), Side::Left),
            Err(Error::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn instance_counts() {
        let v = Volume::from_fn([128; 3], [1.0; 3], |i, j, k| ((i * 7 + j * 3 + k) % 11) as f32)
            .unwrap();
        let m = fit_centroid_model(&[
            ann("a", Side::Left, [40.0, 80.0, 50.0]),
            ann("b", Side::Left, [44.0, 78.0, 52.0]),
            ann("a", Side::Right, [86.0, 80.0, 50.0]),
            ann("b", Side::Right, [88.0, 82.0, 49.0]),
        ])
        .unwrap();
        let p = PatchSize::new(25).unwrap();
        let one = extract_all(&v, &m, 1, p, 1).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one[0].side, Side::Left);
        assert_eq!(one[1].side, Side::Right);
        let many = extract_all(&v, &m, 15, p, 1).unwrap();
        assert_eq!(many.len(), 30);
        for inst in &many {
            assert_eq!(inst.data.dims(), [INSTANCE_DIM; 3]);
        }
        let other = extract_all(&v, &m, 15, p, 2).unwrap();
        assert_ne!(
            many.iter().map(|i| i.centroid).collect::<Vec<_>>(),
            other.iter().map(|i| i.centroid).collect::<Vec<_>>()
        );
        let mean = extract_sides(&v, &m, 3, p, 1, &[Side::Left], SamplingMode::Mean).unwrap();
        assert!(mean.iter().all(|i| i.centroid == m.left.mean));
    }
}
