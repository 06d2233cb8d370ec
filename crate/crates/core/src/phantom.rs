//! Synthetic head-like cohorts with known anatomy, labels and poses.
//!
//! Each subject is an analytic intensity field: an ellipsoidal head with a
//! bony shell, two air-filled ellipsoidal cavities (one per side), an
//! optional bright spherical lesion attached to the inside of a cavity wall,
//! and an optional lesion-like "air cell" outside the cavity. The air cells
//! are independent of the label; they sit far enough out that only large
//! crop windows reach them. Volumes are rendered by evaluating the field at
//! the pre-image of each voxel under the subject's rigid perturbation, so
//! the recorded transform is exactly what registration should recover.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Manifest, Side, SubjectRecord};
use crate::error::{Error, Result};
use crate::registration::RigidTransform;
use crate::sampling::{crop_window, CentroidAnnotation, Instance, INSTANCE_DIM};
use crate::seed;
use crate::volume::{save_volume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntensityLevels {
    pub background: f64,
    pub shell: f64,
    pub tissue: f64,
    pub cavity: f64,
    pub lesion: f64,
}

impl Default for IntensityLevels {
    fn default() -> Self {
        IntensityLevels {
            background: 0.0,
            shell: 40.0,
            tissue: 70.0,
            cavity: 15.0,
            lesion: 110.0,
        }
    }
}

impl IntensityLevels {
    fn all(&self) -> [f64; 5] {
        [self.background, self.shell, self.tissue, self.cavity, self.lesion]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub cohort_size: usize,
    pub dims: [usize; 3],
    pub head_radii: [f64; 3],
    pub shell_thickness: f64,
    /// Nominal cavity centroids, left then right, in template voxels.
    pub cavity_centroids: [[f64; 3]; 2],
    /// Inter-subject centroid jitter (per-axis std, voxels).
    pub centroid_jitter_std: f64,
    /// Per-axis cavity semi-axis range.
    pub cavity_radius_range: [f64; 2],
    pub lesion_probability: f64,
    pub lesion_radius_range: [f64; 2],
    pub air_cell_probability: f64,
    /// Centre distance of an air cell from its cavity centre.
    pub air_cell_distance_range: [f64; 2],
    pub air_cell_radius: f64,
    pub air_cell_blob_radius: f64,
    pub levels: IntensityLevels,
    pub noise_std: f64,
    /// Width of the logistic edge profile (voxels).
    pub edge_width: f64,
    /// Uniform perturbation ranges (voxels, degrees); 0 disables.
    pub max_translation: f64,
    pub max_rotation: f64,
    pub annotated_subjects: usize,
    /// Number of sinuses excluded from the cohort, chosen at random.
    pub excluded_sinuses: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            cohort_size: 20,
            dims: [128; 3],
            head_radii: [54.0, 58.0, 56.0],
            shell_thickness: 4.0,
            cavity_centroids: [[40.0, 82.0, 50.0], [87.0, 82.0, 50.0]],
            centroid_jitter_std: 4.0,
            cavity_radius_range: [12.0, 14.0],
            lesion_probability: 0.32,
            lesion_radius_range: [2.5, 4.0],
            air_cell_probability: 0.5,
            air_cell_distance_range: [22.0, 25.0],
            air_cell_radius: 5.5,
            air_cell_blob_radius: 3.0,
            levels: IntensityLevels::default(),
            noise_std: 2.0,
            edge_width: 0.6,
            max_translation: 10.0,
            max_rotation: 10.0,
            annotated_subjects: 20,
            excluded_sinuses: 0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("phantom spec: {m}")));
        if self.cohort_size == 0 {
            return bad("cohort size must be positive".into());
        }
        if self.dims.iter().any(|&d| d < 8) {
            return bad(format!("dims {:?} too small", self.dims));
        }
        for p in [self.lesion_probability, self.air_cell_probability] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        let [rmin, rmax] = self.cavity_radius_range;
        let [lmin, lmax] = self.lesion_radius_range;
        if !(rmin > 0.0 && rmin <= rmax && lmin > 0.0 && lmin <= lmax) {
            return bad("radius ranges must be positive and ordered".into());
        }
        if lmax >= rmin - 1.0 {
            return bad(format!("lesion radius {lmax} does not fit cavity radius {rmin}"));
        }
        if self.air_cell_blob_radius >= self.air_cell_radius - 0.5 {
            return bad("air-cell blob does not fit its cell".into());
        }
        let [dmin, dmax] = self.air_cell_distance_range;
        if dmin > dmax || dmin < rmax + self.air_cell_radius + 1.0 {
            return bad("air cells would overlap their cavity".into());
        }
        let reach = 3.0 * self.centroid_jitter_std + rmax;
        for c in &self.cavity_centroids {
            for a in 0..3 {
                if c[a] - reach < 0.0 || c[a] + reach > (self.dims[a] - 1) as f64 {
                    return bad(format!("cavity at {c:?} leaves the volume at 3 sigma"));
                }
            }
        }
        let levels = self.levels.all();
        for i in 0..levels.len() {
            for j in i + 1..levels.len() {
                if (levels[i] - levels[j]).abs() < 5.0 * self.noise_std {
                    return bad("intensity levels closer than 5x noise std".into());
                }
            }
        }
        if self.noise_std < 0.0 || self.edge_width <= 0.0 {
            return bad("noise std and edge width must be non-negative / positive".into());
        }
        if self.annotated_subjects > self.cohort_size {
            return bad("more annotated subjects than subjects".into());
        }
        if self.excluded_sinuses > 2 * self.cohort_size {
            return bad("more exclusions than sinuses".into());
        }
        Ok(())
    }

    fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        dist2(p, self.center) <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AirCell {
    pub cell: Sphere,
    pub blob: Sphere,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SidePhantom {
    pub side: Side,
    pub cavity_center: [f64; 3],
    pub cavity_radii: [f64; 3],
    pub lesion: Option<Sphere>,
    pub air_cell: Option<AirCell>,
    pub included: bool,
}

impl SidePhantom {
    pub fn label(&self) -> Label {
        Label::from_positive(self.lesion.is_some())
    }

    pub fn in_cavity(&self, p: [f64; 3]) -> bool {
        ellipsoid_rho2(p, self.cavity_center, self.cavity_radii) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPhantom {
    pub subject_id: String,
    pub sides: [SidePhantom; 2],
    /// Maps template coordinates to stored-volume coordinates.
    pub perturbation: RigidTransform,
    pub noise_seed: u64,
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn ellipsoid_rho2(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = dist2(v, [0.0; 3]).sqrt();
    v.map(|x| x / n)
}

fn random_unit<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if dist2(v, [0.0; 3]) > 1e-12 {
            return unit(v);
        }
    }
}

/// Soft inside-indicator of an ellipsoid: logistic in an approximate signed
/// distance to its surface.
#[inline]
fn ellipsoid_weight(p: [f64; 3], c: [f64; 3], r: [f64; 3], width: f64) -> f64 {
    let rho = ellipsoid_rho2(p, c, r).sqrt();
    let scale = (r[0] + r[1] + r[2]) / 3.0;
    logistic((1.0 - rho) * scale / width)
}

#[inline]
fn sphere_weight(p: [f64; 3], s: &Sphere, width: f64) -> f64 {
    logistic((s.radius - dist2(p, s.center).sqrt()) / width)
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x > 12.0 {
        1.0
    } else if x < -12.0 {
        0.0
    } else {
        1.0 / (1.0 + (-x).exp())
    }
}

/// Places a sphere of `radius` against the inside wall of an ellipsoid in
/// direction `dir`, shrinking the offset until it fits.
fn attach_inside(center: [f64; 3], radii: [f64; 3], dir: [f64; 3], radius: f64) -> [f64; 3] {
    let probe: Vec<[f64; 3]> = {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..256).map(|_| random_unit(&mut rng)).collect()
    };
    let mut reach = 1.0;
    loop {
        let offset: [f64; 3] =
            std::array::from_fn(|a| dir[a] * (radii[a] - radius - 0.5).max(0.0) * reach);
        let c: [f64; 3] = std::array::from_fn(|a| center[a] + offset[a]);
        let fits = probe.iter().all(|u| {
            let q: [f64; 3] = std::array::from_fn(|a| c[a] + u[a] * radius);
            ellipsoid_rho2(q, center, radii) <= 1.0
        });
        if fits || reach < 0.05 {
            return c;
        }
        reach *= 0.95;
    }
}

impl SubjectPhantom {
    fn plan(spec: &PhantomSpec, index: usize) -> SubjectPhantom {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, index as u64));
        let jitter = Normal::new(0.0, spec.centroid_jitter_std).expect("finite std");
        let sides = Side::BOTH.map(|side| {
            let nominal = spec.cavity_centroids[side.index()];
            let cavity_center: [f64; 3] =
                std::array::from_fn(|a| nominal[a] + jitter.sample(&mut rng));
            let [rmin, rmax] = spec.cavity_radius_range;
            let cavity_radii: [f64; 3] = std::array::from_fn(|_| rng.gen_range(rmin..=rmax));
            let lesion = rng.gen_bool(spec.lesion_probability).then(|| {
                let [lmin, lmax] = spec.lesion_radius_range;
                let radius = rng.gen_range(lmin..=lmax);
                // Cysts and polyps favour the floor and lateral walls.
                let mut g = random_unit(&mut rng);
                g[2] = -(g[2].abs() + 0.5);
                let lateral = if side == Side::Left { -1.0 } else { 1.0 };
                g[0] = lateral * g[0].abs();
                let dir = unit(g);
                Sphere {
                    center: attach_inside(cavity_center, cavity_radii, dir, radius),
                    radius,
                }
            });
            let air_cell = rng.gen_bool(spec.air_cell_probability).then(|| {
                let axes = [[0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]];
                let dir = axes[rng.gen_range(0..axes.len())];
                let [dmin, dmax] = spec.air_cell_distance_range;
                let d = rng.gen_range(dmin..=dmax);
                let cell = Sphere {
                    center: std::array::from_fn(|a| cavity_center[a] + dir[a] * d),
                    radius: spec.air_cell_radius,
                };
                let u = random_unit(&mut rng);
                let off = spec.air_cell_radius - spec.air_cell_blob_radius - 0.5;
                let blob = Sphere {
                    center: std::array::from_fn(|a| cell.center[a] + u[a] * off),
                    radius: spec.air_cell_blob_radius,
                };
                AirCell { cell, blob }
            });
            SidePhantom {
                side,
                cavity_center,
                cavity_radii,
                lesion,
                air_cell,
                included: true,
            }
        });
        let perturbation = RigidTransform::new(
            std::array::from_fn(|_| {
                if spec.max_rotation > 0.0 {
                    rng.gen_range(-spec.max_rotation..=spec.max_rotation)
                } else {
                    0.0
                }
            }),
            std::array::from_fn(|_| {
                if spec.max_translation > 0.0 {
                    rng.gen_range(-spec.max_translation..=spec.max_translation)
                } else {
                    0.0
                }
            }),
        );
        SubjectPhantom {
            subject_id: format!("sub{index:04}"),
            sides,
            perturbation,
            noise_seed: rng.gen(),
        }
    }

    pub fn side(&self, side: Side) -> &SidePhantom {
        &self.sides[side.index()]
    }

    /// Noise-free intensity at a template-space point.
    pub fn intensity(&self, spec: &PhantomSpec, p: [f64; 3]) -> f64 {
        let lv = &spec.levels;
        let w = spec.edge_width;
        let c = spec.center();
        let inner_radii = spec.head_radii.map(|r| r - spec.shell_thickness);
        let mut v = lv.background;
        let head = ellipsoid_weight(p, c, spec.head_radii, w);
        if head == 0.0 {
            return v;
        }
        v += head * (lv.shell - lv.background);
        v += ellipsoid_weight(p, c, inner_radii, w) * (lv.tissue - lv.shell);
        for s in &self.sides {
            let reach = s.cavity_radii.iter().cloned().fold(0.0, f64::max) + 6.0 * w;
            if dist2(p, s.cavity_center) < reach * reach {
                v += ellipsoid_weight(p, s.cavity_center, s.cavity_radii, w) * (lv.cavity - lv.tissue);
                if let Some(l) = &s.lesion {
                    v += sphere_weight(p, l, w) * (lv.lesion - lv.cavity);
                }
            }
            if let Some(a) = &s.air_cell {
                let reach = a.cell.radius + 6.0 * w;
                if dist2(p, a.cell.center) < reach * reach {
                    v += sphere_weight(p, &a.cell, w) * (lv.cavity - lv.tissue);
                    v += sphere_weight(p, &a.blob, w) * (lv.lesion - lv.cavity);
                }
            }
        }
        v
    }

    /// Renders the subject. With `perturbed`, voxel `q` shows the anatomy at
    /// `perturbation⁻¹(q)`; with `noise`, i.i.d. Gaussian noise is added.
    pub fn render(&self, spec: &PhantomSpec, perturbed: bool, noise: bool) -> Volume {
        self.render_with_noise_seed(spec, perturbed, noise.then_some(self.noise_seed))
    }

    pub fn render_with_noise_seed(
        &self,
        spec: &PhantomSpec,
        perturbed: bool,
        noise_seed: Option<u64>,
    ) -> Volume {
        let center = spec.center();
        let inv = self.perturbation.inverse();
        let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
        let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
        Volume::from_fn(spec.dims, [1.0; 3], |i, j, k| {
            let q = [i as f64, j as f64, k as f64];
            let p = if perturbed { inv.map_point(q, center) } else { q };
            let mut v = self.intensity(spec, p);
            if let Some(r) = rng.as_mut() {
                v += noise.sample(r);
            }
            v as f32
        })
        .expect("phantom dims are valid")
    }
}

/// A planned cohort: geometry, labels and poses, no voxels yet.
#[derive(Debug, Clone)]
pub struct PhantomCohort {
    pub spec: PhantomSpec,
    pub subjects: Vec<SubjectPhantom>,
}

impl PhantomCohort {
    pub fn plan(spec: &PhantomSpec) -> Result<Self> {
        spec.validate()?;
        let mut subjects: Vec<SubjectPhantom> =
            (0..spec.cohort_size).map(|i| SubjectPhantom::plan(spec, i)).collect();
        if spec.excluded_sinuses > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, u64::MAX));
            let mut all: Vec<(usize, usize)> = (0..subjects.len())
                .flat_map(|i| [(i, 0), (i, 1)])
                .collect();
            all.shuffle(&mut rng);
            for &(i, s) in &all[..spec.excluded_sinuses] {
                subjects[i].sides[s].included = false;
            }
        }
        Ok(PhantomCohort {
            spec: spec.clone(),
            subjects,
        })
    }

    /// The mean anatomy: nominal cavities of mid-range size, no lesions,
    /// no air cells, no noise and no perturbation.
    pub fn reference(&self) -> Volume {
        let [rmin, rmax] = self.spec.cavity_radius_range;
        let r = (rmin + rmax) / 2.0;
        let template = SubjectPhantom {
            subject_id: "reference".into(),
            sides: Side::BOTH.map(|side| SidePhantom {
                side,
                cavity_center: self.spec.cavity_centroids[side.index()],
                cavity_radii: [r; 3],
                lesion: None,
                air_cell: None,
                included: true,
            }),
            perturbation: RigidTransform::identity(),
            noise_seed: 0,
        };
        template.render(&self.spec, false, false)
    }

    pub fn manifest(&self) -> Manifest {
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let mut rec =
                    SubjectRecord::new(s.subject_id.clone(), s.sides[0].label(), s.sides[1].label());
                for side in Side::BOTH {
                    rec.side_mut(side).included = s.side(side).included;
                }
                rec.source_path = format!("volumes/{}.nii.gz", s.subject_id);
                rec
            })
            .collect();
        Manifest::new(subjects)
    }

    /// True cavity centroids (template frame) of the first
    /// `annotated_subjects` subjects.
    pub fn annotations(&self) -> Vec<CentroidAnnotation> {
        self.subjects
            .iter()
            .take(self.spec.annotated_subjects)
            .flat_map(|s| {
                s.sides.iter().map(move |sp| CentroidAnnotation {
                    subject_id: s.subject_id.clone(),
                    side: sp.side,
                    centroid: sp.cavity_center,
                })
            })
            .collect()
    }

    /// Renders every subject in memory, keyed by subject id. Unperturbed
    /// renders are already in the template frame.
    pub fn render_all(&self, perturbed: bool, noise: bool) -> std::collections::HashMap<String, Volume> {
        use rayon::prelude::*;
        self.subjects
            .par_iter()
            .map(|s| (s.subject_id.clone(), s.render(&self.spec, perturbed, noise)))
            .collect()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectPhantom> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn ground_truth_table(&self) -> String {
        let mut s = String::from(
            "subject_id\trot_x\trot_y\trot_z\ttrans_x\ttrans_y\ttrans_z\tside\tincluded\tlabel\t\
             cavity_x\tcavity_y\tcavity_z\tradius_x\tradius_y\tradius_z\t\
             lesion_x\tlesion_y\tlesion_z\tlesion_r\tair_cell_x\tair_cell_y\tair_cell_z\n",
        );
        let opt = |o: Option<f64>| o.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        for subj in &self.subjects {
            let t = subj.perturbation;
            for sp in &subj.sides {
                let _ = writeln!(
                    s,
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    subj.subject_id,
                    t.rotation[0],
                    t.rotation[1],
                    t.rotation[2],
                    t.translation[0],
                    t.translation[1],
                    t.translation[2],
                    sp.side,
                    sp.included as u8,
                    sp.label(),
                    sp.cavity_center[0],
                    sp.cavity_center[1],
                    sp.cavity_center[2],
                    sp.cavity_radii[0],
                    sp.cavity_radii[1],
                    sp.cavity_radii[2],
                    opt(sp.lesion.map(|l| l.center[0])),
                    opt(sp.lesion.map(|l| l.center[1])),
                    opt(sp.lesion.map(|l| l.center[2])),
                    opt(sp.lesion.map(|l| l.radius)),
                    opt(sp.air_cell.map(|a| a.cell.center[0])),
                    opt(sp.air_cell.map(|a| a.cell.center[1])),
                    opt(sp.air_cell.map(|a| a.cell.center[2])),
                );
            }
        }
        s
    }
}

/// Files written by [`generate_cohort`].
#[derive(Debug, Clone)]
pub struct CohortOutput {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub annotations: Vec<CentroidAnnotation>,
    pub transforms: Vec<(String, RigidTransform)>,
    pub cohort: PhantomCohort,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const ANNOTATIONS_FILE: &str = "annotations.tsv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.tsv";
pub const REFERENCE_FILE: &str = "reference.nii.gz";
pub const SPEC_FILE: &str = "phantom.json";

/// Renders every subject (perturbed, noisy) to `out/volumes/`, plus the
/// reference volume, manifest, centroid annotations, ground-truth sidecar
/// and the spec itself.
pub fn generate_cohort(spec: &PhantomSpec, out: impl AsRef<Path>) -> Result<CohortOutput> {
    use rayon::prelude::*;

    let root = out.as_ref().to_path_buf();
    let cohort = PhantomCohort::plan(spec)?;
    std::fs::create_dir_all(root.join("volumes"))?;
    cohort.subjects.par_iter().try_for_each(|s| {
        let v = s.render(spec, true, true);
        save_volume(&v, root.join("volumes").join(format!("{}.nii.gz", s.subject_id)))
    })?;
    save_volume(&cohort.reference(), root.join(REFERENCE_FILE))?;
    let mut manifest = cohort.manifest();
    manifest.data_root = root.display().to_string();
    manifest.save(root.join(MANIFEST_FILE))?;
    let annotations = cohort.annotations();
    crate::sampling::write_annotations(root.join(ANNOTATIONS_FILE), &annotations)?;
    std::fs::write(root.join(GROUND_TRUTH_FILE), cohort.ground_truth_table())?;
    std::fs::write(root.join(SPEC_FILE), serde_json::to_string_pretty(spec)?)?;
    let transforms = cohort
        .subjects
        .iter()
        .map(|s| (s.subject_id.clone(), s.perturbation))
        .collect();
    Ok(CohortOutput {
        root,
        manifest,
        annotations,
        transforms,
        cohort,
    })
}

/// Minimum fraction of the lesion's voxels that must fall inside the
/// instance window for the oracle to call it.
pub const ORACLE_MIN_VISIBLE: f64 = 0.25;

/// Rule-based label for an instance cut from an unperturbed (or perfectly
/// registered) phantom: anomaly iff instance voxels inside the cavity mask
/// cover enough of the lesion, and those voxels are brighter than the rest
/// of the visible cavity.
pub fn oracle_classifier(instance: &Instance, subject: &SubjectPhantom, spec: &PhantomSpec) -> Label {
    let side = subject.side(instance.side);
    let Some(lesion) = side.lesion else {
        return Label::Normal;
    };
    let p = instance.patch_size;
    let start = crop_window(instance.centroid, p, spec.dims);
    let scale = p as f64 / INSTANCE_DIM as f64;
    let to_template = |i: usize, j: usize, k: usize| -> [f64; 3] {
        let mut c = [i, j, k].map(|o| (o as f64 + 0.5) * scale - 0.5);
        if instance.side == Side::Right {
            c[0] = p as f64 - 1.0 - c[0];
        }
        std::array::from_fn(|a| start[a] as f64 + c[a])
    };
    let (mut lesion_sum, mut lesion_n, mut cavity_sum, mut cavity_n) = (0.0, 0usize, 0.0, 0usize);
    let d = instance.data.dims();
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let q = to_template(i, j, k);
                if !side.in_cavity(q) {
                    continue;
                }
                let v = instance.data.get(i, j, k) as f64;
                if lesion.contains(q) {
                    lesion_sum += v;
                    lesion_n += 1;
                } else {
                    cavity_sum += v;
                    cavity_n += 1;
                }
            }
        }
    }
    let voxel_volume = scale.powi(3);
    let sphere_volume = 4.0 / 3.0 * std::f64::consts::PI * lesion.radius.powi(3);
    let visible = lesion_n as f64 * voxel_volume / sphere_volume;
    let brighter = lesion_n > 0
        && (cavity_n == 0 || lesion_sum / lesion_n as f64 > cavity_sum / cavity_n as f64);
    Label::from_positive(visible >= ORACLE_MIN_VISIBLE && brighter)
}
