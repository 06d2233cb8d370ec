//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 9 and 10 train dozens of networks and run only with `--ignored`
//! or `--include-ignored`:
//!
//! ```text
//! cargo test --test acceptance -- --ignored
//! ```
//!
//! `ACCEPTANCE_EPOCHS`, `ACCEPTANCE_N10` and `ACCEPTANCE_SEEDS` override the
//! slow-suite budget.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sinus_mil::dataset::{make_splits, validate_manifest, Manifest, Side, Split, SplitRatios};
use sinus_mil::ensemble_eval::{
    build_instances, compute_auprc, compute_f1, cross_validate, ensemble_predict, group_ensembles, score_source,
    CvConfig, Scorer, ScoredInstance, VolumeStore,
};
use sinus_mil::model::{gradient_check, GradCheckConfig, NetworkConfig, ResNet3d, TrainConfig};
use sinus_mil::phantom::{PhantomCohort, PhantomSpec, SidePhantom, Sphere};
use sinus_mil::registration::{register, RigidTransform};
use sinus_mil::sampling::{crop_window, extract_instance, fit_centroid_model, sample_centroids, CentroidModel};
use sinus_mil::volume::{PatchSize, Volume};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Check = fn() -> Verdict;

const CRITERIA: [(u32, &str, Check, bool); 10] = [
    (1, "clinical-scale results not reproducible", c1_statement, false),
    (2, "ensemble degeneracy at n=1", c2_ensemble_degeneracy, false),
    (3, "AUPRC and F1 match brute-force oracles", c3_metrics_oracle, false),
    (4, "centroid sampling statistics and clamping", c4_sampling, false),
    (5, "geometry invariants", c5_geometry, false),
    (6, "registration recovers known poses", c6_registration, false),
    (7, "split arithmetic", c7_splits, false),
    (8, "gradient check, tiny network, f64", c8_gradcheck, false),
    (9, "N=5 ensembled F1 >= N=1 per-instance F1", c9_ensembling_direction, true),
    (10, "F1 vs P has an interior maximum", c10_interior_optimum, true),
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (id, name, _, slow) in CRITERIA {
            println!("criterion_{id} ({name}): test{}", if slow { " (ignored)" } else { "" });
        }
        return ExitCode::SUCCESS;
    }
    let only_slow = args.iter().any(|a| a == "--ignored");
    let with_slow = only_slow || args.iter().any(|a| a == "--include-ignored");
    let mut failed = 0;
    for (id, name, check, slow) in CRITERIA {
        if slow && !with_slow {
            println!("SKIP {id:>2} {name}: slow suite, run with --ignored");
            continue;
        }
        if !slow && only_slow {
            println!("SKIP {id:>2} {name}: fast suite, run without --ignored");
            continue;
        }
        let t = Instant::now();
        let v = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict { pass: false, detail: format!("panicked: {msg}") }
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!v.pass);
        println!("{status} {id:>2} {name}: {} [{:.1}s]", v.detail, t.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

// 1

fn c1_statement() -> Verdict {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap_or_default();
    let stated = readme.contains("are not reproducible");
    verdict(
        stated,
        "the clinical cohort is private; results at that scale are not reproducible and criteria 2-10 stand in \
         for them (stated in README.md)",
    )
}

// 2

fn small_cohort(size: usize, seed: u64) -> (PhantomCohort, HashMap<String, Volume>) {
    let spec = PhantomSpec {
        cohort_size: size,
        annotated_subjects: size.min(20),
        max_translation: 0.0,
        max_rotation: 0.0,
        seed,
        ..Default::default()
    };
    let cohort = PhantomCohort::plan(&spec).expect("valid phantom");
    let vols = cohort.render_all(false, true);
    (cohort, vols)
}

fn c2_ensemble_degeneracy() -> Verdict {
    let (cohort, vols) = small_cohort(12, 21);
    let model = fit_centroid_model(&cohort.annotations()).unwrap();
    let manifest = make_splits(&cohort.manifest(), SplitRatios { train: 0.34, val: 0.33, test: 0.33 }, 3, 2).unwrap();
    let p = PatchSize::new(35).unwrap();
    let net = ResNet3d::<f32>::new(NetworkConfig::tiny(), 5).unwrap();
    let mut checked = 0;
    let mut worst_sum = 0.0f64;
    for split in [Split::Train, Split::Val, Split::Test] {
        let insts = build_instances(&manifest, &vols, &model, split, 0, 1, p, 9).unwrap();
        let per = score_source(&net, &insts, 4).unwrap();
        let scored: Vec<ScoredInstance> = insts
            .iter()
            .zip(&per)
            .map(|(i, pr)| ScoredInstance {
                subject_id: i.subject_id.clone(),
                side: i.side,
                label: i.label.unwrap(),
                probabilities: *pr,
            })
            .collect();
        let grouped = group_ensembles(&scored, 0.5).unwrap();
        if grouped.len() != insts.len() {
            return verdict(false, "n=1 produced a group with more than one instance");
        }
        for ((ens, _), (inst, pr)) in grouped.iter().zip(insts.iter().zip(&per)) {
            let direct = ensemble_predict(&net as &dyn Scorer, std::slice::from_ref(inst), 0.5).unwrap();
            for e in [ens.probabilities, direct.probabilities] {
                if e[0].to_bits() != pr[0].to_bits() || e[1].to_bits() != pr[1].to_bits() {
                    return verdict(false, format!("{}/{}: {e:?} != {pr:?}", inst.subject_id, inst.side));
                }
            }
            worst_sum = worst_sum.max((pr[0] + pr[1] - 1.0).abs());
            checked += 1;
        }
    }
    verdict(
        checked > 0 && worst_sum <= 1e-6,
        format!("{checked} (subject, side) pairs bitwise equal; max |sum - 1| = {worst_sum:.1e}"),
    )
}

// 3

/// Mean over positives of the precision among all items scored at least as
/// high as that positive.
fn oracle_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    let mut total = 0.0;
    for &i in &pos {
        let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
        let hits = above.iter().filter(|&&j| labels[j]).count();
        total += hits as f64 / above.len() as f64;
    }
    total / pos.len() as f64
}

fn oracle_f1(pred: &[bool], labels: &[bool]) -> f64 {
    let tp = pred.iter().zip(labels).filter(|(p, l)| **p && **l).count() as f64;
    let predicted = pred.iter().filter(|p| **p).count() as f64;
    let actual = labels.iter().filter(|l| **l).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / predicted;
    let recall = tp / actual;
    2.0 * precision * recall / (precision + recall)
}

fn c3_metrics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut no_positive = 0;
    for case in 0..1000 {
        let n = rng.gen_range(1..=20);
        // Every other case draws scores from a coarse grid to force ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| if case % 2 == 0 { rng.gen::<f64>() } else { rng.gen_range(0..5) as f64 / 4.0 })
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let pred: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
        worst = worst.max((compute_f1(&pred, &labels) - oracle_f1(&pred, &labels)).abs());
        if labels.iter().any(|&l| l) {
            let ap = compute_auprc(&scores, &labels).unwrap();
            worst = worst.max((ap - oracle_ap(&scores, &labels)).abs());
        } else {
            no_positive += 1;
            if compute_auprc(&scores, &labels).is_ok() {
                return verdict(false, "AUPRC without positives did not fail");
            }
        }
    }
    verdict(
        worst <= 1e-9,
        format!("1000 cases ({no_positive} without positives); max abs difference {worst:.1e}"),
    )
}

// 4

fn c4_sampling() -> Verdict {
    let cohort = PhantomCohort::plan(&PhantomSpec { cohort_size: 20, ..Default::default() }).unwrap();
    let model = fit_centroid_model(&cohort.annotations()).unwrap();
    let draws = 10_000;
    let mut worst_z: f64 = 0.0;
    for side in Side::BOTH {
        let g = model.side(side);
        let pts = sample_centroids(&model, side, draws, 40 + side.index() as u64);
        for a in 0..3 {
            let mean = pts.iter().map(|p| p[a]).sum::<f64>() / draws as f64;
            let bound = 4.0 * g.std[a] / (draws as f64).sqrt();
            if (mean - g.mean[a]).abs() > bound {
                return verdict(false, format!("{side} axis {a}: mean {mean} vs {} (bound {bound})", g.mean[a]));
            }
            worst_z = worst_z.max((mean - g.mean[a]).abs() / (g.std[a] / (draws as f64).sqrt()));
        }
    }
    let mut flat = model;
    flat.left.std = [0.0; 3];
    flat.right.std = [0.0; 3];
    for side in Side::BOTH {
        if sample_centroids(&flat, side, 1000, 7).iter().any(|c| *c != flat.side(side).mean) {
            return verdict(false, "sigma = 0 did not collapse to the mean");
        }
    }
    // Clamping, including a deliberately wide model whose draws often leave
    // the volume.
    let dims = [128usize; 3];
    let mut wide = model;
    wide.left.std = [30.0; 3];
    wide.right.std = [30.0; 3];
    let mut windows = 0usize;
    for m in [&model, &wide] {
        for side in Side::BOTH {
            let pts = sample_centroids(m, side, draws, 77);
            for p in 25..=45 {
                for c in &pts {
                    let s = crop_window(*c, p, dims);
                    if (0..3).any(|a| s[a] + p > dims[a]) {
                        return verdict(false, format!("window {s:?} of {p} at {c:?} leaves the volume"));
                    }
                    windows += 1;
                }
            }
        }
    }
    verdict(
        true,
        format!("max |mean - mu| = {worst_z:.2} sigma/sqrt(n); sigma=0 exact; {windows} clamped windows in bounds"),
    )
}

// 5

/// Start index minimising the distance between window centre and centroid,
/// found by scanning every legal start.
fn oracle_start(c: f64, p: usize, extent: usize) -> usize {
    (0..=extent - p)
        .min_by(|&a, &b| {
            let da = (a as f64 + (p as f64 - 1.0) / 2.0 - c).abs();
            let db = (b as f64 + (p as f64 - 1.0) / 2.0 - c).abs();
            da.total_cmp(&db)
        })
        .unwrap()
}

fn mirror_x(p: [f64; 3], dx: usize) -> [f64; 3] {
    [(dx - 1) as f64 - p[0], p[1], p[2]]
}

fn c5_geometry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for dims in [[7, 5, 4], [8, 3, 6], [1, 2, 3]] {
        let v = Volume::from_fn(dims, [1.0; 3], |_, _, _| rng.gen::<f32>()).unwrap();
        let f = v.flip_lr();
        if f.flip_lr() != v || (dims[0] > 1 && f == v) {
            return verdict(false, format!("flip_lr is not an involution on {dims:?}"));
        }
    }
    let mut mismatches = 0;
    for _ in 0..1000 {
        let dims = [rng.gen_range(45..140), rng.gen_range(45..140), rng.gen_range(45..140)];
        let p = rng.gen_range(25..=45);
        let c: [f64; 3] = std::array::from_fn(|a| rng.gen_range(-20.0..dims[a] as f64 + 20.0));
        let got = crop_window(c, p, dims);
        let want: [usize; 3] = std::array::from_fn(|a| oracle_start(c[a], p, dims[a]));
        mismatches += usize::from(got != want);
    }
    if mismatches > 0 {
        return verdict(false, format!("{mismatches}/1000 crop windows differ from the index oracle"));
    }
    // A subject whose right side is the exact mirror of its left.
    let spec = PhantomSpec { cohort_size: 1, annotated_subjects: 1, noise_std: 0.0, max_translation: 0.0, max_rotation: 0.0, ..Default::default() };
    let dx = spec.dims[0];
    let mut cohort = PhantomCohort::plan(&spec).unwrap();
    let subj = &mut cohort.subjects[0];
    let left = subj.sides[0].clone();
    subj.sides[0].lesion = Some(Sphere { center: [left.cavity_center[0] + 3.0, left.cavity_center[1] - 2.0, left.cavity_center[2]], radius: 3.5 });
    let left = subj.sides[0].clone();
    let mirror_sphere = |s: Sphere| Sphere { center: mirror_x(s.center, dx), radius: s.radius };
    subj.sides[1] = SidePhantom {
        side: Side::Right,
        cavity_center: mirror_x(left.cavity_center, dx),
        cavity_radii: left.cavity_radii,
        lesion: left.lesion.map(mirror_sphere),
        air_cell: left.air_cell.map(|a| sinus_mil::phantom::AirCell { cell: mirror_sphere(a.cell), blob: mirror_sphere(a.blob) }),
        included: true,
    };
    let vol = subj.render(&spec, false, false);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = PatchSize::new(*[25, 30, 35, 40, 45].get(rng.gen_range(0..5)).unwrap()).unwrap();
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-4.0..4.0));
        let cl: [f64; 3] = std::array::from_fn(|a| left.cavity_center[a] + jitter[a]);
        let l = extract_instance(&vol, cl, p, Side::Left).unwrap();
        let r = extract_instance(&vol, mirror_x(cl, dx), p, Side::Right).unwrap();
        for (a, b) in l.data.data().iter().zip(r.data.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    verdict(
        worst <= 1e-4,
        format!("flip involution exact; 1000 crop windows match oracle; mirrored L/R max abs error {worst:.1e}"),
    )
}

// 6

fn rotation_error_deg(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let ra = a.matrix();
    let rb = b.matrix();
    // trace(Ra · Rbᵀ) = 1 + 2 cos θ
    let tr: f64 = (0..3).map(|i| (0..3).map(|k| ra[i][k] * rb[i][k]).sum::<f64>()).sum();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

fn c6_registration() -> Verdict {
    let spec = PhantomSpec { cohort_size: 20, max_translation: 10.0, max_rotation: 10.0, seed: 6, ..Default::default() };
    let cohort = PhantomCohort::plan(&spec).unwrap();
    let mut ok = 0;
    let mut worst = (0.0f64, 0.0f64);
    for s in &cohort.subjects {
        let fixed = s.render(&spec, false, false);
        let moving = s.render(&spec, true, true);
        let r = register(&fixed, &moving).unwrap();
        let truth = s.perturbation;
        let dt = (0..3)
            .map(|a| (r.transform.translation[a] - truth.translation[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let dr = rotation_error_deg(&r.transform, &truth);
        worst = (worst.0.max(dt), worst.1.max(dr));
        ok += usize::from(dt < 0.5 && dr < 1.0);
    }
    verdict(
        ok >= 19,
        format!("{ok}/20 within 0.5 voxel and 1 degree; worst {:.3} voxel, {:.3} degree", worst.0, worst.1),
    )
}

// 7

/// Serves one shared volume for every subject.
struct SameVolume(Volume);

impl VolumeStore for SameVolume {
    fn volume(&self, _: &str) -> sinus_mil::Result<std::borrow::Cow<'_, Volume>> {
        Ok(std::borrow::Cow::Borrowed(&self.0))
    }
}

fn c7_splits() -> Verdict {
    let spec = PhantomSpec { cohort_size: 299, excluded_sinuses: 193, seed: 7, ..Default::default() };
    let cohort = PhantomCohort::plan(&spec).unwrap();
    let base = cohort.manifest();
    if base.sinus_count() != 405 {
        return verdict(false, format!("cohort has {} sinuses", base.sinus_count()));
    }
    let overall = base.anomalous_fraction();
    let m = make_splits(&base, SplitRatios::default(), 7, 3).unwrap();
    if !validate_manifest(&m).is_valid() {
        return verdict(false, "manifest validation reported violations");
    }
    let want = [(Split::Train, 327), (Split::Val, 37), (Split::Test, 41)];
    let mut sizes = Vec::new();
    for fold in 0..3 {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for (split, target) in want {
            let sinuses = m.sinuses_in(split, fold);
            let n = sinuses.len();
            if n.abs_diff(target) > 2 {
                return verdict(false, format!("fold {fold} {split}: {n} sinuses, want {target} +/- 2"));
            }
            let frac = sinuses.iter().filter(|s| s.2.is_positive()).count() as f64 / n as f64;
            if (frac - overall).abs() > 0.03 {
                return verdict(false, format!("fold {fold} {split}: anomalous {frac:.3} vs {overall:.3}"));
            }
            for (s, _, _) in sinuses {
                if let Some(prev) = seen.insert(&s.subject_id, split) {
                    if prev != split {
                        return verdict(false, format!("fold {fold}: {} in {prev} and {split}", s.subject_id));
                    }
                }
            }
            if fold == 0 {
                sizes.push(n);
            }
        }
    }
    // Instance counts at N = 1 and 5, one subject at a time.
    let model = CentroidModel {
        left: sinus_mil::sampling::AxisGaussians { mean: [20.0; 3], std: [2.0; 3] },
        right: sinus_mil::sampling::AxisGaussians { mean: [26.0; 3], std: [2.0; 3] },
    };
    let store = SameVolume(Volume::filled([46; 3], [1.0; 3], 1.0).unwrap());
    let p = PatchSize::new(25).unwrap();
    for (split, _) in want {
        let expected = m.sinuses_in(split, 0).len();
        for n in [1, 5] {
            let mut count = 0;
            for s in &m.subjects {
                let one = Manifest { subjects: vec![s.clone()], ..m.clone() };
                count += build_instances(&one, &store, &model, split, 0, n, p, 1).unwrap().len();
            }
            if count != n * expected {
                return verdict(false, format!("{split} at N={n}: {count} instances, want {}", n * expected));
            }
        }
    }
    verdict(
        true,
        format!(
            "sizes {sizes:?} (want 327/37/41 +/- 2); anomalous within 3 points of {:.1}%; no leakage in 3 folds; \
             instances = N x sinuses at N=1,5",
            overall * 100.0
        ),
    )
}

// 8

fn c8_gradcheck() -> Verdict {
    let cfg = GradCheckConfig::default();
    let report = gradient_check(&cfg).unwrap();
    verdict(
        cfg.network.input_dim == 64 && report.entries.len() == 20 && report.passes(1e-4),
        format!("{} parameters at {}³, max relative error {:.2e}", report.entries.len(), cfg.network.input_dim, report.max_rel_error),
    )
}

// 9 and 10

struct Prepared {
    manifest: Manifest,
    vols: HashMap<String, Volume>,
    model: CentroidModel,
}

/// 100-subject cohort in the registered frame, split into 3 folds.
fn prepare(seed: u64) -> Prepared {
    let (cohort, vols) = small_cohort(100, seed);
    let model = fit_centroid_model(&cohort.annotations()).unwrap();
    let manifest = make_splits(&cohort.manifest(), SplitRatios::default(), seed, 3).unwrap();
    Prepared { manifest, vols, model }
}

fn cv_f1(data: &Prepared, seed: u64, n: usize, p: usize, ensembled: bool) -> f64 {
    let cfg = CvConfig {
        n,
        patch_size: p,
        network: NetworkConfig::tiny(),
        train: TrainConfig {
            epochs: env_or("ACCEPTANCE_EPOCHS", 6),
            learning_rate: 1e-3,
            batch_size: 16,
            ..Default::default()
        },
        ensembled,
        seed,
        ..Default::default()
    };
    let out = cross_validate(&data.manifest, &data.vols, &data.model, &cfg).unwrap();
    let f1 = out.report.f1_mean;
    eprintln!("  seed {seed} N={n} P={p} ensembled={ensembled}: F1 {f1:.4} folds {:?}", out.report.folds.iter().map(|f| f.f1).collect::<Vec<_>>());
    f1
}

fn seeds() -> Vec<u64> {
    (0..env_or("ACCEPTANCE_SEEDS", 3u64)).collect()
}

fn c9_ensembling_direction() -> Verdict {
    let (mut ens, mut single) = (0.0, 0.0);
    let s = seeds();
    for &seed in &s {
        let data = prepare(seed);
        ens += cv_f1(&data, seed, 5, 35, true) / s.len() as f64;
        single += cv_f1(&data, seed, 1, 35, false) / s.len() as f64;
    }
    verdict(
        ens >= single,
        format!("mean F1 over {} seeds: N=5 ensembled {ens:.4}, N=1 per-instance {single:.4}", s.len()),
    )
}

fn c10_interior_optimum() -> Verdict {
    let grid = [25, 30, 35, 40, 45];
    let n = env_or("ACCEPTANCE_N10", 1);
    let s = seeds();
    let mut curve = [0.0; 5];
    for &seed in &s {
        let data = prepare(seed);
        for (i, &p) in grid.iter().enumerate() {
            curve[i] += cv_f1(&data, seed, n, p, true) / s.len() as f64;
        }
    }
    let best = (0..5).max_by(|&a, &b| curve[a].total_cmp(&curve[b])).unwrap();
    let text: Vec<String> = grid.iter().zip(&curve).map(|(p, f)| format!("P{p} {f:.4}")).collect();
    verdict(
        best != 0 && best != 4,
        format!("N={n}{}, {} seeds: {}; max at P={}", if n > 1 { " ensembled" } else { "" }, s.len(), text.join(", "), grid[best]),
    )
}
