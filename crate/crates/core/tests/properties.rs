use std::collections::BTreeSet;

use proptest::prelude::*;

use sinus_mil::dataset::{make_splits, Label, Manifest, Side, Split, SplitRatios, SubjectRecord};
use sinus_mil::ensemble_eval::{ensemble_probabilities, mean_probabilities};
use sinus_mil::phantom::{PhantomCohort, PhantomSpec};
use sinus_mil::registration::{apply_transform, register_with, RegistrationConfig, RigidTransform};
use sinus_mil::sampling::{
    crop_window, extract_all, extract_instance, AxisGaussians, CentroidModel, INSTANCE_DIM,
};
use sinus_mil::{load_volume, save_volume, PatchSize, Volume};

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..12, 1usize..12, 1usize..12]
}

fn volume(max: usize) -> impl Strategy<Value = Volume> {
    [2usize..max, 2usize..max, 2usize..max].prop_flat_map(|d| {
        let n = d.iter().product::<usize>();
        proptest::collection::vec(-1000.0f32..1000.0, n)
            .prop_map(move |data| Volume::new(d, [1.0; 3], data).unwrap())
    })
}

fn mean_std(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flip_is_an_involution(v in volume(10)) {
        prop_assert_eq!(v.flip_lr().flip_lr(), v);
    }

    #[test]
    fn flip_reverses_the_first_axis(v in volume(8)) {
        let f = v.flip_lr();
        let [nx, ny, nz] = v.dims();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    prop_assert_eq!(f.get(i, j, k), v.get(nx - 1 - i, j, k));
                }
            }
        }
    }

    #[test]
    fn resampling_a_constant_is_exact(src in dims(), dst in dims(), c in -1e4f32..1e4) {
        let v = Volume::filled(src, [1.0; 3], c).unwrap();
        let r = v.resample(dst).unwrap();
        prop_assert_eq!(r.dims(), dst);
        prop_assert!(r.data().iter().all(|&x| x == c));
    }

    #[test]
    fn resampling_reproduces_linear_fields(
        src in [2usize..14, 2usize..14, 2usize..14],
        dst in [1usize..20, 1usize..20, 1usize..20],
        g in [-0.3f64..0.3, -0.3f64..0.3, -0.3f64..0.3],
        c in -2.0f64..2.0,
    ) {
        let field = |p: [f64; 3]| c + g[0] * p[0] + g[1] * p[1] + g[2] * p[2];
        let v = Volume::from_fn(src, [1.0; 3], |i, j, k| field([i as f64, j as f64, k as f64]) as f32).unwrap();
        let r = v.resample(dst).unwrap();
        let coord = |a: usize, o: usize| (o as f64 + 0.5) * src[a] as f64 / dst[a] as f64 - 0.5;
        for k in 0..dst[2] {
            for j in 0..dst[1] {
                for i in 0..dst[0] {
                    let p = [coord(0, i), coord(1, j), coord(2, k)];
                    // Outside the outer voxel centres sampling clamps.
                    let q: [f64; 3] = std::array::from_fn(|a| p[a].clamp(0.0, (src[a] - 1) as f64));
                    let got = r.get(i, j, k) as f64;
                    prop_assert!((got - field(q)).abs() <= 1e-5, "{got} vs {} at {p:?}", field(q));
                }
            }
        }
    }

    #[test]
    fn normalized_volumes_have_zero_mean_unit_std(v in volume(10)) {
        let (_, s0) = mean_std(v.data());
        prop_assume!(s0 > 1e-3);
        let n = v.normalize_intensity();
        let (m, s) = mean_std(n.data());
        prop_assert!(m.abs() <= 1e-6, "mean {m}");
        prop_assert!((s - 1.0).abs() <= 1e-6, "std {s}");
    }

    #[test]
    fn crop_windows_stay_inside_the_grid(
        c in (any::<f64>(), -1e3f64..1e3, -50.0f64..200.0),
        p in 1usize..50,
        d in [50usize..140, 50usize..140, 50usize..140],
    ) {
        let w = crop_window([c.0, c.1, c.2], p, d);
        for a in 0..3 {
            prop_assert!(w[a] + p <= d[a]);
        }
    }

    #[test]
    fn ensembles_are_distributions_and_order_free(
        ps in proptest::collection::vec(0.0f64..=1.0, 1..25),
        rot in 0usize..25,
    ) {
        let probs: Vec<[f64; 2]> = ps.iter().map(|&p| [1.0 - p, p]).collect();
        let m = mean_probabilities(&probs);
        prop_assert!((m[0] + m[1] - 1.0).abs() <= 1e-12);
        let mut shuffled = probs.clone();
        shuffled.rotate_left(rot % probs.len());
        shuffled.reverse();
        let m2 = mean_probabilities(&shuffled);
        prop_assert!((m[1] - m2[1]).abs() <= 1e-12);
        let direct = ps.iter().sum::<f64>() / ps.len() as f64;
        prop_assert!((m[1] - direct).abs() <= 1e-12);
    }

    #[test]
    fn raising_one_anomaly_score_never_flips_to_normal(
        ps in proptest::collection::vec(0.0f64..=1.0, 1..25),
        at in 0usize..25,
        bump in 0.0f64..=1.0,
        threshold in 0.05f64..0.95,
    ) {
        let probs: Vec<[f64; 2]> = ps.iter().map(|&p| [1.0 - p, p]).collect();
        let before = ensemble_probabilities("s", Side::Left, &probs, threshold).unwrap();
        let mut raised = probs.clone();
        let i = at % probs.len();
        let p = (raised[i][1] + bump).min(1.0);
        raised[i] = [1.0 - p, p];
        let after = ensemble_probabilities("s", Side::Left, &raised, threshold).unwrap();
        prop_assert!(after.probabilities[1] >= before.probabilities[1] - 1e-15);
        if before.prediction == Label::Anomaly {
            prop_assert_eq!(after.prediction, Label::Anomaly);
        }
    }
}

fn cohort(labels: &[(bool, bool)]) -> Manifest {
    Manifest::new(
        labels
            .iter()
            .enumerate()
            .map(|(i, &(l, r))| SubjectRecord::new(format!("s{i:03}"), Label::from_positive(l), Label::from_positive(r)))
            .collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_are_deterministic_and_leak_free(
        labels in proptest::collection::vec((proptest::bool::weighted(0.3), proptest::bool::weighted(0.3)), 40..120),
        seed in any::<u64>(),
        folds in 2usize..5,
    ) {
        let m = cohort(&labels);
        let pos = labels.iter().map(|&(l, r)| l as usize + r as usize).sum::<usize>();
        prop_assume!(pos >= folds + 2 && m.sinus_count() - pos >= folds + 2);
        let ratios = SplitRatios::default();
        let a = make_splits(&m, ratios, seed, folds).unwrap();
        let b = make_splits(&m, ratios, seed, folds).unwrap();
        prop_assert_eq!(&a, &b);

        let ids = |split: Split, fold: usize| -> BTreeSet<String> {
            a.sinuses_in(split, fold).iter().map(|(s, _, _)| s.subject_id.clone()).collect()
        };
        let test0 = ids(Split::Test, 0);
        let mut vals = BTreeSet::new();
        for fold in 0..folds {
            let (tr, va, te) = (ids(Split::Train, fold), ids(Split::Val, fold), ids(Split::Test, fold));
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(tr.len() + va.len() + te.len(), labels.len());
            prop_assert_eq!(&te, &test0);
            prop_assert!(vals.is_disjoint(&va));
            vals.extend(va);
        }
    }
}

fn wide_model() -> CentroidModel {
    let g = |x: f64| AxisGaussians {
        mean: [x, 30.0, 30.0],
        std: [6.0; 3],
    };
    CentroidModel {
        left: g(20.0),
        right: g(40.0),
    }
}

fn blob_volume(d: usize, seed: u64) -> Volume {
    let s = seed as f64;
    Volume::from_fn([d; 3], [1.0; 3], |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        let c = [d as f64 * 0.4 + (s % 3.0), d as f64 * 0.55, d as f64 * 0.5 - (s % 2.0)];
        let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
        let r2b: f64 = (0..3).map(|a| (p[a] - c[a] - 4.0 + a as f64).powi(2)).sum();
        (100.0 * (-r2 / 30.0).exp() + 60.0 * (-r2b / 8.0).exp() + 0.1 * (p[0] * 0.7 + p[1] * 1.3 + s).sin()) as f32
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn instances_are_z_scored_cubes(seed in any::<u64>(), p in prop::sample::select(PatchSize::GRID.to_vec())) {
        let v = blob_volume(60, seed % 7);
        let a = extract_all(&v, &wide_model(), 2, PatchSize::new(p).unwrap(), seed).unwrap();
        let b = extract_all(&v, &wide_model(), 2, PatchSize::new(p).unwrap(), seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), 4);
        prop_assert_eq!(a.iter().filter(|i| i.side == Side::Left).count(), 2);
        for inst in &a {
            prop_assert_eq!(inst.data.dims(), [INSTANCE_DIM; 3]);
            prop_assert_eq!(inst.patch_size, p);
            let (m, s) = mean_std(inst.data.data());
            prop_assert!(m.abs() <= 1e-5 && (s - 1.0).abs() <= 1e-5, "mean {m} std {s}");
        }
    }

    #[test]
    fn right_instances_mirror_the_crop(seed in any::<u64>(), c in [10.0f64..50.0, 10.0f64..50.0, 10.0f64..50.0]) {
        let v = blob_volume(60, seed % 5);
        let p = PatchSize::new(25).unwrap();
        let left = extract_instance(&v, c, p, Side::Left).unwrap();
        let right = extract_instance(&v, c, p, Side::Right).unwrap();
        let mirrored = left.data.flip_lr();
        let worst = right.data.data().iter().zip(mirrored.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst <= 1e-4, "max difference {worst}");
    }

    #[test]
    fn registration_never_lowers_similarity(
        seed in 0u64..100,
        r in [-6.0f64..6.0, -6.0f64..6.0, -6.0f64..6.0],
        t in [-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0],
    ) {
        let fixed = blob_volume(24, seed);
        let moving = apply_transform(&fixed, &RigidTransform::new(r, t), [24; 3]).unwrap();
        let cfg = RegistrationConfig { levels: vec![2, 1], max_iterations: 40, ..Default::default() };
        let res = register_with(&fixed, &moving, &cfg).unwrap();
        prop_assert!(res.ncc_after >= res.ncc_before, "{} < {}", res.ncc_after, res.ncc_before);
        prop_assert_eq!(res.warped.dims(), fixed.dims());
    }

    #[test]
    fn nifti_round_trip_is_voxel_exact(v in volume(12), gz in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gz { "v.nii.gz" } else { "v.nii" });
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.data(), v.data());
    }

    #[test]
    fn phantom_planning_is_deterministic_and_labelled_by_lesions(seed in any::<u64>(), excluded in 0usize..6) {
        let spec = PhantomSpec { cohort_size: 12, annotated_subjects: 12, excluded_sinuses: excluded, seed, ..Default::default() };
        let a = PhantomCohort::plan(&spec).unwrap();
        let b = PhantomCohort::plan(&spec).unwrap();
        prop_assert_eq!(&a.subjects, &b.subjects);
        let m = a.manifest();
        prop_assert_eq!(m.sinus_count(), 24 - excluded);
        for (rec, s) in m.subjects.iter().zip(&a.subjects) {
            prop_assert_eq!(&rec.subject_id, &s.subject_id);
            for side in Side::BOTH {
                let sp = s.side(side);
                prop_assert_eq!(rec.side(side).label, Label::from_positive(sp.lesion.is_some()));
                prop_assert_eq!(rec.side(side).included, sp.included);
                if let Some(l) = sp.lesion {
                    prop_assert!(sp.in_cavity(l.center));
                }
            }
        }
    }
}

#[test]
fn rendered_lesions_are_visible() {
    let spec = PhantomSpec {
        cohort_size: 16,
        annotated_subjects: 16,
        lesion_probability: 0.5,
        seed: 3,
        ..Default::default()
    };
    let cohort = PhantomCohort::plan(&spec).unwrap();
    let mut seen = 0;
    for s in cohort.subjects.iter().filter(|s| s.sides.iter().any(|sp| sp.lesion.is_some())).take(3) {
        let v = s.render(&spec, false, false);
        for sp in &s.sides {
            let c = sp.cavity_center;
            let inside = v.sample(c);
            match sp.lesion {
                Some(l) => {
                    let at = v.sample(l.center);
                    assert!(
                        (at - spec.levels.lesion).abs() < (at - spec.levels.cavity).abs(),
                        "{} {:?}",
                        s.subject_id,
                        sp.side
                    );
                    seen += 1;
                }
                None if sp.air_cell.is_none() => {
                    assert!((inside - spec.levels.cavity).abs() < 1.0);
                }
                None => {}
            }
        }
    }
    assert!(seen > 0);
}
