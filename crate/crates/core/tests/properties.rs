use std::sync::OnceLock;

use hepatoscan::anatomy::{gate_liver, locate_anatomy, AnatomyMatch, GateDecision};
use hepatoscan::atlas::{build_template, generate_reference_atlas, LiverShapeType, TemplateAtlas};
use hepatoscan::densitometry::{analyze, DensityParams};
use hepatoscan::io::{decode_mask, decode_volume, encode_mask, encode_volume};
use hepatoscan::matcher::{ncc_score, FeatureVolume};
use hepatoscan::metrics::{dice, roc_auc, sens_spec};
use hepatoscan::phantom::{generate, skeleton_template, PhantomKind, PhantomSpec};
use hepatoscan::volume::{morph, BinaryMask, CtVolume, MorphOp, VoxelGrid};
use proptest::prelude::*;

fn atlas() -> &'static TemplateAtlas {
    static A: OnceLock<TemplateAtlas> = OnceLock::new();
    A.get_or_init(|| generate_reference_atlas(1).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(x, y, z)| {
        let n = x * y * z;
        (
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(a, b)| {
                let g = VoxelGrid::new([x, y, z], [1.0, 1.5, 2.0], [0.0; 3]).unwrap();
                (BinaryMask::new(g.clone(), a).unwrap(), BinaryMask::new(g, b).unwrap())
            })
    })
}

/// Random blobby mask on a small anisotropic grid.
fn blob_mask() -> impl Strategy<Value = BinaryMask> {
    (
        proptest::collection::vec((0.0f64..24.0, 0.0f64..24.0, 0.0f64..30.0, 2.0f64..8.0), 1..4),
        prop_oneof![Just(1.0), Just(1.5), Just(2.0)],
    )
        .prop_map(|(balls, s)| {
            let g = VoxelGrid::new([16, 16, 12], [s, s, 2.5], [0.0; 3]).unwrap();
            BinaryMask::from_fn(g.clone(), |ijk| {
                let p = g.position(ijk);
                balls.iter().any(|&(x, y, z, r)| {
                    (p[0] - x).powi(2) + (p[1] - y).powi(2) + (p[2] - z).powi(2) <= r * r
                })
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        data in proptest::collection::vec((-1.0f64..1.0, any::<bool>()), 2..40),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        let base = roc_auc(&scores, &labels).unwrap();
        prop_assert!((base - roc_auc(&mapped, &labels).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((base + roc_auc(&flipped, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sens_spec_threshold_endpoints(
        data in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..40),
    ) {
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let at = |tau: f64| {
            let hits: Vec<bool> = data.iter().map(|d| d.0 >= tau).collect();
            sens_spec(&hits, &labels).unwrap()
        };
        prop_assert_eq!(at(0.0).0, 1.0);
        prop_assert_eq!(at(1.0).1, 1.0);
        let (lo, hi) = (at(0.3), at(0.6));
        prop_assert!(lo.0 >= hi.0 && lo.1 <= hi.1);
    }

    #[test]
    fn morphology_subset_relations(m in blob_mask(), r in 0.5f64..5.0) {
        let eroded = morph(&m, MorphOp::Erode, r).unwrap();
        let dilated = morph(&m, MorphOp::Dilate, r).unwrap();
        let closed = morph(&m, MorphOp::Close, r).unwrap();
        prop_assert!(eroded.is_subset_of(&m).unwrap());
        prop_assert!(m.is_subset_of(&dilated).unwrap());
        prop_assert!(closed.is_subset_of(&dilated).unwrap());
        // Outside the grid is background, so closing can only drop voxels
        // within reach of that outside layer.
        let g = m.grid();
        let (d, sp) = (g.dims(), g.spacing());
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    if m.get(i, j, k) && !closed.get(i, j, k) {
                        let near = [i, j, k].iter().zip(d).zip(sp).any(|((&c, n), s)| {
                            (c + 1) as f64 * s <= r || (n - c) as f64 * s <= r
                        });
                        prop_assert!(near, "interior voxel {:?} lost by closing", [i, j, k]);
                    }
                }
            }
        }
    }

    #[test]
    fn mvol_round_trips(
        dims in (1usize..8, 1usize..8, 1usize..8),
        spacing in (0.3f64..5.0, 0.3f64..5.0, 0.3f64..5.0),
        origin in (-500.0f64..500.0, -500.0f64..500.0, -500.0f64..500.0),
        seed in any::<u64>(),
    ) {
        let g = VoxelGrid::new([dims.0, dims.1, dims.2], [spacing.0, spacing.1, spacing.2], [origin.0, origin.1, origin.2]).unwrap();
        let vol = CtVolume::from_fn(g.clone(), |[i, j, k]| {
            let h = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((i + 7 * j + 49 * k) as u64);
            ((h >> 17) % 4025) as i16 - 1024
        }).unwrap();
        prop_assert_eq!(decode_volume(&encode_volume(&vol)).unwrap(), vol.clone());
        let mask = BinaryMask::from_fn(g, |[i, j, k]| vol.get(i, j, k) > 0);
        prop_assert_eq!(decode_mask(&encode_mask(&mask)).unwrap(), mask);
    }

    #[test]
    fn dominant_mode_shifts_with_the_volume(delta in -60i16..60, seed in any::<u64>()) {
        let g = VoxelGrid::new([20, 20, 10], [2.0; 3], [0.0; 3]).unwrap();
        let vol = CtVolume::from_fn(g.clone(), |[i, j, k]| {
            let h = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((i + 20 * j + 400 * k) as u64);
            40 + ((h >> 20) % 21) as i16 - 10
        }).unwrap();
        let shifted = CtVolume::from_fn(g.clone(), |[i, j, k]| vol.get(i, j, k) + delta).unwrap();
        let mask = BinaryMask::full(g);
        let p = DensityParams::default();
        let a = analyze(&vol, &mask, &p).unwrap();
        let b = analyze(&shifted, &mask, &p).unwrap();
        prop_assert_eq!(a.modes.len(), b.modes.len());
        prop_assert!((a.dominant().mean_hu + f64::from(delta) - b.dominant().mean_hu).abs() < 1e-9);
        prop_assert!((a.dominant().std_hu - b.dominant().std_hu).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ncc_is_affine_invariant(
        seed in any::<u64>(),
        a in 0.1f64..1.0,
        b_frac in 0.0f64..1.0,
        t in 0usize..12,
        scale in 0.8f64..1.25,
        off in (-40.0f64..10.0, -40.0f64..10.0, -40.0f64..10.0),
    ) {
        let g = VoxelGrid::new([24, 24, 24], [2.0; 3], [0.0; 3]).unwrap();
        let values: Vec<f32> = (0..g.len())
            .map(|i| {
                let h = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
                ((h >> 40) as f64 / (1u64 << 24) as f64) as f32
            })
            .collect();
        let b = b_frac * (1.0 - a);
        let mapped: Vec<f32> = values.iter().map(|&v| (a * f64::from(v) + b) as f32).collect();
        let f1 = FeatureVolume::new(g.clone(), values).unwrap();
        let f2 = FeatureVolume::new(g, mapped).unwrap();
        let tmpl = &atlas().templates()[t];
        let o = [off.0, off.1, off.2];
        let (s1, v1) = ncc_score(tmpl, &f1, o, scale).unwrap();
        let (s2, v2) = ncc_score(tmpl, &f2, o, scale).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s1));
        prop_assert!((s1 - s2).abs() < 1e-5, "{s1} vs {s2}");
        prop_assert_eq!(v1, v2);
    }

    #[test]
    fn build_template_is_idempotent(t in 0usize..12) {
        let tmpl = &atlas().templates()[t];
        let again = build_template(tmpl.mask(), tmpl.id(), Some(tmpl.shape_type())).unwrap();
        prop_assert_eq!(again.mask(), tmpl.mask());
        prop_assert_eq!(again.cc_extent_mm(), tmpl.cc_extent_mm());
    }
}

fn gate_matches() -> &'static [AnatomyMatch] {
    static M: OnceLock<Vec<AnatomyMatch>> = OnceLock::new();
    M.get_or_init(|| {
        let skel = skeleton_template();
        [(PhantomKind::Body, 1.0), (PhantomKind::ChestCrop, 0.45), (PhantomKind::ChestCrop, 0.3), (PhantomKind::Head, 1.0)]
            .iter()
            .enumerate()
            .map(|(i, &(kind, fov))| {
                let mut s = PhantomSpec::new(kind, 40 + i as u64);
                s.fov_liver_fraction = fov;
                s.shape = LiverShapeType::I;
                locate_anatomy(&generate(&s).unwrap().0, &skel)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_min_overlap_never_admits(i in 0usize..4, lo in 0.01f64..1.0, step in 0.0f64..1.0) {
        let m = &gate_matches()[i];
        let hi = (lo + step).min(1.0);
        let present = |t: f64| matches!(gate_liver(m, t).unwrap(), GateDecision::Present { .. });
        prop_assert!(!(present(hi) && !present(lo)));
    }
}
