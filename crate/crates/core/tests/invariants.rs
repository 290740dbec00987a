//! Property tests for the data-type and operation invariants that cross
//! module boundaries.

use proptest::prelude::*;

use fusionvit::camera::{patchify, unpatchify, ImageTensor};
use fusionvit::data::{generate_scene, SynthConfig};
use fusionvit::detection::{match_predictions, BoxCoder, DetectionHead, DetectionSet, GroundTruth, HeadConfig, HeadMode};
use fusionvit::encoder::EncoderConfig;
use fusionvit::fusion::{FusionConfig, FusionStrategy, MixVit};
use fusionvit::geometry::{box_from_corners, corners_of, iou_3d, iou_bev, nms, Box2D, Box3D};
use fusionvit::lidar::{augment, sample_points, voxelize, PointCloud, Range3};
use fusionvit::nn::{Activation, Forward, Init, Mode, ParamStore};
use fusionvit::Error;

fn box3d() -> impl Strategy<Value = Box3D> {
    (
        -20.0f64..20.0,
        -20.0f64..20.0,
        -2.0f64..2.0,
        0.3f64..6.0,
        0.3f64..3.0,
        0.3f64..3.0,
        -10.0f64..10.0,
    )
        .prop_map(|(cx, cy, cz, l, w, h, t)| Box3D::new(cx, cy, cz, l, w, h, t).unwrap())
}

fn cloud() -> impl Strategy<Value = PointCloud> {
    proptest::collection::vec((-1.0f64..9.0, -5.0f64..5.0, -2.5f64..2.5), 1..400).prop_map(|pts| {
        let range = Range3 {
            min: [0.0, -4.0, -2.0],
            max: [8.0, 4.0, 2.0],
        };
        PointCloud::new(pts.into_iter().map(|(x, y, z)| [x, y, z]).collect(), range)
    })
}

proptest! {
    #[test]
    fn headings_are_stored_wrapped(b in box3d()) {
        prop_assert!(b.theta >= -std::f64::consts::PI && b.theta < std::f64::consts::PI);
    }

    #[test]
    fn non_positive_extents_are_rejected(l in -2.0f64..=0.0, w in 0.1f64..2.0) {
        prop_assert!(matches!(Box3D::new(0.0, 0.0, 0.0, l, w, 1.0, 0.0), Err(Error::InvalidBox(_))));
        prop_assert!(Box2D::new(0.0, 0.0, l, w).is_err());
    }

    #[test]
    fn corner_centroid_is_the_centre(b in box3d()) {
        let c = corners_of(&b).unwrap().centroid();
        for (got, want) in c.iter().zip(b.center()) {
            prop_assert!((got - want).abs() < 1e-9);
        }
        let back = box_from_corners(&corners_of(&b).unwrap()).unwrap();
        prop_assert!((back.l - b.l).abs() < 1e-9 && (back.w - b.w).abs() < 1e-9 && (back.h - b.h).abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in box3d(), b in box3d()) {
        for (x, y) in [(iou_3d(&a, &b), iou_3d(&b, &a)), (iou_bev(&a, &b), iou_bev(&b, &a))] {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nms_survivors_overlap_at_most_the_threshold(
        boxes in proptest::collection::vec(box3d(), 1..20),
        t in 0.05f64..0.9,
        seed in any::<u64>(),
    ) {
        let scores: Vec<f64> = (0..boxes.len()).map(|i| ((seed >> (i % 60)) & 7) as f64).collect();
        let keep = nms(&boxes, &scores, t, usize::MAX);
        for (k, &i) in keep.iter().enumerate() {
            for &j in &keep[k + 1..] {
                prop_assert!(iou_3d(&boxes[i], &boxes[j]) <= t);
            }
        }
        for w in keep.windows(2) {
            prop_assert!(scores[w[0]] >= scores[w[1]]);
        }
    }

    #[test]
    fn patchify_is_a_row_major_bijection(gr in 1usize..5, gc in 1usize..5, ph in 1usize..6, pw in 1usize..6) {
        let (h, w) = (gr * ph, gc * pw);
        let data: Vec<f64> = (0..h * w * 3).map(|i| i as f64 / (h * w * 3) as f64).collect();
        let img = ImageTensor::new(h, w, data).unwrap();
        let grid = patchify(&img, ph, pw).unwrap();
        prop_assert_eq!(grid.count(), gr * gc);
        prop_assert_eq!(grid.patches.cols(), ph * pw * 3);
        // The first value of patch (r, c) is pixel (r·ph, c·pw).
        for r in 0..gr {
            for c in 0..gc {
                prop_assert_eq!(grid.patches.get(r * gc + c, 0), img.pixel(r * ph, c * pw)[0]);
            }
        }
        prop_assert_eq!(unpatchify(&grid), img);
    }

    #[test]
    fn voxel_cells_are_non_empty_bounded_and_capped(pc in cloud(), cap in 1usize..6, seed in any::<u64>()) {
        let grid = voxelize(&pc, [1.0, 1.0, 1.0], &pc.range).unwrap();
        let sampled = sample_points(&grid, cap, seed).unwrap();
        for g in [&grid, &sampled] {
            for (idx, pts) in &g.cells {
                prop_assert!(!pts.is_empty());
                let (lo, hi) = g.cell_bounds(*idx);
                for p in pts {
                    prop_assert!(pc.range.contains(*p));
                    for k in 0..3 {
                        prop_assert!(p[k] >= lo[k] - 1e-9 && p[k] <= hi[k] + 1e-9);
                    }
                }
            }
        }
        prop_assert!(sampled.cells.values().all(|p| p.len() <= cap));
        prop_assert_eq!(sampled.len(), grid.len());
    }

    #[test]
    fn centroid_offsets_average_to_zero(pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -3.0f64..3.0), 1..64)) {
        let pts: Vec<[f64; 3]> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let v = augment(&pts).unwrap();
        for k in 3..6 {
            let mean = v.points.iter().map(|p| p[k]).sum::<f64>() / pts.len() as f64;
            prop_assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_width_must_divide_into_heads(width in 1usize..64, heads in 1usize..9) {
        let cfg = EncoderConfig { width, heads, ..EncoderConfig::default() };
        prop_assert_eq!(cfg.validate().is_ok(), width % heads == 0);
    }
}

fn fusion_cfg(strategy: FusionStrategy) -> FusionConfig {
    FusionConfig {
        strategy,
        token_mlp: vec![8],
        max_tokens: 12,
        direct_camera_tokens: 4,
        direct_lidar_tokens: 8,
        encoder: EncoderConfig {
            depth: 1,
            width: 8,
            heads: 2,
            mlp_hidden: 8,
            dropout: 0.0,
            activation: Activation::Gelu,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_token_counts_follow_the_strategy(nc in 1usize..8, nl in 1usize..12, seed in any::<u64>()) {
        for strategy in FusionStrategy::ALL {
            let cfg = fusion_cfg(strategy);
            let mut store = ParamStore::new();
            let mut init = Init::new(seed, 0.1);
            let mix = MixVit::new(&mut store, &mut init, "mix", &cfg, 4).unwrap();
            let mut f = Forward::new(&store, Mode::Eval, 0);
            // The camera patch count is fixed by the image size; only lidar
            // sequences vary in length under direct fusion.
            let nc = if strategy == FusionStrategy::DirectConcat { cfg.direct_camera_tokens } else { nc };
            let c = f.tape.constant(init.trunc_normal(nc, 4));
            let l = f.tape.constant(init.trunc_normal(nl, 4));
            let fused = mix.fuse(&mut f, c, l).unwrap();
            let expected = match strategy {
                FusionStrategy::Concat => (nc + nl).min(cfg.max_tokens),
                FusionStrategy::Sum => nc.max(nl),
                FusionStrategy::DirectConcat => cfg.direct_tokens(),
            };
            prop_assert_eq!(f.tape.shape(fused), (expected, 8));
            let readout = mix.forward(&mut f, c, l).unwrap();
            prop_assert_eq!(f.tape.shape(readout), (1, 8));
        }
    }

    #[test]
    fn head_probabilities_are_distributions_and_matching_is_injective(
        seed in any::<u64>(),
        n in 1usize..12,
        boxes in proptest::collection::vec(box3d(), 0..6),
    ) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed, 0.5);
        let cfg = HeadConfig { num_proposals: n, num_classes: 2, hidden: vec![8], activation: Activation::Gelu };
        let coder = BoxCoder::for_region(&[-20.0, -20.0, -2.0], &[20.0, 20.0, 2.0], &[3.9, 1.6, 1.56]);
        let head = DetectionHead::new(&mut store, &mut init, "head", 6, &cfg, HeadMode::Box3d, coder).unwrap();
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let x = f.tape.constant(init.trunc_normal(1, 6));
        let out = head.forward(&mut f, x).unwrap();
        let dets: DetectionSet = out.detections(&f).unwrap();
        for row in &dets.class_probs {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let m = boxes.len().min(n);
        let labels = (0..m).map(|i| i % 2).collect();
        let gt = GroundTruth::new(boxes[..m].to_vec(), labels).unwrap();
        let a = match_predictions(&dets, &gt, 1.0, 1.0).unwrap();
        let mut preds = a.pred_of_gt.clone();
        preds.sort_unstable();
        preds.dedup();
        prop_assert_eq!(preds.len(), m);
        prop_assert!(a.pred_of_gt.iter().all(|&p| p < n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_scenes_satisfy_their_contract(seed in any::<u64>()) {
        let cfg = SynthConfig::toy();
        let s = generate_scene(&cfg, seed).unwrap();
        s.validate().unwrap();
        for b in &s.gt.boxes {
            prop_assert!(s.points_in_box(b) >= 1);
            prop_assert!(s.cloud.range.contains(b.center()));
        }
        prop_assert!(s.cloud.points.iter().all(|p| s.cloud.range.contains(*p)));
        prop_assert_eq!((s.image.height, s.image.width), (cfg.image_height, cfg.image_width));
        prop_assert_eq!(generate_scene(&cfg, seed).unwrap(), s);
    }
}
