use crossia::augment::{augment_views, AugmentParams};
use crossia::eval::{compute_metrics, TrialResult};
use crossia::geometry::{format_tum, parse_tum, CameraPose, StampedPose};
use crossia::loss::cosine_similarity;
use crossia::map::SegmentMask;
use crossia::world::{degrade, DegradationSpec};
use image::RgbImage;
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = RgbImage> {
    (4u32..24, 4u32..24).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<u8>(), (w * h * 3) as usize)
            .prop_map(move |raw| RgbImage::from_raw(w, h, raw).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(64)
    })]

    #[test]
    fn metrics_stay_ordered(ranks in proptest::collection::vec(1usize..50, 1..30)) {
        let trials = ranks.iter().map(|&k| TrialResult::new("q", 1, k).unwrap()).collect();
        let m = compute_metrics("x", trials).unwrap().metrics.unwrap();
        prop_assert!(m.sr <= m.mrr && m.mrr <= 1.0);
        prop_assert!((m.mr * m.mrr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn augmentation_is_seeded_and_bounded(img in image_strategy(), seed in any::<u64>()) {
        let params = AugmentParams::default();
        let (a, b) = augment_views(&img, &params, seed).unwrap();
        let (a2, b2) = augment_views(&img, &params, seed).unwrap();
        prop_assert_eq!(&a, &a2);
        prop_assert_eq!(&b, &b2);
        for v in [&a, &b] {
            prop_assert_eq!((v.width, v.height), (params.output_size, params.output_size));
            prop_assert!(v.data.iter().all(|x| (-1e-9..=255.0 + 1e-9).contains(x)));
        }
    }

    #[test]
    fn degradation_keeps_dimensions(img in image_strategy(), seed in any::<u64>()) {
        let spec = DegradationSpec { downsample_factor: 2, seed, ..DegradationSpec::default() };
        let out = degrade(&img, &spec).unwrap();
        prop_assert_eq!(out.dimensions(), img.dimensions());
    }

    #[test]
    fn cosine_ignores_positive_scale(
        a in proptest::collection::vec(-10.0f64..10.0, 5),
        b in proptest::collection::vec(-10.0f64..10.0, 5),
        s in 0.001f64..1000.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((c - cosine_similarity(&scaled, &b).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn trajectories_round_trip(
        rows in proptest::collection::vec(
            (0.0f64..1e4, proptest::array::uniform3(-50.0f64..50.0), proptest::array::uniform4(-1.0f64..1.0)),
            1..10,
        ),
    ) {
        let poses: Vec<StampedPose> = rows
            .iter()
            .filter(|(_, _, q)| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .map(|&(t, p, q)| {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                let q = q.map(|v| v / n);
                StampedPose { timestamp: t, pose: CameraPose::from_xyzw(p, q).unwrap() }
            })
            .collect();
        let back = parse_tum(&format_tum(&poses)).unwrap();
        prop_assert_eq!(back.len(), poses.len());
        for (a, b) in poses.iter().zip(&back) {
            prop_assert_eq!(a.timestamp, b.timestamp);
            prop_assert!((a.pose.position - b.pose.position).norm() < 1e-12);
            let (qa, qb) = (a.pose.xyzw(), b.pose.xyzw());
            let dot: f64 = qa.iter().zip(&qb).map(|(x, y)| x * y).sum();
            prop_assert!((dot.abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn masks_round_trip_through_png_depth(ids in proptest::collection::vec(0u32..60000, 12)) {
        let mask = SegmentMask::from_ids(4, 3, ids).unwrap();
        let img = mask.to_u16_image().unwrap();
        prop_assert_eq!(SegmentMask::from_u16_image(&img), mask);
    }
}
