use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;

use psrp_core::data::{DatasetManifest, GroundTruthBox, ImageRecord};
use psrp_core::decode::{nms, Detection, DetectionSet};
use psrp_core::eval::evaluate;
use psrp_core::geometry::{iou, BBox};

fn manifest(gts: &[(u64, usize, BBox)]) -> DatasetManifest {
    DatasetManifest {
        images: (1..=3)
            .map(|id| ImageRecord {
                id,
                width: 200,
                height: 200,
                file_path: format!("{id}.png"),
                pixels: None,
            })
            .collect(),
        annotations: gts
            .iter()
            .map(|&(image_id, class_id, bbox)| GroundTruthBox { image_id, class_id, bbox })
            .collect(),
        crowd: Vec::new(),
        categories: BTreeMap::from([(1, "a".to_string()), (2, "b".to_string())]),
        source_category_ids: BTreeMap::from([(1, 1), (2, 2)]),
        image_root: PathBuf::new(),
    }
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..150.0f64, 0.0..150.0f64, 4.0..50.0f64, 4.0..50.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn gt_list() -> impl Strategy<Value = Vec<(u64, usize, BBox)>> {
    prop::collection::vec((1..=3u64, 1..=2usize, bbox()), 1..8)
}

/// Detections built from jittered ground truth plus random boxes, with
/// distinct scores.
fn scene() -> impl Strategy<Value = (Vec<(u64, usize, BBox)>, Vec<(u64, usize, BBox)>)> {
    gt_list().prop_flat_map(|gts| {
        let n = gts.len();
        let jittered = prop::collection::vec((0..n, -4.0..4.0f64, -4.0..4.0f64), 0..10);
        let random = prop::collection::vec((1..=3u64, 1..=2usize, bbox()), 0..6);
        (Just(gts.clone()), jittered, random).prop_map(|(gts, jit, rnd)| {
            let mut dets: Vec<_> = jit
                .into_iter()
                .map(|(i, dx, dy)| (gts[i].0, gts[i].1, gts[i].2.translate(dx, dy)))
                .collect();
            dets.extend(rnd);
            (gts, dets)
        })
    })
}

fn sets(dets: &[(u64, usize, BBox)], score: impl Fn(usize) -> f64) -> Vec<DetectionSet> {
    (1..=3)
        .map(|image_id| DetectionSet {
            image_id,
            detections: dets
                .iter()
                .enumerate()
                .filter(|(_, d)| d.0 == image_id)
                .map(|(i, d)| Detection {
                    bbox: d.2,
                    class_id: d.1,
                    score: score(i),
                })
                .collect(),
        })
        .collect()
}

fn base_score(i: usize) -> f64 {
    0.95 - 0.03 * i as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_is_invariant_to_monotone_score_rescaling((gts, dets) in scene()) {
        let m = manifest(&gts);
        let a = evaluate(&sets(&dets, base_score), &m).unwrap();
        let b = evaluate(&sets(&dets, |i| base_score(i).powi(3) * 0.5), &m).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn duplicate_detection_never_increases_ap((gts, dets) in scene(), pick in any::<prop::sample::Index>()) {
        prop_assume!(!dets.is_empty());
        let m = manifest(&gts);
        let before = evaluate(&sets(&dets, base_score), &m).unwrap();
        let j = pick.index(dets.len());
        let mut more = dets.clone();
        more.push(dets[j]);
        let dup_score = base_score(j) - 0.01;
        let after = evaluate(&sets(&more, |i| if i == dets.len() { dup_score } else { base_score(i) }), &m).unwrap();
        for (b, a) in [(before.aggregate.ap, after.aggregate.ap), (before.aggregate.ap50, after.aggregate.ap50)] {
            prop_assert!(a.unwrap() <= b.unwrap() + 1e-12, "{:?} -> {:?}", b, a);
        }
    }

    #[test]
    fn ap50_bounds_ap75_and_mean_ap((gts, dets) in scene()) {
        let t = evaluate(&sets(&dets, base_score), &manifest(&gts)).unwrap();
        for m in t.per_class.values().chain([&t.aggregate]) {
            if let (Some(ap), Some(ap50), Some(ap75)) = (m.ap, m.ap50, m.ap75) {
                prop_assert!(ap50 >= ap75 - 1e-12 && ap50 >= ap - 1e-12);
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }
    }

    #[test]
    fn nms_keeps_a_score_sorted_separated_subset(boxes in prop::collection::vec((bbox(), 0.0..1.0f64), 0..30), thr in 0.1..0.9f64) {
        let dets: Vec<Detection> = boxes.iter().map(|&(bbox, score)| Detection { bbox, class_id: 1, score }).collect();
        let kept = nms(dets.clone(), thr);
        prop_assert!(kept.iter().all(|k| dets.contains(k)));
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                prop_assert!(iou(&kept[i].bbox, &kept[j].bbox) <= thr);
            }
        }
    }
}
