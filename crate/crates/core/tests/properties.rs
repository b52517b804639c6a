use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;

use tsr::data::manifest::{parse_manifest_str, Annotation, DatasetManifest, ManifestEntry, Split, Visibility};
use tsr::eval::{average_precision, average_recall, bucketize, match_detections, GtBox, ScaleBucket};
use tsr::geometry::{iou, nms, BBox, ScoredBox};
use tsr::nn::softmax_channels;
use tsr::pipeline::{read_detections, write_detections, Detection};
use tsr::tensor::{Shape, Tensor};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..400.0f64, 0.0..300.0f64, 1.0..120.0f64, 1.0..120.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn scored(class: bool) -> impl Strategy<Value = ScoredBox> {
    (bbox(), 0.0..1.0f64, 1usize..4).prop_map(move |(b, s, c)| ScoredBox::new(b, s, class.then_some(c)))
}

fn boxes_near() -> impl Strategy<Value = Vec<ScoredBox>> {
    // A small canvas, so overlaps are common.
    prop::collection::vec(
        (0.0..40.0f64, 0.0..40.0f64, 5.0..30.0f64, 0.0..1.0f64)
            .prop_map(|(x, y, s, p)| ScoredBox::new(BBox::new(x, y, x + s, y + s).unwrap(), p, None)),
        0..20,
    )
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_survivors_do_not_overlap(boxes in boxes_near(), thr in 0.1..0.9f64) {
        let kept = nms(&boxes, thr);
        prop_assert!(kept.len() <= boxes.len());
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(boxes.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) < thr);
                prop_assert!(a.score >= b.score);
            }
        }
        // Every dropped box is covered by a kept box scoring at least as high.
        for d in boxes.iter().filter(|d| !kept.contains(d)) {
            prop_assert!(kept.iter().any(|k| k.score >= d.score && iou(&k.bbox, &d.bbox) >= thr));
        }
        prop_assert_eq!(nms(&kept, thr), kept);
    }

    #[test]
    fn ap_is_invariant_under_monotone_rescoring(
        scored in prop::collection::vec((0.0..1.0f64, any::<bool>()), 0..30),
        extra_gt in 0usize..5,
    ) {
        let n_gt = scored.iter().filter(|s| s.1).count() + extra_gt;
        let remapped: Vec<(f64, bool)> = scored.iter().map(|&(s, t)| (s.powi(3) * 2.0 + 0.5, t)).collect();
        match (average_precision(&scored, n_gt), average_precision(&remapped, n_gt)) {
            (Some(a), Some(b)) => {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
            (None, None) => prop_assert_eq!(n_gt, 0),
            other => prop_assert!(false, "mismatch {:?}", other),
        }
    }

    #[test]
    fn ar_grows_with_k(
        props in prop::collection::vec(prop::collection::vec(scored(false), 0..12), 1..4),
        gts in prop::collection::vec(prop::collection::vec(bbox(), 1..4), 1..4),
    ) {
        let n = props.len().min(gts.len());
        let (props, gts) = (&props[..n], &gts[..n]);
        let mut last = 0.0;
        for k in [1, 3, 10, 50] {
            let ar = average_recall(props, gts, k).overall;
            prop_assert!(ar + 1e-12 >= last);
            prop_assert!((0.0..=1.0).contains(&ar));
            last = ar;
        }
    }

    #[test]
    fn matching_accounts_for_every_box(
        dets in prop::collection::vec(scored(true), 0..15),
        gts in prop::collection::vec((bbox(), 1usize..4), 0..10),
        thr in 0.1..0.9f64,
    ) {
        let gts: Vec<GtBox> = gts.into_iter().map(|(b, c)| GtBox::new(b, Some(c))).collect();
        let m = match_detections(&dets, &gts, thr);
        prop_assert_eq!(m.true_positives.len() + m.false_negatives.len(), gts.len());
        prop_assert_eq!(m.true_positives.len() + m.false_positives.len(), dets.len());
        for &(_, _, v) in &m.true_positives {
            prop_assert!(v >= thr);
        }
    }

    #[test]
    fn buckets_follow_area_edges(w in 1.0..200.0f64, h in 1.0..200.0f64) {
        let b = BBox::new(0.0, 0.0, w, h).unwrap();
        let want = if w * h < 1024.0 {
            ScaleBucket::Small
        } else if w * h > 9216.0 {
            ScaleBucket::Large
        } else {
            ScaleBucket::Medium
        };
        prop_assert_eq!(bucketize(&b), want);
        prop_assert_eq!(ScaleBucket::ALL.iter().filter(|&&k| k == want).count(), 1);
    }

    #[test]
    fn softmax_sums_to_one(
        values in prop::collection::vec(-30.0..30.0f64, 6..=6),
    ) {
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 2), values).unwrap();
        let p = softmax_channels(&x).unwrap();
        for w in 0..2 {
            let total: f64 = (0..3).map(|c| p.at(0, c, 0, w)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!((0..3).all(|c| p.at(0, c, 0, w) >= 0.0));
        }
    }

    #[test]
    fn snapshot_round_trips(
        dims in (1usize..3, 1usize..4, 1usize..5, 1usize..5),
        seed in any::<u64>(),
    ) {
        let t: Tensor<f32> = Tensor::gaussian_init(Shape::new(dims.0, dims.1, dims.2, dims.3), 0.0, 1.0, seed).unwrap();
        let mut buf = Vec::new();
        t.write_snapshot(&mut buf).unwrap();
        let back: Tensor<f32> = Tensor::read_snapshot(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn manifest_round_trips(
        entries in prop::collection::vec(
            prop::collection::vec((bbox(), 1usize..=10, 0usize..4), 0..4),
            1..6,
        ),
        test_split in any::<bool>(),
    ) {
        let vis = [Visibility::Visible, Visibility::Blurred, Visibility::Occluded, Visibility::SideRoad];
        let manifest = DatasetManifest {
            entries: entries
                .into_iter()
                .enumerate()
                .map(|(i, anns)| {
                    let image = PathBuf::from(format!("images/img_{i:03}.png"));
                    let id = format!("img_{i:03}");
                    ManifestEntry {
                        image,
                        annotations: anns
                            .into_iter()
                            .map(|(bbox, class_id, v)| Annotation { image_id: id.clone(), bbox, class_id, visibility: vis[v] })
                            .collect(),
                    }
                })
                .collect(),
            split: if test_split { Split::Test } else { Split::Train },
            ..DatasetManifest::default()
        };
        let back = parse_manifest_str(&manifest.to_text(), "memory", manifest.root.clone()).unwrap();
        prop_assert_eq!(back, manifest);
    }

    #[test]
    fn detection_file_round_trips_at_two_decimals(
        dets in prop::collection::vec((0usize..3, bbox(), 1usize..=10, 0.0..1.0f64), 0..20),
    ) {
        let names: Vec<String> = DatasetManifest::default().class_names;
        let mut map: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
        for (img, b, class_id, score) in dets {
            map.entry(format!("img{img}")).or_default().push(Detection { bbox: b, class_id, score });
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.txt");
        let mut buf = Vec::new();
        write_detections(&mut buf, &map, &names).unwrap();
        std::fs::write(&path, buf).unwrap();
        let back = read_detections(&path, &names).unwrap();
        prop_assert_eq!(back.len(), map.len());
        for (id, orig) in &map {
            let got = &back[id];
            prop_assert_eq!(got.len(), orig.len());
            for (g, o) in got.iter().zip(orig) {
                prop_assert_eq!(g.class_id, o.class_id);
                prop_assert!((g.score - o.score).abs() <= 0.005 + 1e-9);
                prop_assert!((g.bbox.x_min - o.bbox.x_min).abs() <= 0.005 + 1e-9);
                prop_assert!((g.bbox.y_max - o.bbox.y_max).abs() <= 0.005 + 1e-9);
            }
        }
    }
}

#[test]
fn gaussian_init_moments() {
    for (std, seed) in [(0.01, 1u64), (0.1, 2), (1.0, 3)] {
        let t: Tensor<f64> = Tensor::gaussian_init(Shape::new(1, 1, 400, 500), 0.0, std, seed).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // 200k samples: the sample mean's sd is std/447, the sample sd's is std/632.
        assert!(mean.abs() < 5.0 * std / 447.0, "mean {mean}");
        assert!((var.sqrt() / std - 1.0).abs() < 5.0 / 632.0, "sd {}", var.sqrt());
    }
    let a: Tensor<f32> = Tensor::gaussian_init(Shape::new(1, 2, 3, 4), 0.0, 0.01, 9).unwrap();
    let b: Tensor<f32> = Tensor::gaussian_init(Shape::new(1, 2, 3, 4), 0.0, 0.01, 9).unwrap();
    assert_eq!(a, b);
}
