use std::collections::BTreeMap;

use proptest::prelude::*;

use cascade_pseudo::apm::{ApmConfig, ClassStatsStore};
use cascade_pseudo::cpl::{ensemble, gate, TeacherTarget, ThresholdTable};
use cascade_pseudo::dataset::{coco_json, parse_coco, parse_results, results_entries};
use cascade_pseudo::eval::{average_precision, fixed_ap, pr_curve, EvalDetection, EvalGroundTruth};
use cascade_pseudo::geometry::{giou, greedy_match, iou, nms_indices, ScoredBox};
use cascade_pseudo::losses::softmax;
use cascade_pseudo::saod::{erase, CountRounding};
use cascade_pseudo::synthetic::{generate_dataset, SyntheticConfig};
use cascade_pseudo::{BBox, ClassGroup, DetectionRecord, ScoreSemantics};

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, n).prop_map(|z| softmax(&z))
}

fn arb_dets(max: usize) -> impl Strategy<Value = Vec<EvalDetection>> {
    prop::collection::vec((1..4u64, 0..3usize, arb_box(), 0.0..1.0f64), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|(image_id, class, bbox, score)| EvalDetection { image_id, class, bbox, score })
            .collect()
    })
}

fn arb_gts(max: usize) -> impl Strategy<Value = Vec<EvalGroundTruth>> {
    prop::collection::vec((1..4u64, 0..3usize, arb_box()), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|(image_id, class, bbox)| EvalGroundTruth { image_id, class, bbox })
            .collect()
    })
}

proptest! {
    #[test]
    fn iou_and_giou_bounds(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - iou(&b, &a)).abs() < 1e-12);
        let g = giou(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!(g <= v + 1e-12);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_a_subset_without_overlaps(
        boxes in prop::collection::vec(arb_box(), 0..12),
        seed in any::<u64>(),
        t in 0.1..0.9f64,
    ) {
        let n = boxes.len();
        let scores: Vec<f64> = (0..n).map(|i| ((seed >> (i % 60)) % 7) as f64 / 7.0).collect();
        let classes: Vec<usize> = (0..n).map(|i| ((seed >> (i % 50)) % 2) as usize).collect();
        let kept = nms_indices(&boxes, &scores, &classes, t);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        for (x, &i) in kept.iter().enumerate() {
            for &j in &kept[x + 1..] {
                prop_assert!(classes[i] != classes[j] || iou(&boxes[i], &boxes[j]) <= t);
            }
        }
        // the top-scoring box of each class always survives
        for c in 0..2 {
            let top = (0..n).filter(|&i| classes[i] == c).fold(None, |b: Option<usize>, i| match b {
                Some(b) if scores[b] >= scores[i] => Some(b),
                _ => Some(i),
            });
            if let Some(top) = top {
                prop_assert!(kept.contains(&top));
            }
        }
        // idempotent on its own output
        let kb: Vec<BBox> = kept.iter().map(|&i| boxes[i]).collect();
        let ks: Vec<f64> = kept.iter().map(|&i| scores[i]).collect();
        let kc: Vec<usize> = kept.iter().map(|&i| classes[i]).collect();
        prop_assert_eq!(nms_indices(&kb, &ks, &kc, t), (0..kept.len()).collect::<Vec<_>>());
    }

    #[test]
    fn greedy_match_is_one_to_one(
        dets in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..10),
        gts in prop::collection::vec(arb_box(), 0..10),
        t in 0.1..0.9f64,
    ) {
        let sb: Vec<ScoredBox> = dets.iter().map(|&(bbox, score)| ScoredBox { bbox, score }).collect();
        let m = greedy_match(&sb, &gts, t);
        let mut used = vec![false; gts.len()];
        for &(d, a, v) in &m.pairs {
            prop_assert!(!used[a]);
            used[a] = true;
            prop_assert!(v >= t);
            prop_assert!((iou(&dets[d].0, &gts[a]) - v).abs() < 1e-12);
        }
        prop_assert_eq!(m.pairs.len() + m.unmatched_detections.len(), dets.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_annotations.len(), gts.len());
        // an unmatched detection has no free annotation left above threshold
        for &d in &m.unmatched_detections {
            for &a in &m.unmatched_annotations {
                prop_assert!(iou(&dets[d].0, &gts[a]) < t);
            }
        }
    }

    #[test]
    fn apm_schedule_is_monotone(
        values in prop::collection::vec(0.0..=1.0f64, 0..60),
        mut eps in prop::collection::vec(-2.0..3.0f64, 3),
        capacity in 1usize..30,
    ) {
        eps.sort_by(f64::total_cmp);
        let config = ApmConfig { capacity, min_samples: 1, epsilons: eps, ..ApmConfig::default() };
        let mut store = ClassStatsStore::new(2, config).unwrap();
        for (i, v) in values.iter().enumerate() {
            store.record_confidence(i % 2, *v).unwrap();
            for c in 0..2 {
                let t = store.thresholds(c).unwrap();
                prop_assert!(t.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(t.iter().all(|x| (0.0..=1.0).contains(x)));
                prop_assert!(store.queue(c).unwrap().len() <= capacity);
            }
        }
    }

    #[test]
    fn ensemble_is_the_stage_mean(
        stages in prop::collection::vec((arb_simplex(5), arb_box()), 1..5),
    ) {
        let k = stages.len();
        let records: Vec<DetectionRecord> = stages
            .iter()
            .enumerate()
            .map(|(i, (p, b))| DetectionRecord {
                image_id: 1,
                proposal_id: 9,
                stage: i + 1,
                class_probs: p.clone(),
                bbox: *b,
                semantics: ScoreSemantics::Softmax,
            })
            .collect();
        let refs: Vec<&DetectionRecord> = records.iter().rev().collect();
        let t = ensemble(&refs, k).unwrap();
        for j in 0..5 {
            let want = stages.iter().map(|(p, _)| p[j]).sum::<f64>() / k as f64;
            prop_assert!((t.probs[j] - want).abs() < 1e-12);
        }
        prop_assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let x0 = stages.iter().map(|(_, b)| b.x_min).sum::<f64>() / k as f64;
        prop_assert!((t.bbox.x_min - x0).abs() < 1e-9);
        prop_assert!(t.probs[..4].iter().all(|&p| p <= t.confidence));
    }

    #[test]
    fn gating_with_monotone_thresholds_is_nested(
        probs in prop::collection::vec(arb_simplex(4), 0..40),
        rows in prop::collection::vec(prop::collection::vec(0.0..=1.0f64, 3), 3),
    ) {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|mut r| {
                r.sort_by(f64::total_cmp);
                r
            })
            .collect();
        let table = ThresholdTable::from_rows(rows);
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let targets: Vec<TeacherTarget> = probs
            .into_iter()
            .enumerate()
            .map(|(i, p)| TeacherTarget::from_probs(1, i as u64, p, b))
            .collect();
        let set = gate(targets, &table);
        prop_assert_eq!(set.nesting_violations(), 0);
        let sizes = set.sizes();
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn recall_never_increases_with_tau(dets in arb_dets(20), gts in arb_gts(10)) {
        let taus: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let curve = pr_curve(&dets, &gts, &taus, 0.5);
        prop_assert!(curve.windows(2).all(|w| w[1].recall <= w[0].recall + 1e-12));
    }

    #[test]
    fn uncapped_fixed_ap_is_mean_class_ap(dets in arb_dets(20), gts in arb_gts(10)) {
        let groups = vec![Some(ClassGroup::Rare), Some(ClassGroup::Common), Some(ClassGroup::Rare)];
        let got = fixed_ap(&dets, &gts, &groups, usize::MAX, &[0.5]);
        let mut aps = Vec::new();
        for c in 0..3 {
            let d: Vec<EvalDetection> = dets.iter().filter(|x| x.class == c).copied().collect();
            let g: Vec<EvalGroundTruth> = gts.iter().filter(|x| x.class == c).copied().collect();
            let ap = average_precision(&d, &g, &[0.5]);
            prop_assert_eq!(got.per_class[c], ap);
            if let Some(ap) = ap {
                aps.push((c, ap));
            }
        }
        if aps.is_empty() {
            prop_assert_eq!(got.overall, 0.0);
        } else {
            let mean = aps.iter().map(|x| x.1).sum::<f64>() / aps.len() as f64;
            prop_assert!((got.overall - mean).abs() < 1e-12);
            // group means are means of member classes
            let rare: Vec<f64> = aps.iter().filter(|(c, _)| *c != 1).map(|x| x.1).collect();
            if !rare.is_empty() {
                let want = rare.iter().sum::<f64>() / rare.len() as f64;
                prop_assert!((got.per_group[&ClassGroup::Rare] - want).abs() < 1e-12);
            }
        }
        for ap in got.per_class.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(ap));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coco_and_results_round_trip(seed in 0u64..1000, classes in 2usize..8) {
        let config = SyntheticConfig { seed, num_classes: classes, labeled_images: 8, ..SyntheticConfig::default() };
        let (labeled, _) = generate_dataset(&config).unwrap();
        let back = parse_coco(coco_json(&labeled).as_bytes()).unwrap();
        prop_assert_eq!(back.annotations.len(), labeled.annotations.len());
        for (a, b) in back.annotations.iter().zip(&labeled.annotations) {
            prop_assert_eq!((a.id, a.image_id, a.category_id), (b.id, b.image_id, b.category_id));
            // xywh storage costs at most an ulp or two per corner
            for (x, y) in a.bbox.corners().iter().zip(b.bbox.corners()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
        prop_assert_eq!(&back.images, &labeled.images);
        let ids: Vec<u64> = back.categories.iter().map(|c| c.id).collect();
        prop_assert_eq!(&ids, &labeled.class_ids());

        let records = cascade_pseudo::synthetic::simulate_detector(&labeled, &config, 0.3);
        let entries = results_entries(&records, &labeled.class_ids()).unwrap();
        let json = serde_json::to_vec(&entries).unwrap();
        let parsed = parse_results(&json, &labeled.class_ids()).unwrap();
        prop_assert_eq!(parsed.len(), records.len());
        for (a, b) in parsed.iter().zip(&records) {
            prop_assert_eq!(a.stage, b.stage);
            prop_assert_eq!(a.proposal_id, b.proposal_id);
            prop_assert_eq!(a.class_probs.len(), b.class_probs.len());
            for (x, y) in a.class_probs.iter().zip(&b.class_probs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.bbox.corners().iter().zip(b.bbox.corners()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn erasure_removes_the_expected_counts(seed in any::<u64>(), ratio in 0.0..=1.0f64) {
        let config = SyntheticConfig { seed: seed % 50, labeled_images: 30, ..SyntheticConfig::default() };
        let (labeled, _) = generate_dataset(&config).unwrap();
        let (sparse, report) = erase(&labeled, ratio, seed, CountRounding::Stochastic);
        prop_assert_eq!(sparse.annotations.len() + report.removed.len(), labeled.annotations.len());
        let mut removed: BTreeMap<u64, usize> = BTreeMap::new();
        for a in &report.removed {
            *removed.entry(a.category_id).or_default() += 1;
        }
        for (cat, (n, m)) in &report.per_category {
            let exact = ratio * *n as f64;
            prop_assert!(*m as f64 >= exact.floor() - 1e-9 && *m as f64 <= exact.ceil() + 1e-9);
            prop_assert_eq!(removed.get(cat).copied().unwrap_or(0), *m);
        }
        // inputs are never mutated and the sparse view recounts
        for c in &sparse.categories {
            let n = sparse.annotations.iter().filter(|a| a.category_id == c.id).count() as u64;
            prop_assert_eq!(c.instance_count, n);
        }
    }
}
