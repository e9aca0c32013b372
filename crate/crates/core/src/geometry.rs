//! Box overlap, non-maximum suppression and greedy detection-to-ground-truth
//! matching.

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, DetectionRecord};

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    w * h
}

fn hull(a: &BBox, b: &BBox) -> f64 {
    (a.x_max.max(b.x_max) - a.x_min.min(b.x_min)) * (a.y_max.max(b.y_max) - a.y_min.min(b.y_min))
}

/// Intersection over union. Zero-area boxes have IoU 0 with everything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let inter = intersection(a, b);
    let union = aa + ab - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU: `iou - (hull - union) / hull`, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let h = hull(a, b);
    if h <= 0.0 {
        return 0.0;
    }
    iou(a, b) - (h - union) / h
}

/// A box with a ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Indices of `scores` sorted by descending score, ties by ascending index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Greedy per-class NMS over parallel slices. Returns surviving indices in
/// ascending order.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], classes: &[usize], iou_threshold: f64) -> Vec<usize> {
    debug_assert!(boxes.len() == scores.len() && scores.len() == classes.len());
    let order = rank_desc(scores);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| classes[k] == classes[i] && iou(&boxes[k], &boxes[i]) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

/// Greedy NMS over records of one image, per predicted class. Survivors keep
/// their input order.
pub fn nms(records: &[DetectionRecord], iou_threshold: f64) -> Vec<DetectionRecord> {
    let boxes: Vec<BBox> = records.iter().map(|r| r.bbox).collect();
    let scores: Vec<f64> = records.iter().map(|r| r.score()).collect();
    let classes: Vec<usize> = records.iter().map(|r| r.label()).collect();
    nms_indices(&boxes, &scores, &classes, iou_threshold)
        .into_iter()
        .map(|i| records[i].clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(detection index, annotation index, iou)` in detection visiting order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_annotations: Vec<usize>,
}

impl MatchResult {
    /// Annotation index matched to each detection.
    pub fn detection_to_annotation(&self, num_detections: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_detections];
        for &(d, a, _) in &self.pairs {
            out[d] = Some(a);
        }
        out
    }
}

/// Greedy matching of one image/class: detections in descending score order
/// each take the free annotation with the highest IoU `>= iou_threshold`
/// (lowest annotation index on ties).
pub fn greedy_match(detections: &[ScoredBox], annotations: &[BBox], iou_threshold: f64) -> MatchResult {
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let mut taken = vec![false; annotations.len()];
    let mut result = MatchResult::default();
    for d in rank_desc(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (a, gt) in annotations.iter().enumerate() {
            if taken[a] {
                continue;
            }
            let v = iou(&detections[d].bbox, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((a, v));
            }
        }
        match best {
            Some((a, v)) => {
                taken[a] = true;
                result.pairs.push((d, a, v));
            }
            None => result.unmatched_detections.push(d),
        }
    }
    result.unmatched_detections.sort_unstable();
    result.unmatched_annotations = (0..annotations.len()).filter(|&a| !taken[a]).collect();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ScoreSemantics;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)), 0.0);
        assert!((iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn zero_area_boxes_never_overlap() {
        let p = b(1., 1., 1., 1.);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &b(0., 0., 2., 2.)), 0.0);
        assert_eq!(giou(&p, &p), 0.0);
    }

    #[test]
    fn giou_examples() {
        assert_eq!(giou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
        assert!((giou(&b(0., 0., 1., 1.), &b(1., 1., 2., 2.)) + 0.5).abs() < 1e-12);
    }

    fn rec(class_probs: Vec<f64>, bbox: BBox) -> DetectionRecord {
        DetectionRecord {
            image_id: 0,
            proposal_id: 0,
            stage: 1,
            class_probs,
            bbox,
            semantics: ScoreSemantics::Softmax,
        }
    }

    #[test]
    fn nms_same_and_different_class() {
        let bx = b(0., 0., 10., 10.);
        let same = vec![rec(vec![0.9, 0.0, 0.1], bx), rec(vec![0.8, 0.0, 0.2], bx)];
        let kept = nms(&same, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score(), 0.9);

        let diff = vec![rec(vec![0.9, 0.0, 0.1], bx), rec(vec![0.0, 0.8, 0.2], bx)];
        assert_eq!(nms(&diff, 0.5).len(), 2);
    }

    #[test]
    fn nms_tie_prefers_lower_index() {
        let bx = b(0., 0., 10., 10.);
        let boxes = [bx, bx];
        assert_eq!(nms_indices(&boxes, &[0.5, 0.5], &[0, 0], 0.5), vec![0]);
    }

    #[test]
    fn match_examples() {
        let gt = [b(0., 0., 2., 2.)];
        let one = [ScoredBox { bbox: gt[0], score: 0.9 }];
        let m = greedy_match(&one, &gt, 0.5);
        assert_eq!(m.pairs, vec![(0, 0, 1.0)]);

        let two = [
            ScoredBox { bbox: gt[0], score: 0.3 },
            ScoredBox { bbox: gt[0], score: 0.9 },
        ];
        let m = greedy_match(&two, &gt, 0.5);
        assert_eq!(m.pairs, vec![(1, 0, 1.0)]);
        assert_eq!(m.unmatched_detections, vec![0]);
        assert!(m.unmatched_annotations.is_empty());
    }

    #[test]
    fn match_threshold_is_inclusive() {
        let gt = [b(0., 0., 2., 2.)];
        let det = [ScoredBox { bbox: b(1., 1., 3., 3.), score: 1.0 }];
        let v = iou(&det[0].bbox, &gt[0]);
        assert_eq!(greedy_match(&det, &gt, v).pairs.len(), 1);
        assert_eq!(greedy_match(&det, &gt, v + 1e-9).pairs.len(), 0);
    }
}
