//! Detection metrics: precision/recall at fixed score thresholds, 101-point
//! interpolated AP, Fixed AP with a dataset-wide per-class cap and class-group
//! means, and pseudo-label accuracy audits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpl::{LabelSource, PseudoLabel, PseudoLabelSet};
use crate::dataset::{Annotation, BBox, ClassGroup, DatasetBundle, DetectionRecord, HiddenAnnotations};
use crate::geometry::{greedy_match, rank_desc, ScoredBox};
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("pseudo-label audit needs hidden ground truth")]
    NoHiddenGroundTruth,
    #[error("annotation {0} references a category missing from the class table")]
    UnknownCategory(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalGroundTruth {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
}

/// Detections from records: label is the foreground argmax, score its probability.
pub fn detections_from_records(records: &[DetectionRecord]) -> Vec<EvalDetection> {
    records
        .iter()
        .map(|r| EvalDetection {
            image_id: r.image_id,
            class: r.label(),
            bbox: r.bbox,
            score: r.score(),
        })
        .collect()
}

pub fn ground_truth_from(
    annotations: &[Annotation],
    classes: &DatasetBundle,
) -> Result<Vec<EvalGroundTruth>, EvalError> {
    annotations
        .iter()
        .map(|a| {
            Ok(EvalGroundTruth {
                image_id: a.image_id,
                class: classes
                    .class_index(a.category_id)
                    .ok_or(EvalError::UnknownCategory(a.category_id))?,
                bbox: a.bbox,
            })
        })
        .collect()
}

/// IoU thresholds to average AP over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouProfile {
    /// Single threshold 0.5.
    #[default]
    Iou50,
    /// 0.50:0.05:0.95.
    Coco,
}

impl IouProfile {
    pub fn thresholds(&self) -> Vec<f64> {
        match self {
            IouProfile::Iou50 => vec![0.5],
            IouProfile::Coco => (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }
}

type CellKey = (u64, usize);

fn cells<'a>(
    dets: impl Iterator<Item = (usize, &'a EvalDetection)>,
    gts: &'a [EvalGroundTruth],
) -> BTreeMap<CellKey, (Vec<usize>, Vec<usize>)> {
    let mut out: BTreeMap<CellKey, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets {
        out.entry((d.image_id, d.class)).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        out.entry((g.image_id, g.class)).or_default().1.push(i);
    }
    out
}

/// True-positive flag per detection index, from per-(image, class) greedy matching.
fn tp_flags(dets: &[EvalDetection], keep: &[usize], gts: &[EvalGroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut tp = vec![false; dets.len()];
    for (_, (d_idx, g_idx)) in cells(keep.iter().map(|&i| (i, &dets[i])), gts) {
        if d_idx.is_empty() || g_idx.is_empty() {
            continue;
        }
        let sd: Vec<ScoredBox> = d_idx
            .iter()
            .map(|&i| ScoredBox {
                bbox: dets[i].bbox,
                score: dets[i].score,
            })
            .collect();
        let gb: Vec<BBox> = g_idx.iter().map(|&i| gts[i].bbox).collect();
        for (d, _, _) in greedy_match(&sd, &gb, iou_threshold).pairs {
            tp[d_idx[d]] = true;
        }
    }
    tp
}

/// Precision and recall of detections scoring `>= score_threshold`.
/// Precision is 1 with no detections; recall is 1 with no annotations.
pub fn pr_at_threshold(
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    score_threshold: f64,
    iou_threshold: f64,
) -> (f64, f64) {
    let keep: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= score_threshold)
        .collect();
    let tp_flags = tp_flags(dets, &keep, gts, iou_threshold);
    let tp = keep.iter().filter(|&&i| tp_flags[i]).count() as f64;
    let precision = if keep.is_empty() { 1.0 } else { tp / keep.len() as f64 };
    let recall = if gts.is_empty() { 1.0 } else { tp / gts.len() as f64 };
    (precision, recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn pr_curve(
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    taus: &[f64],
    iou_threshold: f64,
) -> Vec<PrPoint> {
    par::map(taus, |&tau| {
        let (precision, recall) = pr_at_threshold(dets, gts, tau, iou_threshold);
        PrPoint {
            tau,
            precision,
            recall,
        }
    })
}

/// The default fixed-threshold grid `{0.5, 0.6, 0.7, 0.8, 0.9}`.
pub fn default_tau_grid() -> Vec<f64> {
    (5..=9).map(|i| i as f64 / 10.0).collect()
}

/// Interpolated precision at 101 evenly spaced recall levels, averaged.
/// `tp` is in rank order.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut ctp = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            ctp += 1;
        }
        precision.push(ctp as f64 / (i + 1) as f64);
        recall.push(ctp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP of single-class detections against single-class ground truth,
/// averaged over `iou_thresholds`. `None` when there is no ground truth.
pub fn average_precision(
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    iou_thresholds: &[f64],
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    if dets.is_empty() {
        return Some(0.0);
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = rank_desc(&scores);
    let all: Vec<usize> = (0..dets.len()).collect();
    let total: f64 = iou_thresholds
        .iter()
        .map(|&t| {
            let flags = tp_flags(dets, &all, gts, t);
            let ranked: Vec<bool> = order.iter().map(|&i| flags[i]).collect();
            interpolated_ap(&ranked, gts.len())
        })
        .sum();
    Some(total / iou_thresholds.len() as f64)
}

/// Fixed AP breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedApResult {
    /// AP per class; `None` for classes without annotations.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with at least one annotation.
    pub overall: f64,
    pub per_group: BTreeMap<ClassGroup, f64>,
    /// Classes without annotations, excluded from every mean.
    pub excluded_classes: Vec<usize>,
}

/// Fixed AP: per class, the top `cap_per_class` detections across the whole
/// dataset are kept (no per-image limit) and scored with
/// [`average_precision`]. `groups[c]` is the group of class `c`.
pub fn fixed_ap(
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    groups: &[Option<ClassGroup>],
    cap_per_class: usize,
    iou_thresholds: &[f64],
) -> FixedApResult {
    let num_classes = groups.len();
    let mut det_by_class: Vec<Vec<EvalDetection>> = vec![Vec::new(); num_classes];
    for d in dets {
        if d.class < num_classes {
            det_by_class[d.class].push(*d);
        }
    }
    let mut gt_by_class: Vec<Vec<EvalGroundTruth>> = vec![Vec::new(); num_classes];
    for g in gts {
        if g.class < num_classes {
            gt_by_class[g.class].push(*g);
        }
    }
    let per_class: Vec<Option<f64>> = par::map_range(num_classes, |c| {
        let ds = &det_by_class[c];
        let scores: Vec<f64> = ds.iter().map(|d| d.score).collect();
        let mut top = rank_desc(&scores);
        top.truncate(cap_per_class);
        top.sort_unstable();
        let capped: Vec<EvalDetection> = top.into_iter().map(|i| ds[i]).collect();
        average_precision(&capped, &gt_by_class[c], iou_thresholds)
    });

    let excluded_classes: Vec<usize> = (0..num_classes).filter(|&c| per_class[c].is_none()).collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    let overall = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    let mut sums: BTreeMap<ClassGroup, (f64, usize)> = BTreeMap::new();
    for (c, ap) in per_class.iter().enumerate() {
        if let (Some(ap), Some(g)) = (ap, groups[c]) {
            let e = sums.entry(g).or_default();
            e.0 += ap;
            e.1 += 1;
        }
    }
    FixedApResult {
        per_class,
        overall,
        per_group: sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect(),
        excluded_classes,
    }
}

/// Fraction of pseudo-labels whose class equals that of the annotation they
/// are greedily matched to (class-agnostic matching per image, ranked by
/// score). `None` when there are no labels.
pub fn label_accuracy(labels: &[PseudoLabel], gts: &[EvalGroundTruth], iou_threshold: f64) -> Option<f64> {
    if labels.is_empty() {
        return None;
    }
    let mut by_image: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_image.entry(l.image_id).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().1.push(i);
    }
    let mut correct = 0usize;
    for (l_idx, g_idx) in by_image.values() {
        if l_idx.is_empty() || g_idx.is_empty() {
            continue;
        }
        let sd: Vec<ScoredBox> = l_idx
            .iter()
            .map(|&i| ScoredBox {
                bbox: labels[i].bbox,
                score: labels[i].score,
            })
            .collect();
        let gb: Vec<BBox> = g_idx.iter().map(|&i| gts[i].bbox).collect();
        for (d, a, _) in greedy_match(&sd, &gb, iou_threshold).pairs {
            if labels[l_idx[d]].class == gts[g_idx[a]].class {
                correct += 1;
            }
        }
    }
    Some(correct as f64 / labels.len() as f64)
}

/// Accuracy of each pseudo-label source against the hidden ground truth of
/// an unlabeled split. Sources with no labels are omitted.
pub fn pseudo_accuracy(
    sources: &BTreeMap<LabelSource, Vec<PseudoLabel>>,
    hidden: Option<&HiddenAnnotations>,
    classes: &DatasetBundle,
    iou_threshold: f64,
) -> Result<BTreeMap<LabelSource, f64>, EvalError> {
    let hidden = hidden.ok_or(EvalError::NoHiddenGroundTruth)?;
    let gts = ground_truth_from(hidden.audit(), classes)?;
    Ok(sources
        .iter()
        .filter_map(|(s, labels)| label_accuracy(labels, &gts, iou_threshold).map(|a| (*s, a)))
        .collect())
}

/// Everything one evaluation run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub ap_overall: f64,
    pub ap_per_group: BTreeMap<ClassGroup, f64>,
    pub ap_per_class: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub pr_curve: Vec<PrPoint>,
    pub pseudo_accuracy: BTreeMap<String, f64>,
    /// `[class][stage]` retained pseudo-label counts.
    pub retained_counts: Vec<Vec<usize>>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub iou_profile: IouProfile,
    pub cap_per_class: usize,
    pub tau_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            iou_profile: IouProfile::Iou50,
            cap_per_class: 10_000,
            tau_grid: default_tau_grid(),
        }
    }
}

/// Builds a report for detections against a labeled bundle whose categories
/// carry groups.
pub fn evaluate(
    dets: &[EvalDetection],
    bundle: &DatasetBundle,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let gts = ground_truth_from(&bundle.annotations, bundle)?;
    let groups: Vec<Option<ClassGroup>> = bundle.categories.iter().map(|c| c.group).collect();
    let fixed = fixed_ap(
        dets,
        &gts,
        &groups,
        config.cap_per_class,
        &config.iou_profile.thresholds(),
    );
    Ok(EvalReport {
        config: config.clone(),
        ap_overall: fixed.overall,
        ap_per_group: fixed.per_group,
        ap_per_class: fixed.per_class,
        excluded_classes: fixed.excluded_classes,
        pr_curve: pr_curve(dets, &gts, &config.tau_grid, config.iou_threshold),
        pseudo_accuracy: BTreeMap::new(),
        retained_counts: Vec::new(),
        notes: vec![
            "federated negative-category metadata is not used in matching".to_string(),
        ],
    })
}

impl EvalReport {
    pub fn with_pseudo_accuracy(mut self, acc: &BTreeMap<LabelSource, f64>) -> Self {
        self.pseudo_accuracy = acc.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        self
    }

    pub fn with_retained(mut self, set: &PseudoLabelSet, num_classes: usize) -> Self {
        self.retained_counts = set.retained_counts(num_classes);
        self
    }

    /// Flat `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "ap_overall,{}", self.ap_overall);
        for (g, v) in &self.ap_per_group {
            let _ = writeln!(s, "ap_{g},{v}");
        }
        for (c, v) in self.ap_per_class.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(s, "ap_class_{c},{v}");
            }
        }
        for (k, v) in &self.pseudo_accuracy {
            let _ = writeln!(s, "pseudo_accuracy_{k},{v}");
        }
        for (c, row) in self.retained_counts.iter().enumerate() {
            for (k, n) in row.iter().enumerate() {
                let _ = writeln!(s, "retained_class_{c}_stage_{},{n}", k + 1);
            }
        }
        s
    }

    /// Plot-ready `tau,precision,recall` CSV.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("tau,precision,recall\n");
        for p in &self.pr_curve {
            let _ = writeln!(s, "{},{},{}", p.tau, p.precision, p.recall);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(image_id: u64, bbox: BBox, score: f64) -> EvalDetection {
        EvalDetection {
            image_id,
            class: 0,
            bbox,
            score,
        }
    }

    fn gt(image_id: u64, bbox: BBox) -> EvalGroundTruth {
        EvalGroundTruth {
            image_id,
            class: 0,
            bbox,
        }
    }

    #[test]
    fn pr_examples() {
        let g = [gt(1, b(0., 0., 10., 10.))];
        assert_eq!(pr_at_threshold(&[det(1, b(0., 0., 10., 10.), 0.9)], &g, 0.5, 0.5), (1.0, 1.0));
        assert_eq!(pr_at_threshold(&[], &g, 0.5, 0.5), (1.0, 0.0));
        let g2 = [gt(1, b(0., 0., 10., 10.)), gt(1, b(50., 50., 60., 60.))];
        let d2 = [det(1, b(0., 0., 10., 10.), 0.9), det(1, b(80., 80., 90., 90.), 0.8)];
        assert_eq!(pr_at_threshold(&d2, &g2, 0.5, 0.5), (0.5, 0.5));
        // below the score threshold
        assert_eq!(pr_at_threshold(&d2, &g2, 0.95, 0.5), (1.0, 0.0));
    }

    #[test]
    fn ap_examples() {
        let g = [gt(1, b(0., 0., 10., 10.))];
        assert_eq!(average_precision(&[det(1, b(0., 0., 10., 10.), 0.9)], &g, &[0.5]), Some(1.0));
        assert_eq!(average_precision(&[], &g, &[0.5]), Some(0.0));
        assert_eq!(average_precision(&[], &[], &[0.5]), None);
    }

    #[test]
    fn ap_fp_ranked_first() {
        // FP at rank 1, TP at rank 2: interpolated precision 0.5 at every recall level
        let g = [gt(1, b(0., 0., 10., 10.))];
        let d = [det(1, b(50., 50., 60., 60.), 0.9), det(1, b(0., 0., 10., 10.), 0.8)];
        assert!((average_precision(&d, &g, &[0.5]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn coco_profile_thresholds() {
        let t = IouProfile::Coco.thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn fixed_ap_has_no_per_image_limit() {
        // 500 detections of one class in one image, all TPs on distinct GTs
        let gts: Vec<_> = (0..500)
            .map(|i| gt(1, b(i as f64 * 20.0, 0., i as f64 * 20.0 + 10.0, 10.)))
            .collect();
        let dets: Vec<_> = gts.iter().enumerate().map(|(i, g)| det(1, g.bbox, 1.0 - i as f64 * 1e-4)).collect();
        let r = fixed_ap(&dets, &gts, &[Some(ClassGroup::Frequent)], 10_000, &[0.5]);
        assert_eq!(r.per_class[0], Some(1.0));
    }

    #[test]
    fn fixed_ap_cap_keeps_top_scores() {
        let gts = [gt(1, b(0., 0., 10., 10.)), gt(2, b(0., 0., 10., 10.))];
        let dets = [det(1, b(0., 0., 10., 10.), 0.9), det(2, b(0., 0., 10., 10.), 0.8)];
        let capped = fixed_ap(&dets, &gts, &[None], 1, &[0.5]);
        let manual = average_precision(&dets[..1], &gts, &[0.5]);
        assert_eq!(capped.per_class[0], manual);
        // one of two GTs found with precision 1: 51 of 101 recall levels
        assert!((manual.unwrap() - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_ap_excludes_empty_classes_and_groups() {
        let gts = [gt(1, b(0., 0., 10., 10.))];
        let dets = [det(1, b(0., 0., 10., 10.), 0.9)];
        let r = fixed_ap(&dets, &gts, &[Some(ClassGroup::Rare), Some(ClassGroup::Common)], 100, &[0.5]);
        assert_eq!(r.excluded_classes, vec![1]);
        assert_eq!(r.overall, 1.0);
        assert_eq!(r.per_group.get(&ClassGroup::Rare), Some(&1.0));
        assert!(!r.per_group.contains_key(&ClassGroup::Common));
    }

    fn pl(image_id: u64, class: usize, bbox: BBox) -> PseudoLabel {
        PseudoLabel {
            image_id,
            class,
            bbox,
            score: 0.9,
        }
    }

    #[test]
    fn label_accuracy_examples() {
        let g = [
            EvalGroundTruth { image_id: 1, class: 0, bbox: b(0., 0., 10., 10.) },
            EvalGroundTruth { image_id: 1, class: 1, bbox: b(50., 50., 60., 60.) },
        ];
        let all_right = [pl(1, 0, g[0].bbox), pl(1, 1, g[1].bbox)];
        assert_eq!(label_accuracy(&all_right, &g, 0.5), Some(1.0));
        let half = [pl(1, 0, g[0].bbox), pl(1, 0, g[1].bbox)];
        assert_eq!(label_accuracy(&half, &g, 0.5), Some(0.5));
        assert_eq!(label_accuracy(&[], &g, 0.5), None);
    }

    #[test]
    fn audit_without_hidden_ground_truth_fails() {
        let sources = BTreeMap::new();
        let bundle = DatasetBundle::default();
        assert_eq!(
            pseudo_accuracy(&sources, None, &bundle, 0.5),
            Err(EvalError::NoHiddenGroundTruth)
        );
    }
}
