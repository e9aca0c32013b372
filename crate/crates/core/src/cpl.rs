//! Cascade pseudo-labeling.
//!
//! The K stage predictions of one proposal are averaged into a teacher target
//! (probability vector and box). The target's max foreground confidence is
//! then compared against the per-class threshold of every stage; stage `k`
//! trains on the target only when `confidence >= tau_k[label]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apm::ClassStatsStore;
use crate::dataset::{argmax, BBox, DetectionRecord, ResultEntry, ScoreSemantics};
use crate::geometry::nms_indices;

#[derive(Debug, Error, PartialEq)]
pub enum CplError {
    #[error("expected {expected} stage records, got {got}")]
    StageCount { expected: usize, got: usize },
    #[error("stage records do not cover stages 1..={0} exactly once")]
    StageCoverage(usize),
    #[error("stage records disagree on {0}")]
    Misaligned(&'static str),
    #[error("no category id for class index {0}")]
    UnknownClass(usize),
}

/// Ensemble prediction for one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTarget {
    pub image_id: u64,
    pub proposal_id: u64,
    /// Mean of the stage probability vectors (foreground entries then background).
    pub probs: Vec<f64>,
    /// Coordinate-wise mean of the stage boxes.
    pub bbox: BBox,
    /// Max foreground entry of `probs`.
    pub confidence: f64,
    /// Foreground argmax, lowest index on ties.
    pub label: usize,
    /// Background outscores every foreground class.
    pub background: bool,
}

impl TeacherTarget {
    pub fn from_probs(image_id: u64, proposal_id: u64, probs: Vec<f64>, bbox: BBox) -> Self {
        let c = probs.len().saturating_sub(1);
        let label = argmax(&probs[..c]);
        let confidence = probs[label];
        let background = probs[c] > confidence;
        TeacherTarget {
            image_id,
            proposal_id,
            probs,
            bbox,
            confidence,
            label,
            background,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len() - 1
    }
}

/// Averages the K aligned stage records of one proposal.
///
/// Records may arrive in any order; they are reduced in stage order so the
/// result does not depend on input order.
pub fn ensemble(stage_records: &[&DetectionRecord], stages: usize) -> Result<TeacherTarget, CplError> {
    if stage_records.len() != stages {
        return Err(CplError::StageCount {
            expected: stages,
            got: stage_records.len(),
        });
    }
    let mut ordered: Vec<&DetectionRecord> = stage_records.to_vec();
    ordered.sort_by_key(|r| r.stage);
    if ordered.iter().enumerate().any(|(i, r)| r.stage != i + 1) {
        return Err(CplError::StageCoverage(stages));
    }
    let first = ordered[0];
    for r in &ordered[1..] {
        if r.image_id != first.image_id {
            return Err(CplError::Misaligned("image id"));
        }
        if r.proposal_id != first.proposal_id {
            return Err(CplError::Misaligned("proposal id"));
        }
        if r.class_probs.len() != first.class_probs.len() {
            return Err(CplError::Misaligned("class count"));
        }
        if r.semantics != first.semantics {
            return Err(CplError::Misaligned("score semantics"));
        }
    }
    let n = stages as f64;
    let mut probs = vec![0.0; first.class_probs.len()];
    for r in &ordered {
        for (p, q) in probs.iter_mut().zip(&r.class_probs) {
            *p += q;
        }
    }
    for p in &mut probs {
        *p /= n;
    }
    let bbox = BBox::mean(ordered.iter().map(|r| &r.bbox)).expect("at least one stage");
    Ok(TeacherTarget::from_probs(
        first.image_id,
        first.proposal_id,
        probs,
        bbox,
    ))
}

/// Frozen `[class][stage]` thresholds read by [`gate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    table: Vec<Vec<f64>>,
    stages: usize,
}

impl ThresholdTable {
    pub fn from_store(store: &ClassStatsStore) -> Self {
        ThresholdTable {
            table: store.threshold_table(),
            stages: store.stages(),
        }
    }

    /// The same per-stage thresholds for every class.
    pub fn fixed(num_classes: usize, per_stage: &[f64]) -> Self {
        ThresholdTable {
            table: vec![per_stage.to_vec(); num_classes],
            stages: per_stage.len(),
        }
    }

    pub fn from_rows(table: Vec<Vec<f64>>) -> Self {
        let stages = table.first().map_or(0, Vec::len);
        ThresholdTable { table, stages }
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    /// Threshold of `class` at 1-based `stage`; unknown classes never pass.
    pub fn get(&self, class: usize, stage: usize) -> f64 {
        self.table
            .get(class)
            .and_then(|row| row.get(stage.wrapping_sub(1)))
            .copied()
            .unwrap_or(f64::INFINITY)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.table
    }

    /// True when every class's thresholds are non-decreasing over stages.
    pub fn is_monotone(&self) -> bool {
        self.table
            .iter()
            .all(|row| row.windows(2).all(|w| w[0] <= w[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedTarget {
    pub target: TeacherTarget,
    /// `passes[k - 1]` for stage `k`.
    pub passes: Vec<bool>,
}

/// Gated teacher targets for one batch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub stages: usize,
    pub entries: Vec<GatedTarget>,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Targets retained at 1-based `stage`.
    pub fn retained(&self, stage: usize) -> impl Iterator<Item = &TeacherTarget> {
        self.entries
            .iter()
            .filter(move |e| e.passes.get(stage.wrapping_sub(1)).copied().unwrap_or(false))
            .map(|e| &e.target)
    }

    /// Number of retained targets per stage.
    pub fn sizes(&self) -> Vec<usize> {
        (1..=self.stages).map(|k| self.retained(k).count()).collect()
    }

    /// True when every target retained at stage `k + 1` is also retained at `k`.
    pub fn is_nested(&self) -> bool {
        self.nesting_violations() == 0
    }

    pub fn nesting_violations(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.passes.windows(2).filter(|w| w[1] && !w[0]).count())
            .sum()
    }

    /// Retained counts as `[class][stage]`.
    pub fn retained_counts(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.stages]; num_classes];
        for e in &self.entries {
            for (k, &p) in e.passes.iter().enumerate() {
                if p && e.target.label < num_classes {
                    counts[e.target.label][k] += 1;
                }
            }
        }
        counts
    }

    /// Pseudo-labels retained at 1-based `stage`.
    pub fn pseudo_labels(&self, stage: usize) -> Vec<PseudoLabel> {
        self.retained(stage).map(PseudoLabel::from_target).collect()
    }

    /// COCO-results rows with a per-stage retention mask and the teacher
    /// confidence. Background targets are omitted.
    pub fn to_result_entries(&self, class_ids: &[u64]) -> Result<Vec<PseudoLabelEntry>, CplError> {
        self.entries
            .iter()
            .filter(|e| !e.target.background)
            .map(|e| {
                let t = &e.target;
                Ok(PseudoLabelEntry {
                    result: ResultEntry {
                        image_id: t.image_id,
                        category_id: *class_ids
                            .get(t.label)
                            .ok_or(CplError::UnknownClass(t.label))?,
                        bbox: t.bbox.to_xywh(),
                        score: t.confidence,
                        stage: e.passes.iter().filter(|&&p| p).count().max(1),
                        proposal_id: Some(t.proposal_id),
                        class_probs: None,
                        semantics: ScoreSemantics::Softmax,
                    },
                    q_t: t.confidence,
                    stage_mask: e.passes.clone(),
                })
            })
            .collect()
    }
}

/// Serialized pseudo-label: a results row plus `q_t` and `stage_mask`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelEntry {
    #[serde(flatten)]
    pub result: ResultEntry,
    pub q_t: f64,
    pub stage_mask: Vec<bool>,
}

/// A single (class, box) pseudo-label on an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

impl PseudoLabel {
    pub fn from_target(t: &TeacherTarget) -> Self {
        PseudoLabel {
            image_id: t.image_id,
            class: t.label,
            bbox: t.bbox,
            score: t.confidence,
        }
    }
}

/// Applies the per-stage gate `confidence >= tau_k[label]`. Background targets
/// fail every stage.
pub fn gate(targets: Vec<TeacherTarget>, thresholds: &ThresholdTable) -> PseudoLabelSet {
    let stages = thresholds.stages();
    let entries = targets
        .into_iter()
        .map(|t| {
            let passes = (1..=stages)
                .map(|k| !t.background && t.confidence >= thresholds.get(t.label, k))
                .collect();
            GatedTarget { target: t, passes }
        })
        .collect();
    PseudoLabelSet { stages, entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub stages: usize,
    /// IoU threshold for per-image NMS over teacher targets before gating.
    pub nms_iou: Option<f64>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            stages: 3,
            nms_iou: Some(0.5),
        }
    }
}

/// Groups stage records by `(image_id, proposal_id)`, in key order.
pub fn group_proposals(records: &[DetectionRecord]) -> BTreeMap<(u64, u64), Vec<&DetectionRecord>> {
    let mut groups: BTreeMap<(u64, u64), Vec<&DetectionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.image_id, r.proposal_id)).or_default().push(r);
    }
    groups
}

/// Ensembles every proposal of a batch, in `(image_id, proposal_id)` order.
pub fn ensemble_batch(records: &[DetectionRecord], stages: usize) -> Result<Vec<TeacherTarget>, CplError> {
    group_proposals(records)
        .values()
        .map(|g| ensemble(g, stages))
        .collect()
}

/// Per-image NMS over teacher targets, ranked by confidence within each
/// predicted class. Background targets are kept untouched.
pub fn nms_targets(targets: Vec<TeacherTarget>, iou_threshold: f64) -> Vec<TeacherTarget> {
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, t) in targets.iter().enumerate() {
        if !t.background {
            by_image.entry(t.image_id).or_default().push(i);
        }
    }
    let mut keep = vec![false; targets.len()];
    for (i, t) in targets.iter().enumerate() {
        keep[i] = t.background;
    }
    for idxs in by_image.values() {
        let boxes: Vec<BBox> = idxs.iter().map(|&i| targets[i].bbox).collect();
        let scores: Vec<f64> = idxs.iter().map(|&i| targets[i].confidence).collect();
        let classes: Vec<usize> = idxs.iter().map(|&i| targets[i].label).collect();
        for k in nms_indices(&boxes, &scores, &classes, iou_threshold) {
            keep[idxs[k]] = true;
        }
    }
    targets
        .into_iter()
        .zip(keep)
        .filter_map(|(t, k)| k.then_some(t))
        .collect()
}

/// Ensemble, optional NMS, then gate, for one unlabeled batch.
pub fn unlabeled_batch(
    records: &[DetectionRecord],
    thresholds: &ThresholdTable,
    config: &BatchConfig,
) -> Result<PseudoLabelSet, CplError> {
    let mut targets = ensemble_batch(records, config.stages)?;
    if let Some(t) = config.nms_iou {
        targets = nms_targets(targets, t);
    }
    Ok(gate(targets, thresholds))
}

/// Who produced a pseudo-label: one cascade stage or the stage ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LabelSource {
    Stage(usize),
    Ensemble,
}

impl std::fmt::Display for LabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelSource::Stage(k) => write!(f, "stage{k}"),
            LabelSource::Ensemble => f.write_str("ensemble"),
        }
    }
}

/// Pseudo-labels each stage would emit on its own, next to the ensemble's,
/// for accuracy audits. A source emits a label for a proposal when its
/// prediction is foreground with confidence `>= min_confidence`.
pub fn labels_by_source(
    records: &[DetectionRecord],
    stages: usize,
    min_confidence: f64,
) -> Result<BTreeMap<LabelSource, Vec<PseudoLabel>>, CplError> {
    let mut out: BTreeMap<LabelSource, Vec<PseudoLabel>> = BTreeMap::new();
    for k in 1..=stages {
        out.insert(LabelSource::Stage(k), Vec::new());
    }
    out.insert(LabelSource::Ensemble, Vec::new());
    for group in group_proposals(records).values() {
        let target = ensemble(group, stages)?;
        for r in group {
            let t = TeacherTarget::from_probs(r.image_id, r.proposal_id, r.class_probs.clone(), r.bbox);
            if !t.background && t.confidence >= min_confidence {
                out.get_mut(&LabelSource::Stage(r.stage))
                    .expect("stage key")
                    .push(PseudoLabel::from_target(&t));
            }
        }
        if !target.background && target.confidence >= min_confidence {
            out.get_mut(&LabelSource::Ensemble)
                .expect("ensemble key")
                .push(PseudoLabel::from_target(&target));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: usize, probs: Vec<f64>, bbox: BBox) -> DetectionRecord {
        DetectionRecord {
            image_id: 1,
            proposal_id: 9,
            stage,
            class_probs: probs,
            bbox,
            semantics: ScoreSemantics::Softmax,
        }
    }

    fn unit() -> BBox {
        BBox::new(0.0, 0.0, 2.0, 2.0).unwrap()
    }

    #[test]
    fn ensemble_means() {
        // two classes: [class0, background]
        let a = rec(1, vec![0.7, 0.3], unit());
        let b = rec(2, vec![0.5, 0.5], BBox::new(0.0, 0.0, 4.0, 4.0).unwrap());
        let t = ensemble(&[&a, &b], 2).unwrap();
        assert!((t.probs[0] - 0.6).abs() < 1e-15);
        assert!((t.probs[1] - 0.4).abs() < 1e-15);
        assert!((t.confidence - 0.6).abs() < 1e-15);
        assert_eq!(t.label, 0);
        assert!(!t.background);
        assert_eq!(t.bbox, BBox::new(0.0, 0.0, 3.0, 3.0).unwrap());
    }

    #[test]
    fn ensemble_is_order_independent() {
        let a = rec(1, vec![0.1, 0.6, 0.3], unit());
        let b = rec(2, vec![0.3, 0.3, 0.4], unit());
        let c = rec(3, vec![0.7, 0.2, 0.1], unit());
        let x = ensemble(&[&a, &b, &c], 3).unwrap();
        let y = ensemble(&[&c, &a, &b], 3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn ensemble_alignment_errors() {
        let a = rec(1, vec![0.7, 0.3], unit());
        let b = rec(2, vec![0.5, 0.5], unit());
        assert_eq!(
            ensemble(&[&a], 2),
            Err(CplError::StageCount { expected: 2, got: 1 })
        );
        let dup = rec(1, vec![0.5, 0.5], unit());
        assert_eq!(ensemble(&[&a, &dup], 2), Err(CplError::StageCoverage(2)));
        let other_image = DetectionRecord { image_id: 2, ..b.clone() };
        assert_eq!(
            ensemble(&[&a, &other_image], 2),
            Err(CplError::Misaligned("image id"))
        );
        let other_prop = DetectionRecord { proposal_id: 3, ..b };
        assert_eq!(
            ensemble(&[&a, &other_prop], 2),
            Err(CplError::Misaligned("proposal id"))
        );
    }

    #[test]
    fn argmax_tie_goes_to_lowest_class() {
        let t = TeacherTarget::from_probs(0, 0, vec![0.4, 0.4, 0.2], unit());
        assert_eq!(t.label, 0);
    }

    fn target_with_confidence(q: f64) -> TeacherTarget {
        TeacherTarget::from_probs(0, 0, vec![q, 0.0, 1.0 - q], unit())
    }

    #[test]
    fn gate_compares_per_stage() {
        let table = ThresholdTable::fixed(2, &[0.5, 0.6, 0.7]);
        let set = gate(vec![target_with_confidence(0.65)], &table);
        assert_eq!(set.entries[0].passes, vec![true, true, false]);
    }

    #[test]
    fn gate_is_inclusive() {
        let table = ThresholdTable::fixed(2, &[0.5, 0.6, 0.7]);
        let set = gate(vec![target_with_confidence(0.6)], &table);
        assert_eq!(set.entries[0].passes, vec![true, true, false]);
    }

    #[test]
    fn background_targets_never_pass() {
        let table = ThresholdTable::fixed(2, &[0.0, 0.0, 0.0]);
        let t = TeacherTarget::from_probs(0, 0, vec![0.2, 0.1, 0.7], unit());
        assert!(t.background);
        let set = gate(vec![t], &table);
        assert_eq!(set.entries[0].passes, vec![false, false, false]);
    }

    #[test]
    fn empty_and_single_batches() {
        let table = ThresholdTable::fixed(1, &[0.5, 0.6, 0.7]);
        let cfg = BatchConfig::default();
        let set = unlabeled_batch(&[], &table, &cfg).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.sizes(), vec![0, 0, 0]);

        let recs: Vec<_> = (1..=3).map(|k| rec(k, vec![0.55, 0.45], unit())).collect();
        let set = unlabeled_batch(&recs, &table, &cfg).unwrap();
        assert_eq!(set.sizes(), vec![1, 0, 0]);
    }

    #[test]
    fn serialized_entries_carry_mask_and_confidence() {
        let table = ThresholdTable::fixed(2, &[0.5, 0.6, 0.7]);
        let set = gate(vec![target_with_confidence(0.65)], &table);
        let rows = set.to_result_entries(&[11, 12]).unwrap();
        let v = serde_json::to_value(&rows).unwrap();
        assert_eq!(v[0]["stage_mask"], serde_json::json!([true, true, false]));
        assert_eq!(v[0]["q_t"], serde_json::json!(0.65));
        assert_eq!(v[0]["category_id"], serde_json::json!(11));
    }

    #[test]
    fn nms_on_targets_drops_duplicates() {
        let a = TeacherTarget::from_probs(1, 0, vec![0.9, 0.0, 0.1], unit());
        let b = TeacherTarget::from_probs(1, 1, vec![0.8, 0.0, 0.2], unit());
        let c = TeacherTarget::from_probs(2, 0, vec![0.8, 0.0, 0.2], unit());
        let kept = nms_targets(vec![a.clone(), b, c.clone()], 0.5);
        assert_eq!(kept, vec![a, c]);
    }
}
