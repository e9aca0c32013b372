//! Adaptive pseudo-label mining.
//!
//! Each foreground class owns a bounded FIFO of confidence values gathered
//! on labeled proposals. From the queue's mean `mu_c` and population standard
//! deviation `sigma_c` the stage-`k` threshold is
//! `clamp(mu_c + sigma_c * eps_k, 0, 1)`. Classes with fewer than
//! `min_samples` entries fall back to a fixed per-stage default.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpl::TeacherTarget;
use crate::dataset::DatasetBundle;
use crate::geometry::{greedy_match, ScoredBox};

#[derive(Debug, Error, PartialEq)]
pub enum ApmError {
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("stage {stage} outside 1..={stages}")]
    InvalidStage { stage: usize, stages: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Which value a matched labeled proposal contributes to its class queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Probability assigned to the ground-truth class.
    #[default]
    GroundTruthClass,
    /// Maximum foreground probability of the proposal.
    MaxProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApmConfig {
    pub capacity: usize,
    pub min_samples: usize,
    pub epsilons: Vec<f64>,
    pub fallback_thresholds: Vec<f64>,
    pub source: ConfidenceSource,
}

impl Default for ApmConfig {
    fn default() -> Self {
        ApmConfig {
            capacity: 256,
            min_samples: 8,
            epsilons: vec![1.0, 1.5, 2.0],
            fallback_thresholds: vec![0.5, 0.6, 0.7],
            source: ConfidenceSource::GroundTruthClass,
        }
    }
}

impl ApmConfig {
    pub fn stages(&self) -> usize {
        self.epsilons.len()
    }

    pub fn validate(&self) -> Result<(), ApmError> {
        if self.capacity == 0 {
            return Err(ApmError::Config("capacity must be positive".into()));
        }
        if self.epsilons.is_empty() {
            return Err(ApmError::Config("need at least one stage".into()));
        }
        if self.epsilons.len() != self.fallback_thresholds.len() {
            return Err(ApmError::Config(format!(
                "{} epsilons but {} fallback thresholds",
                self.epsilons.len(),
                self.fallback_thresholds.len()
            )));
        }
        if self.epsilons.iter().any(|e| !e.is_finite()) {
            return Err(ApmError::Config("epsilons must be finite".into()));
        }
        if self
            .fallback_thresholds
            .iter()
            .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(ApmError::Config("fallback thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatsStore {
    config: ApmConfig,
    queues: Vec<VecDeque<f64>>,
    stats: Vec<(f64, f64)>,
}

fn mean_std(q: &VecDeque<f64>) -> (f64, f64) {
    if q.is_empty() {
        return (0.0, 0.0);
    }
    let n = q.len() as f64;
    let mean = q.iter().sum::<f64>() / n;
    let var = q.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ClassStatsStore {
    pub fn new(num_classes: usize, config: ApmConfig) -> Result<Self, ApmError> {
        config.validate()?;
        Ok(ClassStatsStore {
            queues: vec![VecDeque::with_capacity(config.capacity); num_classes],
            stats: vec![(0.0, 0.0); num_classes],
            config,
        })
    }

    pub fn config(&self) -> &ApmConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn stages(&self) -> usize {
        self.config.stages()
    }

    fn check_class(&self, class: usize) -> Result<(), ApmError> {
        if class < self.queues.len() {
            Ok(())
        } else {
            Err(ApmError::UnknownClass(class))
        }
    }

    /// Appends a confidence to a class queue, evicting the oldest entry when
    /// full, and refreshes that class's statistics.
    pub fn record_confidence(&mut self, class: usize, confidence: f64) -> Result<(), ApmError> {
        self.check_class(class)?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(ApmError::InvalidConfidence(confidence));
        }
        let q = &mut self.queues[class];
        if q.len() == self.config.capacity {
            q.pop_front();
        }
        q.push_back(confidence);
        self.stats[class] = mean_std(q);
        Ok(())
    }

    pub fn queue(&self, class: usize) -> Result<&VecDeque<f64>, ApmError> {
        self.check_class(class)?;
        Ok(&self.queues[class])
    }

    /// `(mean, population std)` of a class queue; `(0, 0)` when empty.
    pub fn stats(&self, class: usize) -> Result<(f64, f64), ApmError> {
        self.check_class(class)?;
        Ok(self.stats[class])
    }

    /// Threshold for `class` at 1-based `stage`.
    pub fn threshold(&self, class: usize, stage: usize) -> Result<f64, ApmError> {
        self.check_class(class)?;
        let stages = self.stages();
        if stage == 0 || stage > stages {
            return Err(ApmError::InvalidStage { stage, stages });
        }
        if self.queues[class].len() < self.config.min_samples.max(1) {
            return Ok(self.config.fallback_thresholds[stage - 1]);
        }
        let (mu, sigma) = self.stats[class];
        Ok((mu + sigma * self.config.epsilons[stage - 1]).clamp(0.0, 1.0))
    }

    /// All stage thresholds of one class.
    pub fn thresholds(&self, class: usize) -> Result<Vec<f64>, ApmError> {
        (1..=self.stages())
            .map(|k| self.threshold(class, k))
            .collect()
    }

    /// Frozen `[class][stage]` threshold table.
    pub fn threshold_table(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes())
            .map(|c| self.thresholds(c).expect("class in range"))
            .collect()
    }

    /// Feeds the queues from teacher predictions on labeled images.
    ///
    /// Per image, predictions are matched class-agnostically to the ground
    /// truth with [`greedy_match`] (ranked by max foreground probability); each
    /// matched prediction records, for its annotation's class `c`, either the
    /// probability of `c` or its max probability depending on
    /// [`ApmConfig::source`]. Updates are applied in `(image_id, input index)`
    /// order. Returns the number of values recorded.
    pub fn populate_from_labeled(
        &mut self,
        targets: &[TeacherTarget],
        bundle: &DatasetBundle,
        iou_threshold: f64,
    ) -> Result<usize, ApmError> {
        let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, t) in targets.iter().enumerate() {
            by_image.entry(t.image_id).or_default().push(i);
        }
        let gt_by_image = bundle.annotations_by_image();
        let mut recorded = 0;
        for (image_id, idxs) in by_image {
            let Some(gts) = gt_by_image.get(&image_id) else {
                continue;
            };
            let dets: Vec<ScoredBox> = idxs
                .iter()
                .map(|&i| ScoredBox {
                    bbox: targets[i].bbox,
                    score: targets[i].confidence,
                })
                .collect();
            let gt_boxes: Vec<_> = gts.iter().map(|a| a.bbox).collect();
            let m = greedy_match(&dets, &gt_boxes, iou_threshold);
            let mut pairs = m.pairs.clone();
            pairs.sort_by_key(|p| p.0);
            for (d, a, _) in pairs {
                let class = bundle
                    .class_index(gts[a].category_id)
                    .ok_or(ApmError::UnknownClass(gts[a].category_id as usize))?;
                let t = &targets[idxs[d]];
                let value = match self.config.source {
                    ConfidenceSource::GroundTruthClass => t.probs[class],
                    ConfidenceSource::MaxProbability => t.confidence,
                };
                self.record_confidence(class, value.clamp(0.0, 1.0))?;
                recorded += 1;
            }
        }
        Ok(recorded)
    }

    pub fn snapshot(&self) -> ApmSnapshot {
        ApmSnapshot {
            config: self.config.clone(),
            classes: (0..self.num_classes())
                .map(|c| ClassSnapshot {
                    class: c,
                    queue: self.queues[c].iter().copied().collect(),
                    mean: self.stats[c].0,
                    std: self.stats[c].1,
                    thresholds: self.thresholds(c).expect("class in range"),
                })
                .collect(),
        }
    }

    /// Rebuilds a store from a snapshot by replaying its queues.
    pub fn from_snapshot(snapshot: &ApmSnapshot) -> Result<Self, ApmError> {
        let mut store = ClassStatsStore::new(snapshot.classes.len(), snapshot.config.clone())?;
        for (i, c) in snapshot.classes.iter().enumerate() {
            if c.class != i {
                return Err(ApmError::Config(format!("snapshot class {} out of order", c.class)));
            }
            for &v in &c.queue {
                store.record_confidence(i, v)?;
            }
        }
        Ok(store)
    }
}

/// Serializable view of a store: queues plus derived statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApmSnapshot {
    pub config: ApmConfig,
    pub classes: Vec<ClassSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSnapshot {
    pub class: usize,
    pub queue: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub thresholds: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, BBox, Category, ImageInfo, Split};

    /// Welford's algorithm, independent of the two-pass routine above.
    fn welford(xs: &[f64]) -> (f64, f64) {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for &x in xs {
            n += 1.0;
            let d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        (mean, (m2 / n).sqrt())
    }

    fn store(classes: usize) -> ClassStatsStore {
        ClassStatsStore::new(classes, ApmConfig::default()).unwrap()
    }

    #[test]
    fn single_element_stats() {
        let mut s = store(1);
        s.record_confidence(0, 0.4).unwrap();
        assert_eq!(s.stats(0).unwrap(), (0.4, 0.0));
    }

    #[test]
    fn three_element_stats_match_welford() {
        let mut s = store(1);
        for v in [0.2, 0.4, 0.6] {
            s.record_confidence(0, v).unwrap();
        }
        let (m, sd) = s.stats(0).unwrap();
        let (wm, wsd) = welford(&[0.2, 0.4, 0.6]);
        assert!((m - wm).abs() < 1e-15);
        assert!((sd - wsd).abs() < 1e-15);
        assert!((sd - 0.163_299_316_185_545_2).abs() < 1e-12);
    }

    #[test]
    fn fifo_eviction() {
        let mut s = ClassStatsStore::new(
            1,
            ApmConfig {
                capacity: 2,
                ..ApmConfig::default()
            },
        )
        .unwrap();
        for v in [0.1, 0.2, 0.3] {
            s.record_confidence(0, v).unwrap();
        }
        assert_eq!(s.queue(0).unwrap().iter().copied().collect::<Vec<_>>(), vec![0.2, 0.3]);
    }

    #[test]
    fn rejects_out_of_range_confidence_and_class() {
        let mut s = store(2);
        assert_eq!(s.record_confidence(0, 1.2), Err(ApmError::InvalidConfidence(1.2)));
        assert_eq!(s.record_confidence(0, -0.1), Err(ApmError::InvalidConfidence(-0.1)));
        assert_eq!(s.record_confidence(2, 0.5), Err(ApmError::UnknownClass(2)));
        assert!(s.threshold(5, 1).is_err());
        assert!(matches!(s.threshold(0, 4), Err(ApmError::InvalidStage { .. })));
        assert!(matches!(s.threshold(0, 0), Err(ApmError::InvalidStage { .. })));
    }

    #[test]
    fn threshold_from_stats() {
        let mut s = ClassStatsStore::new(
            1,
            ApmConfig {
                min_samples: 1,
                ..ApmConfig::default()
            },
        )
        .unwrap();
        for v in [0.2, 0.4, 0.6] {
            s.record_confidence(0, v).unwrap();
        }
        let (wm, wsd) = welford(&[0.2, 0.4, 0.6]);
        assert!((s.threshold(0, 1).unwrap() - (wm + wsd)).abs() < 1e-12);
        assert!((s.threshold(0, 1).unwrap() - 0.5633).abs() < 1e-4);
    }

    #[test]
    fn threshold_clamps_to_one() {
        // mu = 0.95, sigma = 0.05 from {0.9, 1.0}; mu + 2 sigma = 1.05
        let mut s = ClassStatsStore::new(
            1,
            ApmConfig {
                min_samples: 1,
                ..ApmConfig::default()
            },
        )
        .unwrap();
        s.record_confidence(0, 0.9).unwrap();
        s.record_confidence(0, 1.0).unwrap();
        assert_eq!(s.threshold(0, 3).unwrap(), 1.0);
    }

    #[test]
    fn cold_start_uses_fallback() {
        let s = store(3);
        assert_eq!(s.threshold(1, 2).unwrap(), 0.6);
        assert_eq!(s.thresholds(2).unwrap(), vec![0.5, 0.6, 0.7]);
    }

    #[test]
    fn config_validation() {
        let bad = ApmConfig {
            epsilons: vec![1.0, 2.0],
            ..ApmConfig::default()
        };
        assert!(ClassStatsStore::new(1, bad).is_err());
        let zero = ApmConfig {
            capacity: 0,
            ..ApmConfig::default()
        };
        assert!(ClassStatsStore::new(1, zero).is_err());
    }

    fn tiny_bundle() -> DatasetBundle {
        let mut b = DatasetBundle {
            images: vec![ImageInfo { id: 1, width: 100.0, height: 100.0 }],
            annotations: vec![Annotation {
                id: 1,
                image_id: 1,
                category_id: 10,
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            }],
            categories: vec![
                Category { id: 10, name: "a".into(), instance_count: 0, image_count: 0, group: None },
                Category { id: 20, name: "b".into(), instance_count: 0, image_count: 0, group: None },
            ],
            split: Split::Labeled,
        };
        b.recount();
        b
    }

    fn target(probs: Vec<f64>, bbox: BBox) -> TeacherTarget {
        TeacherTarget::from_probs(1, 0, probs, bbox)
    }

    #[test]
    fn populate_reads_ground_truth_class_probability() {
        let bundle = tiny_bundle();
        let mut s = store(2);
        let on = target(vec![0.8, 0.0, 0.2], BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        let off = target(vec![0.1, 0.7, 0.2], BBox::new(50.0, 50.0, 60.0, 60.0).unwrap());
        let n = s.populate_from_labeled(&[on, off], &bundle, 0.5).unwrap();
        assert_eq!(n, 1);
        assert_eq!(s.queue(0).unwrap().iter().copied().collect::<Vec<_>>(), vec![0.8]);
        assert!(s.queue(1).unwrap().is_empty());
    }

    #[test]
    fn populate_max_probability_source() {
        let bundle = tiny_bundle();
        let mut s = ClassStatsStore::new(
            2,
            ApmConfig {
                source: ConfidenceSource::MaxProbability,
                ..ApmConfig::default()
            },
        )
        .unwrap();
        // misclassified but well-localized proposal: GT class 0, argmax class 1
        let t = target(vec![0.3, 0.6, 0.1], BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        s.populate_from_labeled(&[t], &bundle, 0.5).unwrap();
        assert_eq!(s.queue(0).unwrap()[0], 0.6);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = store(2);
        for v in [0.1, 0.5, 0.9, 0.3] {
            s.record_confidence(1, v).unwrap();
        }
        let json = serde_json::to_string(&s.snapshot()).unwrap();
        let snap: ApmSnapshot = serde_json::from_str(&json).unwrap();
        let back = ClassStatsStore::from_snapshot(&snap).unwrap();
        assert_eq!(back, s);
    }
}
