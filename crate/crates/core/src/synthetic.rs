//! Seeded long-tailed dataset generator and a simulated K-stage detector.
//!
//! Class `c` (0-based, most frequent first) is drawn with weight
//! `(c + 1)^-exponent`. Images are abstract coordinate frames; each gets its
//! own RNG substream derived from `(seed, image_id)`, so generation can run in
//! parallel without changing the output.
//!
//! The detector emits K aligned stage records per object plus false-positive
//! proposals. For a proposal whose true slot is class `c` (or background for
//! false positives), stage `k` draws
//!
//! ```text
//! s_true ~ clamp(Normal(q + (1 - q) * (base + stage_gain * (k - 1)) + bias[group(c)], sigma), 0, 1)
//! ```
//!
//! with `q` the detector quality. A confuser class drawn once per proposal from
//! the class prior (so confusions lean toward frequent classes) takes a uniform
//! share `u * (1 - s_true)`; the rest is split between background and the
//! remaining classes. Stage boxes are the true box plus Gaussian corner jitter
//! with standard deviation `box_jitter / k`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    assign_class_groups, Annotation, BBox, BinningScheme, Category, ClassGroup, DatasetBundle,
    DetectionRecord, HiddenAnnotations, ImageInfo, ScoreSemantics, Split, UnlabeledBundle,
};
use crate::par;
use crate::rng::{streams, substream};

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Mean true-slot score at stage 1 for quality 0.
    pub base_score: f64,
    /// Added to the mean per later stage.
    pub stage_gain: f64,
    pub score_sigma: f64,
    /// Mean shift of the true-class score per class group.
    pub group_bias: BTreeMap<ClassGroup, f64>,
    /// Mean of the background score on false-positive proposals at stage 1.
    pub background_score: f64,
    /// Corner jitter standard deviation at stage 1 (pixels).
    pub box_jitter: f64,
    /// Expected false-positive proposals per ground-truth object.
    pub false_positive_rate: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            base_score: 0.55,
            stage_gain: 0.04,
            score_sigma: 0.2,
            group_bias: BTreeMap::from([
                (ClassGroup::Rare, -0.2),
                (ClassGroup::Common, -0.1),
                (ClassGroup::Frequent, 0.0),
                (ClassGroup::Bin1, -0.2),
                (ClassGroup::Bin2, -0.1),
                (ClassGroup::Bin3, -0.05),
                (ClassGroup::Bin4, 0.0),
            ]),
            background_score: 0.55,
            box_jitter: 6.0,
            false_positive_rate: 0.5,
        }
    }
}

impl DetectorConfig {
    /// No score noise, no bias, exact boxes, no false positives.
    pub fn noiseless() -> Self {
        DetectorConfig {
            score_sigma: 0.0,
            group_bias: BTreeMap::new(),
            box_jitter: 0.0,
            false_positive_rate: 0.0,
            ..DetectorConfig::default()
        }
    }

    pub fn bias(&self, group: Option<ClassGroup>) -> f64 {
        group
            .and_then(|g| self.group_bias.get(&g))
            .copied()
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub exponent: f64,
    pub labeled_images: usize,
    /// Unlabeled images per labeled image.
    pub unlabeled_ratio: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub image_size: f64,
    pub min_box: f64,
    pub max_box: f64,
    pub stages: usize,
    pub scheme: BinningScheme,
    pub seed: u64,
    pub detector: DetectorConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 30,
            exponent: 1.5,
            labeled_images: 400,
            unlabeled_ratio: 1.0,
            min_objects: 1,
            max_objects: 6,
            image_size: 1024.0,
            min_box: 32.0,
            max_box: 256.0,
            stages: 3,
            scheme: BinningScheme::Lvis3,
            seed: 0,
            detector: DetectorConfig::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let fail = |m: &str| Err(SyntheticError::Config(m.to_string()));
        if self.num_classes < 2 {
            return fail("need at least 2 classes");
        }
        if !self.exponent.is_finite() || self.exponent < 0.0 {
            return fail("exponent must be a non-negative number");
        }
        if self.min_objects > self.max_objects {
            return fail("min_objects exceeds max_objects");
        }
        if !(self.min_box > 0.0 && self.min_box <= self.max_box && self.max_box <= self.image_size) {
            return fail("need 0 < min_box <= max_box <= image_size");
        }
        if self.stages == 0 {
            return fail("need at least one stage");
        }
        if !(self.unlabeled_ratio >= 0.0) {
            return fail("unlabeled_ratio must be non-negative");
        }
        let d = &self.detector;
        if d.score_sigma < 0.0 || d.box_jitter < 0.0 || d.false_positive_rate < 0.0 {
            return fail("detector noise parameters must be non-negative");
        }
        Ok(())
    }

    pub fn unlabeled_images(&self) -> usize {
        (self.labeled_images as f64 * self.unlabeled_ratio).round() as usize
    }
}

/// Unnormalized class weights `(c + 1)^-exponent`.
pub fn class_weights(num_classes: usize, exponent: f64) -> Vec<f64> {
    (0..num_classes)
        .map(|c| ((c + 1) as f64).powf(-exponent))
        .collect()
}

/// Normalized cumulative distribution of the class weights.
pub fn class_cdf(num_classes: usize, exponent: f64) -> Vec<f64> {
    let w = class_weights(num_classes, exponent);
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    w.iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect()
}

fn sample_class(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// One generated object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticObject {
    pub class: usize,
    pub bbox: BBox,
}

/// Lays out one image. Draw order per image: object count, then per object
/// class, width, height, x, y.
pub fn layout_image(config: &SyntheticConfig, cdf: &[f64], image_id: u64) -> Vec<SyntheticObject> {
    let mut rng = substream(config.seed, streams::IMAGE_LAYOUT, image_id);
    let n = rng.random_range(config.min_objects..=config.max_objects);
    (0..n)
        .map(|_| {
            let class = sample_class(cdf, rng.random::<f64>());
            let span = config.max_box - config.min_box;
            let w = config.min_box + span * rng.random::<f64>();
            let h = config.min_box + span * rng.random::<f64>();
            let x = (config.image_size - w) * rng.random::<f64>();
            let y = (config.image_size - h) * rng.random::<f64>();
            SyntheticObject {
                class,
                bbox: BBox {
                    x_min: x,
                    y_min: y,
                    x_max: x + w,
                    y_max: y + h,
                },
            }
        })
        .collect()
}

fn categories(num_classes: usize) -> Vec<Category> {
    (0..num_classes)
        .map(|c| Category {
            id: c as u64 + 1,
            name: format!("class_{:03}", c + 1),
            instance_count: 0,
            image_count: 0,
            group: None,
        })
        .collect()
}

/// Generates images with ids `first_id..first_id + count` as a bundle.
pub fn generate_split(config: &SyntheticConfig, first_id: u64, count: usize, split: Split) -> DatasetBundle {
    let cdf = class_cdf(config.num_classes, config.exponent);
    let ids: Vec<u64> = (0..count as u64).map(|i| first_id + i).collect();
    let layouts = par::map(&ids, |&id| layout_image(config, &cdf, id));
    let mut annotations = Vec::new();
    let mut next_ann = first_id * 1000;
    for (id, objs) in ids.iter().zip(&layouts) {
        for o in objs {
            next_ann += 1;
            annotations.push(Annotation {
                id: next_ann,
                image_id: *id,
                category_id: o.class as u64 + 1,
                bbox: o.bbox,
            });
        }
    }
    let mut bundle = DatasetBundle {
        images: ids
            .iter()
            .map(|&id| ImageInfo {
                id,
                width: config.image_size,
                height: config.image_size,
            })
            .collect(),
        annotations,
        categories: categories(config.num_classes),
        split,
    };
    bundle.recount();
    bundle
}

/// Labeled bundle (groups assigned from its own counts) and unlabeled bundle
/// whose annotations are hidden. Both share the labeled category table.
pub fn generate_dataset(config: &SyntheticConfig) -> Result<(DatasetBundle, UnlabeledBundle), SyntheticError> {
    config.validate()?;
    let labeled = generate_split(config, 1, config.labeled_images, Split::Labeled);
    let labeled = assign_class_groups(labeled, config.scheme);
    let unlabeled = generate_split(
        config,
        config.labeled_images as u64 + 1,
        config.unlabeled_images(),
        Split::Unlabeled,
    );
    let hidden = HiddenAnnotations::new(unlabeled.annotations);
    let public = DatasetBundle {
        images: unlabeled.images,
        annotations: Vec::new(),
        categories: labeled.categories.clone(),
        split: Split::Unlabeled,
    };
    Ok((labeled, UnlabeledBundle { public, hidden }))
}

/// True slot of a simulated proposal.
#[derive(Debug, Clone, Copy)]
enum Slot {
    Class(usize),
    Background,
}

fn stage_probs(
    rng: &mut ChaCha8Rng,
    slot: Slot,
    confuser: usize,
    num_classes: usize,
    mean: f64,
    sigma: f64,
) -> Vec<f64> {
    let noise = if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("sigma > 0").sample(rng)
    } else {
        0.0
    };
    let s_true = (mean + noise).clamp(0.0, 1.0);
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    let s_conf = (1.0 - s_true) * u;
    let rest = (1.0 - s_true - s_conf).max(0.0);
    let mut p = vec![0.0; num_classes + 1];
    match slot {
        Slot::Class(c) => {
            p[c] = s_true;
            p[confuser] += s_conf;
            let others = num_classes - 2;
            if others == 0 {
                p[num_classes] = rest;
            } else {
                p[num_classes] = rest * v;
                let share = rest * (1.0 - v) / others as f64;
                for (j, pj) in p.iter_mut().enumerate().take(num_classes) {
                    if j != c && j != confuser {
                        *pj += share;
                    }
                }
            }
        }
        Slot::Background => {
            p[num_classes] = s_true;
            p[confuser] += s_conf;
            let others = num_classes - 1;
            if others == 0 {
                p[num_classes] += rest;
            } else {
                let share = rest / others as f64;
                for (j, pj) in p.iter_mut().enumerate().take(num_classes) {
                    if j != confuser {
                        *pj += share;
                    }
                }
            }
        }
    }
    p
}

fn jitter_box(rng: &mut ChaCha8Rng, b: &BBox, sigma: f64, size: f64) -> BBox {
    if sigma <= 0.0 {
        return *b;
    }
    let n = Normal::new(0.0, sigma).expect("sigma > 0");
    let c = b.corners();
    let moved = [
        (c[0] + n.sample(rng)).clamp(0.0, size),
        (c[1] + n.sample(rng)).clamp(0.0, size),
        (c[2] + n.sample(rng)).clamp(0.0, size),
        (c[3] + n.sample(rng)).clamp(0.0, size),
    ];
    BBox::from_unordered(moved)
}

fn draw_confuser(rng: &mut ChaCha8Rng, cdf: &[f64], exclude: Option<usize>) -> usize {
    loop {
        let c = sample_class(cdf, rng.random::<f64>());
        if Some(c) != exclude {
            return c;
        }
    }
}

/// Simulated proposal before stage records are emitted.
#[derive(Debug, Clone, Copy)]
struct Proposal {
    slot: Slot,
    bbox: BBox,
}

/// Simulates the K-stage detector on every image of `bundle`, whose
/// annotations are the ground truth to detect (pass
/// [`UnlabeledBundle::audit_view`] for an unlabeled split). Categories must
/// carry groups for the group bias to apply.
///
/// Proposal ids per image: objects first in annotation order, then false
/// positives.
pub fn simulate_detector(bundle: &DatasetBundle, config: &SyntheticConfig, quality: f64) -> Vec<DetectionRecord> {
    let num_classes = bundle.num_classes();
    let cdf = class_cdf(num_classes, config.exponent);
    let det = &config.detector;
    let quality = quality.clamp(0.0, 1.0);
    let by_image = bundle.annotations_by_image();
    let per_image = par::map(&bundle.images, |img| {
        let mut rng = substream(config.seed, streams::DETECTOR, img.id);
        let mut proposals: Vec<Proposal> = by_image
            .get(&img.id)
            .map(|anns| {
                anns.iter()
                    .filter_map(|a| {
                        bundle.class_index(a.category_id).map(|c| Proposal {
                            slot: Slot::Class(c),
                            bbox: a.bbox,
                        })
                    })
                    .collect()
            })
            .unwrap_or_default();
        let n_objects = proposals.len();
        let expected = det.false_positive_rate * n_objects as f64;
        let mut n_fp = expected.floor() as usize;
        if rng.random::<f64>() < expected.fract() {
            n_fp += 1;
        }
        let span = config.max_box - config.min_box;
        for _ in 0..n_fp {
            let w = config.min_box + span * rng.random::<f64>();
            let h = config.min_box + span * rng.random::<f64>();
            let x = (img.width - w).max(0.0) * rng.random::<f64>();
            let y = (img.height - h).max(0.0) * rng.random::<f64>();
            proposals.push(Proposal {
                slot: Slot::Background,
                bbox: BBox {
                    x_min: x,
                    y_min: y,
                    x_max: x + w,
                    y_max: y + h,
                },
            });
        }

        let mut records = Vec::with_capacity(proposals.len() * config.stages);
        for (pid, p) in proposals.iter().enumerate() {
            let (exclude, bias, base) = match p.slot {
                Slot::Class(c) => (Some(c), det.bias(bundle.group_of(c)), det.base_score),
                Slot::Background => (None, 0.0, det.background_score),
            };
            let confuser = draw_confuser(&mut rng, &cdf, exclude);
            for k in 1..=config.stages {
                let mean = (quality + (1.0 - quality) * (base + det.stage_gain * (k - 1) as f64) + bias)
                    .clamp(0.0, 1.0);
                let class_probs =
                    stage_probs(&mut rng, p.slot, confuser, num_classes, mean, det.score_sigma);
                let bbox = jitter_box(&mut rng, &p.bbox, det.box_jitter / k as f64, img.width.max(img.height));
                records.push(DetectionRecord {
                    image_id: img.id,
                    proposal_id: pid as u64,
                    stage: k,
                    class_probs,
                    bbox,
                    semantics: ScoreSemantics::Softmax,
                });
            }
        }
        records
    });
    per_image.into_iter().flatten().collect()
}
