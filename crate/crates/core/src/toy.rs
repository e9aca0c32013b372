//! Desk-scale closed-loop semi-supervised learner.
//!
//! Every synthetic object (and some background proposals) becomes a toy
//! proposal carrying one feature vector per cascade stage: a class centroid,
//! a proposal-level shared noise term, and independent per-stage noise that
//! shrinks with the stage index. Each stage owns a linear-softmax classifier
//! over its view and a linear box regressor over a 4-d box-evidence vector.
//!
//! Training is plain gradient descent. After a labeled-only burn-in, unlabeled
//! proposals contribute gated pseudo-label losses weighted by `lambda_u`. The
//! teacher is either the head ensemble or each head's own prediction, and the
//! gate uses either adaptive per-class thresholds or fixed ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apm::{ApmConfig, ApmError, ClassStatsStore};
use crate::cpl::{gate, LabelSource, TeacherTarget, ThresholdTable};
use crate::dataset::{argmax, BBox, ClassGroup, DatasetBundle, UnlabeledBundle};
use crate::losses::{cls_loss_logits, reg_loss, reg_loss_grad, softmax, LossBreakdown, LossConfig};
use crate::par;
use crate::rng::{streams, substream};
use crate::synthetic::{generate_dataset, SyntheticConfig, SyntheticError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Apm(#[from] ApmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub dim: usize,
    /// Standard deviation of each centroid coordinate.
    pub centroid_scale: f64,
    /// Proposal-level noise shared by all stage views.
    pub shared_noise: f64,
    /// Stage-1 view noise; stage `k` uses `stage_noise * stage_decay^(k-1)`.
    pub stage_noise: f64,
    pub stage_decay: f64,
    /// Extra shared noise per class group.
    pub group_noise: BTreeMap<ClassGroup, f64>,
    /// Background proposals per object.
    pub background_rate: f64,
    /// Held-out proposals per class.
    pub test_per_class: usize,
    /// Proposal box jitter (pixels).
    pub box_jitter: f64,
    /// Noise on the box-evidence vector (normalized units).
    pub evidence_noise: f64,
    /// Pixels per normalized box unit.
    pub box_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dim: 16,
            centroid_scale: 1.0,
            shared_noise: 0.6,
            stage_noise: 0.9,
            stage_decay: 0.9,
            group_noise: BTreeMap::from([
                (ClassGroup::Rare, 0.2),
                (ClassGroup::Common, 0.1),
                (ClassGroup::Bin1, 0.2),
                (ClassGroup::Bin2, 0.1),
            ]),
            background_rate: 0.3,
            test_per_class: 40,
            box_jitter: 8.0,
            evidence_noise: 0.1,
            box_scale: 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyWorldConfig {
    pub synthetic: SyntheticConfig,
    pub features: FeatureConfig,
}

/// One proposal of the toy world. `class == num_classes` marks background.
/// Boxes are in normalized units (pixels / `box_scale`).
///
/// `anchor` is the object-level feature (class centroid plus shared noise).
/// Stage views add fresh per-stage noise on every draw, the way a detector
/// sees a different crop of the same object at every pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyProposal {
    pub uid: u64,
    pub image_id: u64,
    pub proposal_id: u64,
    pub class: usize,
    pub anchor: Vec<f64>,
    pub evidence: [f64; 4],
    pub initial_box: BBox,
    pub gt_box: Option<BBox>,
}

/// Draw index used for audits and held-out evaluation.
pub const FIXED_DRAW: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub seed: u64,
    pub num_classes: usize,
    pub stages: usize,
    pub feature_dim: usize,
    /// View noise per stage.
    pub stage_sd: Vec<f64>,
    pub groups: Vec<Option<ClassGroup>>,
    pub labeled: Vec<ToyProposal>,
    /// Hidden classes are kept on the proposals for auditing only; training
    /// never reads them.
    pub unlabeled: Vec<ToyProposal>,
    pub test: Vec<ToyProposal>,
}

struct FeatureSampler<'a> {
    cfg: &'a FeatureConfig,
    centroids: Vec<Vec<f64>>,
    groups: &'a [Option<ClassGroup>],
}

impl FeatureSampler<'_> {
    fn anchor(&self, rng: &mut ChaCha8Rng, class: usize) -> Vec<f64> {
        let group_extra = self
            .groups
            .get(class)
            .copied()
            .flatten()
            .and_then(|g| self.cfg.group_noise.get(&g))
            .copied()
            .unwrap_or(0.0);
        let sd = self.cfg.shared_noise + group_extra;
        self.centroids[class].iter().map(|m| m + gauss(rng, sd)).collect()
    }

    fn proposal(&self, rng: &mut ChaCha8Rng, image_id: u64, proposal_id: u64, class: usize, gt_px: BBox) -> ToyProposal {
        let s = self.cfg.box_scale;
        let gt = scale_box(&gt_px, 1.0 / s);
        let j = self.cfg.box_jitter / s;
        let init = [
            gt.x_min + gauss(rng, j),
            gt.y_min + gauss(rng, j),
            gt.x_max + gauss(rng, j),
            gt.y_max + gauss(rng, j),
        ];
        let background = class == self.centroids.len() - 1;
        let gc = gt.corners();
        let mut evidence = [0.0; 4];
        for i in 0..4 {
            let offset = if background { gauss(rng, j) } else { gc[i] - init[i] };
            evidence[i] = offset + gauss(rng, self.cfg.evidence_noise);
        }
        ToyProposal {
            uid: 0,
            image_id,
            proposal_id,
            class,
            anchor: self.anchor(rng, class),
            evidence,
            initial_box: BBox {
                x_min: init[0],
                y_min: init[1],
                x_max: init[2],
                y_max: init[3],
            },
            gt_box: (!background).then_some(gt),
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd <= 0.0 {
        0.0
    } else {
        Normal::new(0.0, sd).expect("sd > 0").sample(rng)
    }
}

fn scale_box(b: &BBox, f: f64) -> BBox {
    BBox {
        x_min: b.x_min * f,
        y_min: b.y_min * f,
        x_max: b.x_max * f,
        y_max: b.y_max * f,
    }
}

fn proposals_from_bundle(sampler: &FeatureSampler<'_>, bundle: &DatasetBundle, seed: u64) -> Vec<ToyProposal> {
    let by_image = bundle.annotations_by_image();
    let bg = sampler.centroids.len() - 1;
    let per_image = par::map(&bundle.images, |img| {
        let mut rng = substream(seed, streams::FEATURES, img.id);
        let anns = by_image.get(&img.id).cloned().unwrap_or_default();
        let mut out = Vec::new();
        for (i, a) in anns.iter().enumerate() {
            let class = bundle.class_index(a.category_id).expect("category in table");
            out.push(sampler.proposal(&mut rng, img.id, i as u64, class, a.bbox));
        }
        let expected = sampler.cfg.background_rate * anns.len() as f64;
        let mut n_bg = expected.floor() as usize;
        if rng.random::<f64>() < expected.fract() {
            n_bg += 1;
        }
        for i in 0..n_bg {
            let x = (img.width - 64.0).max(0.0) * rng.random::<f64>();
            let y = (img.height - 64.0).max(0.0) * rng.random::<f64>();
            let b = BBox {
                x_min: x,
                y_min: y,
                x_max: x + 64.0,
                y_max: y + 64.0,
            };
            out.push(sampler.proposal(&mut rng, img.id, (anns.len() + i) as u64, bg, b));
        }
        out
    });
    per_image.into_iter().flatten().collect()
}

fn assign_uids(props: &mut [ToyProposal], split: u64) {
    for (i, p) in props.iter_mut().enumerate() {
        p.uid = (split << 40) | i as u64;
    }
}

impl ToyWorld {
    /// Generates the synthetic dataset and attaches features.
    pub fn build(config: &ToyWorldConfig) -> Result<Self, TrainError> {
        let (labeled, unlabeled) = generate_dataset(&config.synthetic)?;
        Self::from_bundles(&labeled, &unlabeled, config)
    }

    pub fn from_bundles(
        labeled: &DatasetBundle,
        unlabeled: &UnlabeledBundle,
        config: &ToyWorldConfig,
    ) -> Result<Self, TrainError> {
        let f = &config.features;
        if f.dim == 0 || f.box_scale <= 0.0 {
            return Err(TrainError::Config("feature dim and box scale must be positive".into()));
        }
        let seed = config.synthetic.seed;
        let num_classes = labeled.num_classes();
        let stages = config.synthetic.stages;
        let groups: Vec<Option<ClassGroup>> = labeled.categories.iter().map(|c| c.group).collect();
        let mut crng = substream(seed, streams::CENTROIDS, 0);
        // background centroid sits at the origin
        let centroids: Vec<Vec<f64>> = (0..=num_classes)
            .map(|c| {
                (0..f.dim)
                    .map(|_| if c == num_classes { 0.0 } else { gauss(&mut crng, f.centroid_scale) })
                    .collect()
            })
            .collect();
        let sampler = FeatureSampler {
            cfg: f,
            centroids,
            groups: &groups,
        };
        let mut labeled_props = proposals_from_bundle(&sampler, labeled, seed);
        let mut unlabeled_props = proposals_from_bundle(&sampler, &unlabeled.audit_view(), seed);
        let mut test: Vec<ToyProposal> = par::map_range(num_classes, |c| {
            let mut rng = substream(seed, streams::FEATURES, u64::MAX - c as u64);
            (0..f.test_per_class)
                .map(|i| {
                    let b = BBox {
                        x_min: 0.0,
                        y_min: 0.0,
                        x_max: 64.0,
                        y_max: 64.0,
                    };
                    sampler.proposal(&mut rng, 0, i as u64, c, b)
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
        assign_uids(&mut labeled_props, 0);
        assign_uids(&mut unlabeled_props, 1);
        assign_uids(&mut test, 2);
        Ok(ToyWorld {
            seed,
            num_classes,
            stages,
            feature_dim: f.dim,
            stage_sd: (0..stages)
                .map(|k| f.stage_noise * f.stage_decay.powi(k as i32))
                .collect(),
            groups,
            labeled: labeled_props,
            unlabeled: unlabeled_props,
            test,
        })
    }

    /// Stage views of `p` for draw `draw`, `[stage][dim]`.
    pub fn views(&self, p: &ToyProposal, draw: u64) -> Vec<Vec<f64>> {
        let mut rng = substream(crate::rng::derive(self.seed, streams::VIEWS, p.uid), streams::VIEWS, draw);
        self.stage_sd
            .iter()
            .map(|&sd| p.anchor.iter().map(|a| a + gauss(&mut rng, sd)).collect())
            .collect()
    }
}

/// Parameters of one stage head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    /// Row-major `[dim][num_outputs]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub reg_weights: [[f64; 4]; 4],
    pub reg_bias: [f64; 4],
}

impl Head {
    fn zeros(dim: usize, outputs: usize) -> Self {
        Head {
            weights: vec![0.0; dim * outputs],
            bias: vec![0.0; outputs],
            reg_weights: [[0.0; 4]; 4],
            reg_bias: [0.0; 4],
        }
    }

    fn axpy(&mut self, a: f64, other: &Head) {
        for (w, g) in self.weights.iter_mut().zip(&other.weights) {
            *w += a * g;
        }
        for (w, g) in self.bias.iter_mut().zip(&other.bias) {
            *w += a * g;
        }
        for i in 0..4 {
            for j in 0..4 {
                self.reg_weights[i][j] += a * other.reg_weights[i][j];
            }
            self.reg_bias[i] += a * other.reg_bias[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub heads: Vec<Head>,
    pub feature_dim: usize,
    /// `C + 1`, background last.
    pub num_outputs: usize,
}

impl ToyModel {
    /// Small random classifier weights, zero regressors.
    pub fn new(feature_dim: usize, num_classes: usize, stages: usize, seed: u64) -> Self {
        let outputs = num_classes + 1;
        let heads = (0..stages)
            .map(|k| {
                let mut rng = substream(seed, streams::INIT, k as u64);
                let mut h = Head::zeros(feature_dim, outputs);
                for w in &mut h.weights {
                    *w = gauss(&mut rng, 0.01);
                }
                h
            })
            .collect();
        ToyModel {
            heads,
            feature_dim,
            num_outputs: outputs,
        }
    }

    pub fn stages(&self) -> usize {
        self.heads.len()
    }

    pub fn logits(&self, stage: usize, x: &[f64]) -> Vec<f64> {
        let h = &self.heads[stage];
        let mut z = h.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            let row = &h.weights[i * self.num_outputs..(i + 1) * self.num_outputs];
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += xi * w;
            }
        }
        z
    }

    pub fn probs(&self, stage: usize, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(stage, x))
    }

    /// Predicted box of one stage, normalized units. Not reordered, so the
    /// corners may cross early in training.
    pub fn predict_box(&self, stage: usize, p: &ToyProposal) -> BBox {
        let h = &self.heads[stage];
        let b = p.initial_box.corners();
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = b[i] + h.reg_bias[i] + (0..4).map(|j| h.reg_weights[i][j] * p.evidence[j]).sum::<f64>();
        }
        BBox {
            x_min: out[0],
            y_min: out[1],
            x_max: out[2],
            y_max: out[3],
        }
    }

    /// Mean of the stage probabilities, one view per stage.
    pub fn ensemble_probs(&self, views: &[Vec<f64>]) -> Vec<f64> {
        let mut acc = vec![0.0; self.num_outputs];
        for k in 0..self.stages() {
            for (a, q) in acc.iter_mut().zip(self.probs(k, &views[k])) {
                *a += q;
            }
        }
        let n = self.stages() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// All parameters flattened head by head.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for h in &self.heads {
            v.extend_from_slice(&h.weights);
            v.extend_from_slice(&h.bias);
            for row in &h.reg_weights {
                v.extend_from_slice(row);
            }
            v.extend_from_slice(&h.reg_bias);
        }
        v
    }

    pub fn set_params(&mut self, v: &[f64]) {
        let mut i = 0;
        for h in &mut self.heads {
            let n = h.weights.len();
            h.weights.copy_from_slice(&v[i..i + n]);
            i += n;
            let n = h.bias.len();
            h.bias.copy_from_slice(&v[i..i + n]);
            i += n;
            for row in &mut h.reg_weights {
                row.copy_from_slice(&v[i..i + 4]);
                i += 4;
            }
            h.reg_bias.copy_from_slice(&v[i..i + 4]);
            i += 4;
        }
    }
}

/// Flattens a gradient shaped like a model.
pub fn flatten_grad(grad: &[Head]) -> Vec<f64> {
    ToyModel {
        heads: grad.to_vec(),
        feature_dim: 0,
        num_outputs: 0,
    }
    .params()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Every head learns from its own prediction.
    SelfPerHead,
    /// Every head learns from the mean prediction of all heads.
    #[default]
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Labeled-only iterations; `None` means 20% of `total_iters`.
    pub burn_in_iters: Option<usize>,
    pub total_iters: usize,
    pub learning_rate: f64,
    /// When false the run is supervised-only.
    pub use_unlabeled: bool,
    pub teacher: TeacherMode,
    pub apm: bool,
    pub apm_config: ApmConfig,
    /// Per-stage thresholds used when `apm` is off.
    pub fixed_thresholds: Vec<f64>,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub loss: LossConfig,
    /// Full unlabeled-set audit every this many iterations (0 disables).
    pub audit_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            burn_in_iters: None,
            total_iters: 1500,
            learning_rate: 0.1,
            use_unlabeled: true,
            teacher: TeacherMode::Ensemble,
            apm: true,
            apm_config: ApmConfig::default(),
            fixed_thresholds: vec![0.5, 0.6, 0.7],
            labeled_batch: 64,
            unlabeled_batch: 64,
            loss: LossConfig::default(),
            audit_every: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn burn_in(&self) -> usize {
        self.burn_in_iters.unwrap_or(self.total_iters / 5)
    }

    pub fn validate(&self, stages: usize) -> Result<(), TrainError> {
        if self.burn_in() > self.total_iters {
            return Err(TrainError::Config("burn_in_iters exceeds total_iters".into()));
        }
        if self.labeled_batch == 0 {
            return Err(TrainError::Config("labeled_batch must be positive".into()));
        }
        if self.apm && self.apm_config.stages() != stages {
            return Err(TrainError::Config(format!(
                "{} APM epsilons for {stages} stages",
                self.apm_config.stages()
            )));
        }
        if !self.apm && self.fixed_thresholds.len() != stages {
            return Err(TrainError::Config(format!(
                "{} fixed thresholds for {stages} stages",
                self.fixed_thresholds.len()
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen teacher targets for one gradient step. `unlabeled[i].1[k]` is the
/// `(label, box)` target of stage `k` when its gate passed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepTargets {
    /// View draw shared by teacher and student.
    pub draw: u64,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<(usize, Vec<Option<(usize, BBox)>>)>,
}

/// Loss and gradient for one step with frozen targets.
pub fn step_loss(model: &ToyModel, world: &ToyWorld, targets: &StepTargets, loss: &LossConfig) -> (LossBreakdown, Vec<Head>) {
    let outputs = model.num_outputs;
    let dim = model.feature_dim;
    let mut grad: Vec<Head> = (0..model.stages()).map(|_| Head::zeros(dim, outputs)).collect();
    let nl = targets.labeled.len().max(1) as f64;
    let nu = targets.unlabeled.len().max(1) as f64;

    let accumulate = |grad: &mut Vec<Head>, p: &ToyProposal, x: &[f64], k: usize, class: usize, box_target: Option<&BBox>, scale: f64| -> (f64, f64) {
        let (cl, g) = cls_loss_logits(&model.logits(k, x), class, loss.cls);
        let h = &mut grad[k];
        for (i, xi) in x.iter().enumerate() {
            let row = &mut h.weights[i * outputs..(i + 1) * outputs];
            for (w, gj) in row.iter_mut().zip(&g) {
                *w += scale * xi * gj;
            }
        }
        for (b, gj) in h.bias.iter_mut().zip(&g) {
            *b += scale * gj;
        }
        let mut rl = 0.0;
        if let Some(t) = box_target {
            let pred = model.predict_box(k, p);
            rl = reg_loss(&pred, t, loss.reg);
            let gb = reg_loss_grad(&pred, t, loss.reg);
            for i in 0..4 {
                for j in 0..4 {
                    h.reg_weights[i][j] += scale * gb[i] * p.evidence[j];
                }
                h.reg_bias[i] += scale * gb[i];
            }
        }
        (cl, rl)
    };

    let (mut cls_l, mut reg_l) = (0.0, 0.0);
    for &i in &targets.labeled {
        let p = &world.labeled[i];
        let views = world.views(p, targets.draw);
        for k in 0..model.stages() {
            let (c, r) = accumulate(&mut grad, p, &views[k], k, p.class, p.gt_box.as_ref(), 1.0 / nl);
            cls_l += c;
            reg_l += r;
        }
    }
    let (mut cls_u, mut reg_u) = (0.0, 0.0);
    let lu = loss.lambda_u;
    for (i, per_stage) in &targets.unlabeled {
        let p = &world.unlabeled[*i];
        let views = world.views(p, targets.draw);
        for (k, t) in per_stage.iter().enumerate() {
            if let Some((label, b)) = t {
                let (c, r) = accumulate(&mut grad, p, &views[k], k, *label, Some(b), lu / nu);
                cls_u += c;
                reg_u += r;
            }
        }
    }
    (
        LossBreakdown::new(cls_l / nl, reg_l / nl, cls_u / nu, reg_u / nu, lu),
        grad,
    )
}

/// Builds the gated targets of the unlabeled batch `idx` and returns them with
/// per-stage retained counts and the number of retained labels that are correct
/// (using hidden classes, audit only).
fn unlabeled_targets(
    model: &ToyModel,
    world: &ToyWorld,
    idx: &[usize],
    draw: u64,
    table: &ThresholdTable,
    mode: TeacherMode,
) -> (Vec<(usize, Vec<Option<(usize, BBox)>>)>, Vec<usize>, (usize, usize)) {
    let stages = model.stages();
    let mut retained = vec![0; stages];
    let (mut correct, mut used) = (0usize, 0usize);
    let mut out = Vec::with_capacity(idx.len());
    for &i in idx {
        let p = &world.unlabeled[i];
        let views = world.views(p, draw);
        let per_stage: Vec<Vec<f64>> = (0..stages).map(|k| model.probs(k, &views[k])).collect();
        let boxes: Vec<BBox> = (0..stages).map(|k| model.predict_box(k, p)).collect();
        let mut row = vec![None; stages];
        match mode {
            TeacherMode::Ensemble => {
                let mut mean = vec![0.0; model.num_outputs];
                for probs in &per_stage {
                    for (m, q) in mean.iter_mut().zip(probs) {
                        *m += q / stages as f64;
                    }
                }
                let bbox = BBox::mean(boxes.iter()).expect("stages > 0");
                let t = TeacherTarget::from_probs(p.image_id, p.proposal_id, mean, bbox);
                let gated = gate(vec![t], table);
                let e = &gated.entries[0];
                for (k, &pass) in e.passes.iter().enumerate() {
                    if pass {
                        row[k] = Some((e.target.label, e.target.bbox));
                        retained[k] += 1;
                    }
                }
                if e.passes.first().copied().unwrap_or(false) {
                    used += 1;
                    correct += usize::from(e.target.label == p.class);
                }
            }
            TeacherMode::SelfPerHead => {
                for k in 0..stages {
                    let t = TeacherTarget::from_probs(p.image_id, p.proposal_id, per_stage[k].clone(), boxes[k]);
                    if !t.background && t.confidence >= table.get(t.label, k + 1) {
                        row[k] = Some((t.label, t.bbox));
                        retained[k] += 1;
                        used += 1;
                        correct += usize::from(t.label == p.class);
                    }
                }
            }
        }
        out.push((i, row));
    }
    (out, retained, (correct, used))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub losses: LossBreakdown,
    /// Retained pseudo-labels per stage in this batch.
    pub retained: Vec<usize>,
    /// Accuracy of the retained teacher labels of this batch.
    pub teacher_accuracy: Option<f64>,
    pub thresholds_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub iteration: usize,
    /// `[class][stage]`.
    pub thresholds: Vec<Vec<f64>>,
    /// Ungated accuracy of each source's foreground predictions on the whole
    /// unlabeled set.
    pub accuracy_by_source: BTreeMap<String, f64>,
    /// Accuracy of the stage-1-retained labels of the run's teacher mode.
    pub teacher_accuracy: Option<f64>,
    /// Stage-1-retained labels per class on the whole unlabeled set.
    pub retained_by_class: Vec<usize>,
    pub held_out: HeldOutEval,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HeldOutEval {
    /// Mean of per-class accuracies.
    pub overall: f64,
    pub per_group: BTreeMap<ClassGroup, f64>,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub iterations: Vec<IterationLog>,
    pub audits: Vec<AuditLog>,
    pub monotone_violations: usize,
    pub final_eval: HeldOutEval,
}

impl RunLog {
    pub fn iterations_csv(&self) -> String {
        let stages = self.iterations.first().map_or(0, |r| r.retained.len());
        let mut s = String::from(crate::losses::LossBreakdown::CSV_HEADER);
        for k in 1..=stages {
            let _ = write!(s, ",retained_stage{k}");
        }
        s.push_str(",teacher_accuracy,thresholds_monotone\n");
        for r in &self.iterations {
            s.push_str(&r.losses.csv_row(r.iteration));
            for n in &r.retained {
                let _ = write!(s, ",{n}");
            }
            match r.teacher_accuracy {
                Some(a) => {
                    let _ = write!(s, ",{a}");
                }
                None => s.push(','),
            }
            let _ = writeln!(s, ",{}", r.thresholds_monotone);
        }
        s
    }

    pub fn thresholds_csv(&self) -> String {
        let mut s = String::from("iteration,class,stage,threshold\n");
        for a in &self.audits {
            for (c, row) in a.thresholds.iter().enumerate() {
                for (k, t) in row.iter().enumerate() {
                    let _ = writeln!(s, "{},{c},{},{t}", a.iteration, k + 1);
                }
            }
        }
        s
    }

    pub fn audits_csv(&self) -> String {
        let mut keys: Vec<String> = self
            .audits
            .first()
            .map(|a| a.accuracy_by_source.keys().cloned().collect())
            .unwrap_or_default();
        keys.sort();
        let mut s = String::from("iteration,held_out_overall,teacher_accuracy");
        for k in &keys {
            let _ = write!(s, ",accuracy_{k}");
        }
        s.push('\n');
        for a in &self.audits {
            let _ = write!(
                s,
                "{},{},{}",
                a.iteration,
                a.held_out.overall,
                a.teacher_accuracy.map_or(String::new(), |v| v.to_string())
            );
            for k in &keys {
                let _ = write!(s, ",{}", a.accuracy_by_source.get(k).copied().unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }

    /// Mean audited teacher accuracy over the post-burn-in audits.
    pub fn mean_teacher_accuracy(&self) -> Option<f64> {
        let v: Vec<f64> = self.audits.iter().filter_map(|a| a.teacher_accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Class-mean accuracy of the ensemble prediction on the held-out split.
pub fn evaluate_held_out(model: &ToyModel, world: &ToyWorld) -> HeldOutEval {
    let c = world.num_classes;
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for p in &world.test {
        if p.class >= c {
            continue;
        }
        totals[p.class] += 1;
        if argmax(&model.ensemble_probs(&world.views(p, FIXED_DRAW))) == p.class {
            hits[p.class] += 1;
        }
    }
    let per_class: Vec<f64> = (0..c)
        .map(|i| if totals[i] == 0 { 0.0 } else { hits[i] as f64 / totals[i] as f64 })
        .collect();
    let valid: Vec<usize> = (0..c).filter(|&i| totals[i] > 0).collect();
    let overall = if valid.is_empty() {
        0.0
    } else {
        valid.iter().map(|&i| per_class[i]).sum::<f64>() / valid.len() as f64
    };
    let mut sums: BTreeMap<ClassGroup, (f64, usize)> = BTreeMap::new();
    for &i in &valid {
        if let Some(g) = world.groups[i] {
            let e = sums.entry(g).or_default();
            e.0 += per_class[i];
            e.1 += 1;
        }
    }
    HeldOutEval {
        overall,
        per_group: sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect(),
        per_class,
    }
}

/// Accuracy of every source on labeled-set proposals: fraction of all
/// foreground proposals classified correctly.
pub fn labeled_accuracy(model: &ToyModel, world: &ToyWorld) -> f64 {
    let fg: Vec<&ToyProposal> = world.labeled.iter().filter(|p| p.class < world.num_classes).collect();
    if fg.is_empty() {
        return 0.0;
    }
    let hits = fg
        .iter()
        .filter(|p| argmax(&model.ensemble_probs(&world.views(p, FIXED_DRAW))) == p.class)
        .count();
    hits as f64 / fg.len() as f64
}

fn audit(model: &ToyModel, world: &ToyWorld, table: &ThresholdTable, mode: TeacherMode, iteration: usize) -> AuditLog {
    let stages = model.stages();
    let c = world.num_classes;
    let mut hits: BTreeMap<LabelSource, (usize, usize)> = BTreeMap::new();
    let mut retained_by_class = vec![0usize; c];
    let (mut t_correct, mut t_used) = (0usize, 0usize);
    for p in &world.unlabeled {
        let views = world.views(p, FIXED_DRAW);
        let per_stage: Vec<Vec<f64>> = (0..stages).map(|k| model.probs(k, &views[k])).collect();
        let mut mean = vec![0.0; model.num_outputs];
        for (k, probs) in per_stage.iter().enumerate() {
            for (m, q) in mean.iter_mut().zip(probs) {
                *m += q / stages as f64;
            }
            let fg = argmax(&probs[..c]);
            if probs[fg] >= probs[c] {
                let e = hits.entry(LabelSource::Stage(k + 1)).or_default();
                e.0 += usize::from(fg == p.class);
                e.1 += 1;
            }
            if mode == TeacherMode::SelfPerHead && k == 0 {
                let t = TeacherTarget::from_probs(0, 0, probs.clone(), p.initial_box);
                if !t.background && t.confidence >= table.get(t.label, 1) {
                    t_used += 1;
                    t_correct += usize::from(t.label == p.class);
                    retained_by_class[t.label] += 1;
                }
            }
        }
        let t = TeacherTarget::from_probs(0, 0, mean, p.initial_box);
        if !t.background {
            let e = hits.entry(LabelSource::Ensemble).or_default();
            e.0 += usize::from(t.label == p.class);
            e.1 += 1;
        }
        if mode == TeacherMode::Ensemble && !t.background && t.confidence >= table.get(t.label, 1) {
            t_used += 1;
            t_correct += usize::from(t.label == p.class);
            retained_by_class[t.label] += 1;
        }
    }
    AuditLog {
        iteration,
        thresholds: table.rows().to_vec(),
        accuracy_by_source: hits
            .into_iter()
            .map(|(s, (h, n))| (s.to_string(), h as f64 / n as f64))
            .collect(),
        teacher_accuracy: (t_used > 0).then(|| t_correct as f64 / t_used as f64),
        retained_by_class,
        held_out: evaluate_held_out(model, world),
    }
}

fn draw_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    if batch >= n {
        return (0..n).collect();
    }
    let mut v = sample(rng, n, batch).into_vec();
    v.sort_unstable();
    v
}

/// Trains `model` in place on `world`.
pub fn train(model: &mut ToyModel, world: &ToyWorld, config: &TrainConfig) -> Result<RunLog, TrainError> {
    let stages = model.stages();
    config.validate(stages)?;
    // the ensemble teacher keeps one set of class queues fed by ensemble
    // probabilities; self-teaching heads each keep their own
    let n_stores = match (config.apm, config.teacher) {
        (false, _) => 0,
        (true, TeacherMode::Ensemble) => 1,
        (true, TeacherMode::SelfPerHead) => stages,
    };
    let mut stores = (0..n_stores)
        .map(|_| ClassStatsStore::new(world.num_classes, config.apm_config.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let fixed = ThresholdTable::fixed(world.num_classes, &config.fixed_thresholds);
    let mut lab_rng = substream(config.seed, streams::TRAIN, 0);
    let mut unl_rng = substream(config.seed, streams::TRAIN, 1);
    let mut log = RunLog::default();

    for it in 0..config.total_iters {
        let lab_idx = draw_batch(&mut lab_rng, world.labeled.len(), config.labeled_batch);
        let unl_idx = draw_batch(&mut unl_rng, world.unlabeled.len(), config.unlabeled_batch);

        for &i in &lab_idx {
            let p = &world.labeled[i];
            if p.class >= world.num_classes {
                continue;
            }
            let views = world.views(p, it as u64);
            if stores.len() == 1 {
                let q = model.ensemble_probs(&views)[p.class];
                stores[0].record_confidence(p.class, q.clamp(0.0, 1.0))?;
            } else {
                for (k, s) in stores.iter_mut().enumerate() {
                    let q = model.probs(k, &views[k])[p.class];
                    s.record_confidence(p.class, q.clamp(0.0, 1.0))?;
                }
            }
        }
        let table = match stores.len() {
            0 => fixed.clone(),
            1 => ThresholdTable::from_store(&stores[0]),
            _ => ThresholdTable::from_rows(
                (0..world.num_classes)
                    .map(|c| {
                        stores
                            .iter()
                            .enumerate()
                            .map(|(k, s)| s.threshold(c, k + 1))
                            .collect::<Result<Vec<f64>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        let monotone = table.is_monotone();
        if !monotone {
            log.monotone_violations += 1;
        }

        let unlabeled_active = config.use_unlabeled && it >= config.burn_in();
        let (unlabeled, retained, (correct, used)) = if unlabeled_active {
            unlabeled_targets(model, world, &unl_idx, it as u64, &table, config.teacher)
        } else {
            (Vec::new(), vec![0; stages], (0, 0))
        };
        let targets = StepTargets {
            draw: it as u64,
            labeled: lab_idx,
            unlabeled,
        };
        let (losses, grad) = step_loss(model, world, &targets, &config.loss);
        if !losses.total.is_finite() || losses.total > 1e6 {
            return Err(TrainError::Diverged {
                iteration: it,
                loss: losses.total,
            });
        }
        for (h, g) in model.heads.iter_mut().zip(&grad) {
            h.axpy(-config.learning_rate, g);
        }
        log.iterations.push(IterationLog {
            iteration: it,
            losses,
            retained,
            teacher_accuracy: (used > 0).then(|| correct as f64 / used as f64),
            thresholds_monotone: monotone,
        });
        let last = it + 1 == config.total_iters;
        if config.audit_every > 0 && ((it + 1) % config.audit_every == 0 || last) && unlabeled_active {
            log.audits.push(audit(model, world, &table, config.teacher, it + 1));
        }
    }
    log.final_eval = evaluate_held_out(model, world);
    Ok(log)
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub cpl: bool,
    pub apm: bool,
    pub config: TrainConfig,
}

/// Variants of the CPL x APM grid, derived from `base`:
/// the supervised baseline, fixed-threshold cascade with ensemble teacher
/// (+CPL), per-class thresholds with a flat schedule and self-teaching heads
/// (+APM), and both.
pub fn ablation_variants(base: &TrainConfig) -> Vec<AblationVariant> {
    let stages = base.apm_config.stages();
    let flat_eps = vec![base.apm_config.epsilons[0]; stages];
    let flat_fixed = vec![base.fixed_thresholds[0]; stages];
    let baseline = TrainConfig {
        use_unlabeled: false,
        ..base.clone()
    };
    let cpl = TrainConfig {
        use_unlabeled: true,
        teacher: TeacherMode::Ensemble,
        apm: false,
        ..base.clone()
    };
    let apm = TrainConfig {
        use_unlabeled: true,
        teacher: TeacherMode::SelfPerHead,
        apm: true,
        apm_config: ApmConfig {
            epsilons: flat_eps,
            ..base.apm_config.clone()
        },
        fixed_thresholds: flat_fixed,
        ..base.clone()
    };
    let both = TrainConfig {
        use_unlabeled: true,
        teacher: TeacherMode::Ensemble,
        apm: true,
        ..base.clone()
    };
    vec![
        AblationVariant { name: "baseline".into(), cpl: false, apm: false, config: baseline },
        AblationVariant { name: "+CPL".into(), cpl: true, apm: false, config: cpl },
        AblationVariant { name: "+APM".into(), cpl: false, apm: true, config: apm },
        AblationVariant { name: "CPL+APM".into(), cpl: true, apm: true, config: both },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub cpl: bool,
    pub apm: bool,
    pub per_seed: Vec<HeldOutEval>,
    pub mean_overall: f64,
    pub mean_per_group: BTreeMap<ClassGroup, f64>,
    /// Mean audited teacher accuracy, when the variant uses unlabeled data.
    pub mean_teacher_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub grid: Vec<VariantResult>,
    /// CPL+APM without burn-in.
    pub no_burn_in: VariantResult,
    /// CPL+APM with self-teaching heads instead of the ensemble.
    pub self_teacher: VariantResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub world: ToyWorldConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            world: ToyWorldConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn summarize(name: &str, cpl: bool, apm: bool, runs: Vec<(HeldOutEval, Option<f64>)>) -> VariantResult {
    let n = runs.len().max(1) as f64;
    let mean_overall = runs.iter().map(|r| r.0.overall).sum::<f64>() / n;
    let mut groups: BTreeMap<ClassGroup, (f64, usize)> = BTreeMap::new();
    for (r, _) in &runs {
        for (g, v) in &r.per_group {
            let e = groups.entry(*g).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    let accs: Vec<f64> = runs.iter().filter_map(|r| r.1).collect();
    VariantResult {
        name: name.to_string(),
        cpl,
        apm,
        mean_overall,
        mean_per_group: groups.into_iter().map(|(g, (s, c))| (g, s / c as f64)).collect(),
        mean_teacher_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
        per_seed: runs.into_iter().map(|r| r.0).collect(),
    }
}

/// Runs one training configuration on the world of `seed`.
pub fn run_seed(config: &AblationConfig, train_config: &TrainConfig, seed: u64) -> Result<(HeldOutEval, Option<f64>), TrainError> {
    let mut wc = config.world.clone();
    wc.synthetic.seed = seed;
    let world = ToyWorld::build(&wc)?;
    let tc = TrainConfig { seed, ..train_config.clone() };
    let mut model = ToyModel::new(world.feature_dim, world.num_classes, world.stages, seed);
    let log = train(&mut model, &world, &tc)?;
    let acc = log.mean_teacher_accuracy();
    Ok((log.final_eval, acc))
}

/// Runs the CPL x APM grid plus the burn-in and teacher comparisons over all
/// seeds. Runs are independent and execute in parallel.
pub fn ablation_suite(config: &AblationConfig) -> Result<AblationReport, TrainError> {
    let mut variants = ablation_variants(&config.train);
    let both = variants[3].config.clone();
    variants.push(AblationVariant {
        name: "CPL+APM (no burn-in)".into(),
        cpl: true,
        apm: true,
        config: TrainConfig {
            burn_in_iters: Some(0),
            ..both.clone()
        },
    });
    variants.push(AblationVariant {
        name: "CPL+APM (self teacher)".into(),
        cpl: true,
        apm: true,
        config: TrainConfig {
            teacher: TeacherMode::SelfPerHead,
            ..both
        },
    });
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = par::map(&jobs, |&(v, s)| run_seed(config, &variants[v].config, s));
    let mut by_variant: Vec<Vec<(HeldOutEval, Option<f64>)>> = vec![Vec::new(); variants.len()];
    for ((v, _), r) in jobs.iter().zip(results) {
        by_variant[*v].push(r?);
    }
    let mut summaries: Vec<VariantResult> = variants
        .iter()
        .zip(by_variant)
        .map(|(v, runs)| summarize(&v.name, v.cpl, v.apm, runs))
        .collect();
    let self_teacher = summaries.pop().expect("self-teacher variant");
    let no_burn_in = summaries.pop().expect("no-burn-in variant");
    Ok(AblationReport {
        seeds: config.seeds.clone(),
        grid: summaries,
        no_burn_in,
        self_teacher,
    })
}

impl AblationReport {
    /// Markdown table with one row per CPL x APM cell.
    pub fn to_markdown(&self, groups: &[ClassGroup]) -> String {
        let mut s = String::from("| CPL | APM | Acc |");
        for g in groups {
            let _ = write!(s, " Acc_{} |", g.as_str());
        }
        s.push_str("\n|:---:|:---:|:---:|");
        for _ in groups {
            s.push_str(":---:|");
        }
        s.push('\n');
        let mark = |b: bool| if b { "✓" } else { "✗" };
        for r in &self.grid {
            let _ = write!(s, "| {} | {} | {:.1} |", mark(r.cpl), mark(r.apm), 100.0 * r.mean_overall);
            for g in groups {
                match r.mean_per_group.get(g) {
                    Some(v) => {
                        let _ = write!(s, " {:.1} |", 100.0 * v);
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_world(seed: u64) -> ToyWorld {
        let cfg = ToyWorldConfig {
            synthetic: SyntheticConfig {
                num_classes: 5,
                labeled_images: 20,
                seed,
                ..SyntheticConfig::default()
            },
            features: FeatureConfig {
                dim: 4,
                test_per_class: 5,
                ..FeatureConfig::default()
            },
        };
        ToyWorld::build(&cfg).unwrap()
    }

    #[test]
    fn probabilities_are_valid() {
        let w = tiny_world(1);
        let m = ToyModel::new(w.feature_dim, w.num_classes, w.stages, 1);
        for p in w.labeled.iter().take(10) {
            let views = w.views(p, 0);
            for k in 0..w.stages {
                let pr = m.probs(k, &views[k]);
                assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(pr.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let w = tiny_world(2);
        let mut m = ToyModel::new(w.feature_dim, w.num_classes, w.stages, 2);
        let mut v = m.params();
        v.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64);
        m.set_params(&v);
        assert_eq!(m.params(), v);
    }

    #[test]
    fn burn_in_must_fit() {
        let cfg = TrainConfig {
            burn_in_iters: Some(10),
            total_iters: 5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(3).is_err());
    }

    #[test]
    fn full_burn_in_never_uses_unlabeled() {
        let w = tiny_world(3);
        let mut m = ToyModel::new(w.feature_dim, w.num_classes, w.stages, 3);
        let cfg = TrainConfig {
            burn_in_iters: Some(50),
            total_iters: 50,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &w, &cfg).unwrap();
        assert!(log.iterations.iter().all(|r| r.retained.iter().all(|&n| n == 0)));
        assert!(log.iterations.iter().all(|r| r.losses.cls_unlabeled == 0.0));
    }

    #[test]
    fn lambda_zero_matches_supervised_run() {
        let w = tiny_world(4);
        let mut a = ToyModel::new(w.feature_dim, w.num_classes, w.stages, 4);
        let mut b = a.clone();
        let semi = TrainConfig {
            burn_in_iters: Some(10),
            total_iters: 80,
            loss: LossConfig {
                lambda_u: 0.0,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        };
        let sup = TrainConfig {
            use_unlabeled: false,
            ..semi.clone()
        };
        train(&mut a, &w, &semi).unwrap();
        train(&mut b, &w, &sup).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn runs_are_reproducible() {
        let w = tiny_world(5);
        let cfg = TrainConfig {
            burn_in_iters: Some(10),
            total_iters: 60,
            audit_every: 20,
            ..TrainConfig::default()
        };
        let mut a = ToyModel::new(w.feature_dim, w.num_classes, w.stages, 5);
        let mut b = a.clone();
        let la = train(&mut a, &w, &cfg).unwrap();
        let lb = train(&mut b, &w, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(la.iterations_csv(), lb.iterations_csv());
    }

    #[test]
    fn divergence_is_reported() {
        let w = tiny_world(6);
        let mut m = ToyModel::new(w.feature_dim, w.num_classes, w.stages, 6);
        let cfg = TrainConfig {
            learning_rate: 1e9,
            total_iters: 50,
            burn_in_iters: Some(0),
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut m, &w, &cfg), Err(TrainError::Diverged { .. })));
    }
}
