//! Classification and box-regression losses, their analytic gradients, and
//! the composite labeled + gated-unlabeled objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpl::PseudoLabelSet;
use crate::dataset::BBox;
use crate::geometry::giou;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("target class {target} outside probability vector of length {len}")]
    TargetOutOfRange { target: usize, len: usize },
    #[error("alignment mismatch: {0}")]
    Alignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClsKind {
    #[default]
    CrossEntropy,
    Focal { alpha: f64, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    /// Smooth-L1 with beta = 1, summed over the four corners.
    #[default]
    SmoothL1,
    /// Mean absolute corner error plus `1 - giou`.
    L1PlusGiou,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsLoss {
    pub value: f64,
    /// The target probability was below [`PROB_FLOOR`] and got clamped.
    pub floored: bool,
}

fn focal_value(p: f64, alpha: f64, gamma: f64) -> f64 {
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

/// Loss of a probability vector against a target class.
pub fn cls_loss(probs: &[f64], target: usize, kind: ClsKind) -> Result<ClsLoss, LossError> {
    let p = *probs.get(target).ok_or(LossError::TargetOutOfRange {
        target,
        len: probs.len(),
    })?;
    let floored = p < PROB_FLOOR;
    let p = p.max(PROB_FLOOR).min(1.0);
    let value = match kind {
        ClsKind::CrossEntropy => -p.ln(),
        ClsKind::Focal { alpha, gamma } => focal_value(p, alpha, gamma),
    };
    // -ln(1) is -0.0
    Ok(ClsLoss {
        value: value.max(0.0),
        floored,
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits[i] - lse
}

/// Loss and gradient with respect to the logits of a softmax classifier.
pub fn cls_loss_logits(logits: &[f64], target: usize, kind: ClsKind) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let log_p = log_softmax_at(logits, target);
    let p = probs[target];
    match kind {
        ClsKind::CrossEntropy => {
            let mut g = probs;
            g[target] -= 1.0;
            (-log_p, g)
        }
        ClsKind::Focal { alpha, gamma } => {
            let q = 1.0 - p;
            let value = -alpha * q.powf(gamma) * log_p;
            // dL/dp, then chain through dp/dz_j = p (delta_tj - p_j)
            let pow_gm1 = if q > 0.0 { q.powf(gamma - 1.0) } else { 0.0 };
            let dl_dp = alpha * gamma * pow_gm1 * log_p - alpha * q.powf(gamma) / p;
            let g = probs
                .iter()
                .enumerate()
                .map(|(j, &pj)| {
                    let delta = if j == target { 1.0 } else { 0.0 };
                    dl_dp * p * (delta - pj)
                })
                .collect();
            (value, g)
        }
    }
}

fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Box regression loss of `pred` against `target`.
pub fn reg_loss(pred: &BBox, target: &BBox, kind: RegKind) -> f64 {
    let d = deltas(pred, target);
    match kind {
        RegKind::SmoothL1 => d.iter().map(|&x| smooth_l1(x)).sum(),
        RegKind::L1PlusGiou => {
            d.iter().map(|x| x.abs()).sum::<f64>() / 4.0 + (1.0 - giou(pred, target))
        }
    }
}

fn deltas(pred: &BBox, target: &BBox) -> [f64; 4] {
    let (p, t) = (pred.corners(), target.corners());
    [p[0] - t[0], p[1] - t[1], p[2] - t[2], p[3] - t[3]]
}

/// Gradient of [`reg_loss`] with respect to the predicted corners.
pub fn reg_loss_grad(pred: &BBox, target: &BBox, kind: RegKind) -> [f64; 4] {
    let d = deltas(pred, target);
    match kind {
        RegKind::SmoothL1 => d.map(smooth_l1_grad),
        RegKind::L1PlusGiou => {
            let gg = giou_grad(pred, target);
            let mut out = [0.0; 4];
            for i in 0..4 {
                let l1 = if d[i] == 0.0 { 0.0 } else { d[i].signum() / 4.0 };
                out[i] = l1 - gg[i];
            }
            out
        }
    }
}

/// Gradient of `giou(pred, target)` with respect to the predicted corners.
/// Follows the value exactly, including crossed predictions (clamped to zero
/// area). At coordinate ties the subgradient of the `pred` side is taken.
pub fn giou_grad(pred: &BBox, target: &BBox) -> [f64; 4] {
    let [x1, y1, x2, y2] = pred.corners();
    let [gx1, gy1, gx2, gy2] = target.corners();
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pred.area();
    let area_g = target.area();

    let iw = x2.min(gx2) - x1.max(gx1);
    let ih = y2.min(gy2) - y1.max(gy1);
    let overlap = iw > 0.0 && ih > 0.0;
    let inter = if overlap { iw * ih } else { 0.0 };
    let union = area_p + area_g - inter;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let hull = cw * ch;
    if hull <= 0.0 {
        return [0.0; 4];
    }

    let d_area = if pw > 0.0 && ph > 0.0 { [-ph, -pw, ph, pw] } else { [0.0; 4] };
    let d_inter = if overlap {
        [
            if x1 >= gx1 { -ih } else { 0.0 },
            if y1 >= gy1 { -iw } else { 0.0 },
            if x2 <= gx2 { ih } else { 0.0 },
            if y2 <= gy2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_hull = [
        if x1 <= gx1 { -ch } else { 0.0 },
        if y1 <= gy1 { -cw } else { 0.0 },
        if x2 >= gx2 { ch } else { 0.0 },
        if y2 >= gy2 { cw } else { 0.0 },
    ];
    let has_iou = area_p > 0.0 && area_g > 0.0 && union > 0.0;
    // giou = I/U - 1 + U/H
    let mut g = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        if has_iou {
            g[i] += d_inter[i] / union - inter * d_union / (union * union);
        }
        g[i] += d_union / hull - union * d_hull[i] / (hull * hull);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_labeled: f64,
    pub reg_labeled: f64,
    pub cls_unlabeled: f64,
    pub reg_unlabeled: f64,
    pub total: f64,
    pub lambda_u: f64,
}

impl LossBreakdown {
    pub fn new(cls_l: f64, reg_l: f64, cls_u: f64, reg_u: f64, lambda_u: f64) -> Self {
        LossBreakdown {
            cls_labeled: cls_l,
            reg_labeled: reg_l,
            cls_unlabeled: cls_u,
            reg_unlabeled: reg_u,
            total: cls_l + reg_l + lambda_u * (cls_u + reg_u),
            lambda_u,
        }
    }

    pub const CSV_HEADER: &'static str =
        "iteration,cls_labeled,reg_labeled,cls_unlabeled,reg_unlabeled,total";

    pub fn csv_row(&self, iteration: usize) -> String {
        format!(
            "{iteration},{},{},{},{},{}",
            self.cls_labeled, self.reg_labeled, self.cls_unlabeled, self.reg_unlabeled, self.total
        )
    }
}

/// One stage's prediction for one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePrediction {
    pub probs: Vec<f64>,
    pub bbox: BBox,
}

/// A labeled proposal: its ground truth and the K stage predictions.
/// `target_box` is `None` for background proposals, which carry no
/// regression term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTerm {
    pub target_class: usize,
    pub target_box: Option<BBox>,
    pub stages: Vec<StagePrediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub cls: ClsKind,
    pub reg: RegKind,
    pub lambda_u: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            cls: ClsKind::CrossEntropy,
            reg: RegKind::SmoothL1,
            lambda_u: 1.0,
        }
    }
}

/// Composite loss for one batch.
///
/// Every term sums over stages without weights. Labeled sums are divided by
/// the number of labeled proposals; unlabeled sums by the number of pseudo-set
/// entries (retained or not). Unlabeled terms only count stages whose gate
/// passed, with the teacher label and teacher box as targets.
/// `student[i][k]` is stage `k + 1`'s prediction for `pseudo.entries[i]`.
pub fn batch_losses(
    labeled: &[LabeledTerm],
    pseudo: &PseudoLabelSet,
    student: &[Vec<StagePrediction>],
    config: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    if student.len() != pseudo.entries.len() {
        return Err(LossError::Alignment(format!(
            "{} student rows for {} pseudo-label entries",
            student.len(),
            pseudo.entries.len()
        )));
    }
    let (mut cls_l, mut reg_l) = (0.0, 0.0);
    for (i, term) in labeled.iter().enumerate() {
        if term.stages.is_empty() {
            return Err(LossError::Alignment(format!("labeled term {i} has no stages")));
        }
        for s in &term.stages {
            cls_l += cls_loss(&s.probs, term.target_class, config.cls)?.value;
            if let Some(b) = &term.target_box {
                reg_l += reg_loss(&s.bbox, b, config.reg);
            }
        }
    }
    let (mut cls_u, mut reg_u) = (0.0, 0.0);
    for (i, (entry, preds)) in pseudo.entries.iter().zip(student).enumerate() {
        if preds.len() != entry.passes.len() {
            return Err(LossError::Alignment(format!(
                "entry {i}: {} stage predictions for {} stages",
                preds.len(),
                entry.passes.len()
            )));
        }
        for (pass, s) in entry.passes.iter().zip(preds) {
            if *pass {
                cls_u += cls_loss(&s.probs, entry.target.label, config.cls)?.value;
                reg_u += reg_loss(&s.bbox, &entry.target.bbox, config.reg);
            }
        }
    }
    let nl = labeled.len().max(1) as f64;
    let nu = pseudo.entries.len().max(1) as f64;
    Ok(LossBreakdown::new(
        cls_l / nl,
        reg_l / nl,
        cls_u / nu,
        reg_u / nu,
        config.lambda_u,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        for kind in [ClsKind::CrossEntropy, ClsKind::Focal { alpha: 0.25, gamma: 2.0 }] {
            assert_eq!(cls_loss(&[1.0, 0.0], 0, kind).unwrap().value, 0.0);
        }
        let x = b(1., 2., 3., 4.);
        assert_eq!(reg_loss(&x, &x, RegKind::SmoothL1), 0.0);
        assert_eq!(reg_loss(&x, &x, RegKind::L1PlusGiou), 0.0);
    }

    #[test]
    fn cross_entropy_half() {
        let v = cls_loss(&[0.5, 0.5], 0, ClsKind::CrossEntropy).unwrap().value;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_example() {
        let v = cls_loss(&[0.9, 0.1], 0, ClsKind::Focal { alpha: 0.25, gamma: 2.0 })
            .unwrap()
            .value;
        let expected = 0.25 * 0.1f64.powi(2) * -(0.9f64.ln());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn zero_probability_is_floored() {
        let l = cls_loss(&[0.0, 1.0], 0, ClsKind::CrossEntropy).unwrap();
        assert!(l.floored);
        assert!((l.value - -(PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(cls_loss(&[1.0], 3, ClsKind::CrossEntropy).is_err());
    }

    #[test]
    fn smooth_l1_quadratic_branch() {
        let v = reg_loss(&b(0.5, 0.5, 1.5, 1.5), &b(0., 0., 1., 1.), RegKind::SmoothL1);
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn l1_plus_giou_disjoint() {
        let v = reg_loss(&b(0., 0., 1., 1.), &b(1., 1., 2., 2.), RegKind::L1PlusGiou);
        assert!((v - 2.5).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_supervised_only() {
        let l = LossBreakdown::new(1.0, 2.0, 3.0, 4.0, 0.0);
        assert_eq!(l.total, 3.0);
        let l = LossBreakdown::new(1.0, 2.0, 3.0, 4.0, 0.5);
        assert_eq!(l.total, 6.5);
    }

    #[test]
    fn batch_alignment_error() {
        let set = PseudoLabelSet {
            stages: 3,
            entries: vec![],
        };
        let student = vec![vec![]];
        assert!(batch_losses(&[], &set, &student, &LossConfig::default()).is_err());
    }
}
