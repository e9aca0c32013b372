//! Sparsely-annotated benchmark construction: per-category random annotation
//! erasure, class preservation statistics, and recovery of erased instances
//! by pseudo-labels.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cpl::PseudoLabel;
use crate::dataset::{Annotation, BBox, ClassGroup, DatasetBundle};
use crate::geometry::{greedy_match, ScoredBox};
use crate::rng::{streams, substream};

/// How the per-category removal count `ratio * n_c` is rounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountRounding {
    /// `floor(ratio * n_c)`. Never empties a category unless `ratio == 1`.
    Floor,
    /// `floor(ratio * n_c)` plus one more with probability equal to the
    /// fractional part, so the expected count is exactly `ratio * n_c`.
    #[default]
    Stochastic,
}

/// Removal count for a category of `n` annotations. `coin` is a uniform draw
/// in `[0, 1)` used only by [`CountRounding::Stochastic`].
pub fn removal_count(n: usize, ratio: f64, rounding: CountRounding, coin: f64) -> usize {
    let exact = ratio.clamp(0.0, 1.0) * n as f64;
    // absorb representation error such as 0.29 * 100 = 28.999999999999996
    let base = (exact + 1e-9).floor();
    let frac = (exact - base).max(0.0);
    let extra = match rounding {
        CountRounding::Floor => 0,
        CountRounding::Stochastic => usize::from(frac > 1e-9 && coin < frac),
    };
    (base as usize + extra).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureReport {
    pub ratio: f64,
    pub seed: u64,
    pub rounding: CountRounding,
    pub removed_ids: Vec<u64>,
    /// Erased annotations, kept as the recovery target.
    pub removed: Vec<Annotation>,
    /// Per category id: (annotations before, annotations removed).
    pub per_category: BTreeMap<u64, (usize, usize)>,
    /// Per group: fraction of classes that had annotations and still have at
    /// least one.
    pub preservation: BTreeMap<ClassGroup, f64>,
    /// Same fraction over all classes.
    pub preservation_overall: f64,
}

/// Removes a `ratio` share of every category's annotations uniformly at
/// random. Category groups are taken from the input bundle; instance counts
/// of the returned bundle are recomputed.
pub fn erase(
    bundle: &DatasetBundle,
    ratio: f64,
    seed: u64,
    rounding: CountRounding,
) -> (DatasetBundle, ErasureReport) {
    let mut by_cat: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, a) in bundle.annotations.iter().enumerate() {
        by_cat.entry(a.category_id).or_default().push(i);
    }
    let mut removed_idx: BTreeSet<usize> = BTreeSet::new();
    let mut per_category = BTreeMap::new();
    for (&cat, idxs) in &by_cat {
        let mut rng = substream(seed, streams::ERASURE, cat);
        let coin: f64 = rng.random();
        let m = removal_count(idxs.len(), ratio, rounding, coin);
        for j in sample(&mut rng, idxs.len(), m) {
            removed_idx.insert(idxs[j]);
        }
        per_category.insert(cat, (idxs.len(), m));
    }

    let removed: Vec<Annotation> = removed_idx.iter().map(|&i| bundle.annotations[i]).collect();
    let mut sparse = bundle.clone();
    sparse.annotations = bundle
        .annotations
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed_idx.contains(i))
        .map(|(_, a)| *a)
        .collect();
    sparse.recount();

    let mut groups: BTreeMap<ClassGroup, (usize, usize)> = BTreeMap::new();
    let (mut alive, mut total) = (0usize, 0usize);
    for c in &bundle.categories {
        let Some(&(n, m)) = per_category.get(&c.id) else {
            continue;
        };
        if n == 0 {
            continue;
        }
        let kept = usize::from(n > m);
        total += 1;
        alive += kept;
        if let Some(g) = c.group {
            let e = groups.entry(g).or_default();
            e.0 += kept;
            e.1 += 1;
        }
    }
    let report = ErasureReport {
        ratio,
        seed,
        rounding,
        removed_ids: removed.iter().map(|a| a.id).collect(),
        removed,
        per_category,
        preservation: groups
            .into_iter()
            .map(|(g, (a, t))| (g, a as f64 / t as f64))
            .collect(),
        preservation_overall: if total == 0 { 1.0 } else { alive as f64 / total as f64 },
    };
    (sparse, report)
}

/// Fraction of erased annotations recovered by a pseudo-label of the same
/// class at IoU `>= iou_threshold`, using greedy matching per image and class.
/// `class_of` maps a category id to the pseudo-label class index. Returns 1
/// when nothing was erased.
pub fn recovery_score(
    pseudo: &[PseudoLabel],
    erased: &[Annotation],
    class_of: impl Fn(u64) -> Option<usize>,
    iou_threshold: f64,
) -> f64 {
    if erased.is_empty() {
        return 1.0;
    }
    let mut cells: BTreeMap<(u64, usize), (Vec<ScoredBox>, Vec<BBox>)> = BTreeMap::new();
    for p in pseudo {
        cells
            .entry((p.image_id, p.class))
            .or_default()
            .0
            .push(ScoredBox {
                bbox: p.bbox,
                score: p.score,
            });
    }
    for a in erased {
        if let Some(c) = class_of(a.category_id) {
            cells.entry((a.image_id, c)).or_default().1.push(a.bbox);
        }
    }
    let recovered: usize = cells
        .values()
        .filter(|(d, g)| !d.is_empty() && !g.is_empty())
        .map(|(d, g)| greedy_match(d, g, iou_threshold).pairs.len())
        .sum();
    recovered as f64 / erased.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Category, ImageInfo, Split};

    fn bundle_with_counts(counts: &[usize]) -> DatasetBundle {
        let mut anns = Vec::new();
        let mut id = 0;
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                id += 1;
                let x = i as f64 * 10.0;
                anns.push(Annotation {
                    id,
                    image_id: 1,
                    category_id: c as u64 + 1,
                    bbox: BBox::new(x, 0.0, x + 5.0, 5.0).unwrap(),
                });
            }
        }
        let mut b = DatasetBundle {
            images: vec![ImageInfo { id: 1, width: 1e6, height: 1e6 }],
            annotations: anns,
            categories: (0..counts.len())
                .map(|c| Category {
                    id: c as u64 + 1,
                    name: String::new(),
                    instance_count: 0,
                    image_count: 0,
                    group: Some(ClassGroup::Rare),
                })
                .collect(),
            split: Split::Labeled,
        };
        b.recount();
        b
    }

    #[test]
    fn ratio_zero_keeps_everything() {
        let b = bundle_with_counts(&[3, 1, 7]);
        let (s, r) = erase(&b, 0.0, 1, CountRounding::Stochastic);
        assert_eq!(s.annotations, b.annotations);
        assert_eq!(r.preservation_overall, 1.0);
        assert_eq!(r.preservation[&ClassGroup::Rare], 1.0);
    }

    #[test]
    fn ratio_one_removes_everything() {
        let b = bundle_with_counts(&[3, 1, 7]);
        let (s, r) = erase(&b, 1.0, 1, CountRounding::Floor);
        assert!(s.annotations.is_empty());
        assert_eq!(r.removed.len(), 11);
        assert_eq!(r.preservation_overall, 0.0);
        // categories are kept even when emptied
        assert_eq!(s.categories.len(), 3);
    }

    #[test]
    fn ten_at_forty_percent_removes_four() {
        let b = bundle_with_counts(&[10]);
        for rounding in [CountRounding::Floor, CountRounding::Stochastic] {
            for seed in 0..20 {
                let (s, r) = erase(&b, 0.4, seed, rounding);
                assert_eq!(r.removed.len(), 4);
                assert_eq!(s.annotations.len(), 6);
            }
        }
    }

    #[test]
    fn removal_count_rounding() {
        assert_eq!(removal_count(100, 0.29, CountRounding::Floor, 0.0), 29);
        assert_eq!(removal_count(1, 0.4, CountRounding::Floor, 0.0), 0);
        assert_eq!(removal_count(1, 0.4, CountRounding::Stochastic, 0.39), 1);
        assert_eq!(removal_count(1, 0.4, CountRounding::Stochastic, 0.41), 0);
        assert_eq!(removal_count(5, 1.0, CountRounding::Stochastic, 0.0), 5);
    }

    #[test]
    fn erasure_is_deterministic() {
        let b = bundle_with_counts(&[9, 4, 13]);
        assert_eq!(
            erase(&b, 0.3, 5, CountRounding::Stochastic),
            erase(&b, 0.3, 5, CountRounding::Stochastic)
        );
    }

    #[test]
    fn recovery_examples() {
        let b = bundle_with_counts(&[2, 1]);
        let class_of = |id: u64| Some(id as usize - 1);
        let exact: Vec<PseudoLabel> = b
            .annotations
            .iter()
            .map(|a| PseudoLabel {
                image_id: a.image_id,
                class: a.category_id as usize - 1,
                bbox: a.bbox,
                score: 0.9,
            })
            .collect();
        assert_eq!(recovery_score(&exact, &b.annotations, class_of, 0.5), 1.0);
        assert_eq!(recovery_score(&[], &b.annotations, class_of, 0.5), 0.0);
        // right box, wrong class
        let wrong: Vec<_> = exact.iter().map(|p| PseudoLabel { class: 5, ..*p }).collect();
        assert_eq!(recovery_score(&wrong, &b.annotations, class_of, 0.5), 0.0);
    }
}
