//! Instance segmentation scoring: IoU, average precision over IoU thresholds
//! 0.50..0.95, mean weighted coverage, and the ranking study comparing
//! random, confidence and oracle orderings of the same masks.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::extract::{rank_instances, Instance, RankMode};
use crate::grid::{ensure_same_dims, LabelMap, Mask, VectorField};

/// A ground-truth instance with its semantic class.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub id: u32,
    pub class_id: u32,
    pub mask: Mask,
}

impl GtInstance {
    pub fn area(&self) -> usize {
        self.mask.count()
    }
}

/// Splits an instance map into per-instance masks. Each instance's class is
/// the most frequent nonzero `semseg` value under it (ties to the smaller
/// class id).
pub fn gt_instances(instances: &LabelMap, semseg: &LabelMap) -> Result<Vec<GtInstance>> {
    ensure_same_dims(instances, semseg, "gt_instances")?;
    let mut votes: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&i, &s) in instances.data().iter().zip(semseg.data()) {
        if i != 0 && s != 0 {
            *votes.entry(i).or_default().entry(s).or_default() += 1;
        }
    }
    Ok(instances
        .ids()
        .into_iter()
        .map(|id| {
            let class_id = votes
                .get(&id)
                .and_then(|v| v.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))))
                .map_or(0, |(&c, _)| c);
            GtInstance {
                id,
                class_id,
                mask: instances.mask_of(id),
            }
        })
        .collect())
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    ensure_same_dims(a, b, "iou")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// 0.50, 0.55, ..., 0.95 computed from integer percentages so 0.6 is exactly
/// the double nearest 0.6.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Outcome of one prediction at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub image: usize,
    /// Index into that image's prediction list.
    pub prediction: usize,
    /// Index into that image's ground-truth list when matched.
    pub gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class_id: u32,
    pub gt_count: usize,
    pub prediction_count: usize,
    /// AP at each threshold.
    pub ap_per_threshold: Vec<f64>,
    /// Mean over thresholds.
    pub ap: f64,
    /// `(recall, precision)` after each prediction in sweep order, per threshold.
    pub pr_curves: Vec<Vec<(f64, f64)>>,
    /// Sweep-order assignments, per threshold.
    pub assignments: Vec<Vec<Assignment>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground-truth instance.
    pub per_class: Vec<ClassAp>,
    pub mean_ap: f64,
    pub ap50: f64,
}

/// Area under the all-point interpolated precision/recall curve.
fn area_under_pr(tp_flags: &[bool], gt_count: usize) -> (f64, Vec<(f64, f64)>) {
    let mut curve = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / gt_count as f64, tp as f64 / (i + 1) as f64));
    }
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(recall, _), &p) in curve.iter().zip(&envelope) {
        ap += (recall - prev_recall) * p;
        prev_recall = recall;
    }
    (ap, curve)
}

/// Cityscapes-style AP with a declared matching rule.
///
/// Per class and threshold, predictions from all images are swept in
/// descending `score` (ties by image, then position). Each takes the
/// unmatched same-class ground truth of highest IoU in its image when that
/// IoU reaches the threshold (true positive), otherwise it is a false
/// positive.
pub fn average_precision(
    predictions: &[Vec<Instance>],
    ground_truth: &[Vec<GtInstance>],
    thresholds: &[f64],
) -> Result<ApReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Dimension(format!(
            "{} prediction sets vs {} ground-truth sets",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let classes: BTreeSet<u32> = ground_truth
        .iter()
        .flatten()
        .map(|g| g.class_id)
        .collect();

    let mut per_class = Vec::new();
    for &class_id in &classes {
        let gt_count = ground_truth
            .iter()
            .flatten()
            .filter(|g| g.class_id == class_id)
            .count();

        // (score, image, position, ious vs that image's GT list; None for other classes)
        let mut sweep: Vec<(f64, usize, usize, Vec<Option<f64>>)> = Vec::new();
        for (img, (preds, gts)) in predictions.iter().zip(ground_truth).enumerate() {
            for (pos, p) in preds.iter().enumerate() {
                if p.class_id != class_id {
                    continue;
                }
                let ious = gts
                    .iter()
                    .map(|g| {
                        (g.class_id == class_id)
                            .then(|| iou(&p.mask, &g.mask))
                            .transpose()
                    })
                    .collect::<Result<Vec<_>>>()?;
                sweep.push((p.score, img, pos, ious));
            }
        }
        sweep.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut ap_per_threshold = Vec::with_capacity(thresholds.len());
        let mut pr_curves = Vec::with_capacity(thresholds.len());
        let mut assignments = Vec::with_capacity(thresholds.len());
        for &tau in thresholds {
            let mut matched: Vec<Vec<bool>> =
                ground_truth.iter().map(|g| vec![false; g.len()]).collect();
            let mut flags = Vec::with_capacity(sweep.len());
            let mut assigned = Vec::with_capacity(sweep.len());
            for (_, img, pos, ious) in &sweep {
                let mut best: Option<(usize, f64)> = None;
                for (gi, v) in ious.iter().enumerate() {
                    if let Some(v) = v {
                        if !matched[*img][gi] && best.is_none_or(|(_, b)| *v > b) {
                            best = Some((gi, *v));
                        }
                    }
                }
                let hit = best.filter(|&(_, v)| v >= tau).map(|(gi, _)| gi);
                if let Some(gi) = hit {
                    matched[*img][gi] = true;
                }
                flags.push(hit.is_some());
                assigned.push(Assignment {
                    image: *img,
                    prediction: *pos,
                    gt: hit,
                });
            }
            let (ap, curve) = area_under_pr(&flags, gt_count);
            ap_per_threshold.push(ap);
            pr_curves.push(curve);
            assignments.push(assigned);
        }
        let ap = if thresholds.is_empty() {
            0.0
        } else {
            ap_per_threshold.iter().sum::<f64>() / thresholds.len() as f64
        };
        per_class.push(ClassAp {
            class_id,
            gt_count,
            prediction_count: sweep.len(),
            ap_per_threshold,
            ap,
            pr_curves,
            assignments,
        });
    }

    let mean = |f: &dyn Fn(&ClassAp) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    let ap50_index = thresholds.iter().position(|&t| t == 0.5);
    let mean_ap = mean(&|c| c.ap);
    let ap50 = match ap50_index {
        Some(i) => mean(&|c| c.ap_per_threshold[i]),
        None => 0.0,
    };
    Ok(ApReport {
        thresholds: thresholds.to_vec(),
        per_class,
        mean_ap,
        ap50,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    /// `None` for images without ground-truth instances.
    pub per_image: Vec<Option<f64>>,
    pub mean: f64,
}

/// Size-weighted best-IoU coverage of ground-truth instances, averaged over
/// images that have ground truth.
pub fn mean_weighted_coverage(
    predictions: &[Vec<Instance>],
    ground_truth: &[Vec<GtInstance>],
) -> Result<CoverageReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Dimension(format!(
            "{} prediction sets vs {} ground-truth sets",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut per_image = Vec::with_capacity(predictions.len());
    for (preds, gts) in predictions.iter().zip(ground_truth) {
        let total: usize = gts.iter().map(GtInstance::area).sum();
        if gts.is_empty() || total == 0 {
            per_image.push(None);
            continue;
        }
        let mut cov = 0.0;
        for g in gts {
            let mut best = 0.0f64;
            for p in preds {
                best = best.max(iou(&g.mask, &p.mask)?);
            }
            cov += g.area() as f64 / total as f64 * best;
        }
        per_image.push(Some(cov));
    }
    let scored: Vec<f64> = per_image.iter().flatten().copied().collect();
    let mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(CoverageReport { per_image, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingStudy {
    pub random_per_seed: Vec<f64>,
    pub random_mean: f64,
    pub random_std: f64,
    pub confidence: f64,
    pub oracle: f64,
}

fn ordered_map<'a>(
    predictions: &[Vec<Instance>],
    ground_truth: &'a [Vec<GtInstance>],
    mode_for: impl Fn(usize) -> RankMode<'a>,
) -> Result<f64> {
    let ranked: Vec<Vec<Instance>> = predictions
        .iter()
        .enumerate()
        .map(|(i, p)| rank_instances(p, mode_for(i)))
        .collect();
    Ok(average_precision(&ranked, ground_truth, &default_thresholds())?.mean_ap)
}

/// Mean AP of identical masks under random (one run per seed), confidence and
/// oracle orderings.
pub fn ordering_study(
    predictions: &[Vec<Instance>],
    ground_truth: &[Vec<GtInstance>],
    seeds: &[u64],
) -> Result<OrderingStudy> {
    let mut random_per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        random_per_seed.push(ordered_map(predictions, ground_truth, |i| RankMode::Random {
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        })?);
    }
    let n = random_per_seed.len().max(1) as f64;
    let random_mean = random_per_seed.iter().sum::<f64>() / n;
    let random_std =
        (random_per_seed.iter().map(|v| (v - random_mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(OrderingStudy {
        random_per_seed,
        random_mean,
        random_std,
        confidence: ordered_map(predictions, ground_truth, |_| RankMode::Confidence)?,
        oracle: ordered_map(predictions, ground_truth, |i| RankMode::Oracle {
            gt: &ground_truth[i],
        })?,
    })
}

/// Fraction of pixels (optionally restricted to `within`) whose bins agree.
pub fn bin_accuracy(pred: &LabelMap, gt: &LabelMap, within: Option<&Mask>) -> Result<(usize, usize)> {
    ensure_same_dims(pred, gt, "bin_accuracy")?;
    let mut correct = 0;
    let mut total = 0;
    for (i, (&a, &b)) in pred.data().iter().zip(gt.data()).enumerate() {
        if within.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        total += 1;
        correct += (a == b) as usize;
    }
    Ok((correct, total))
}

/// Sum of angular errors in degrees and pixel count over `within`.
pub fn angular_error_sum(pred: &VectorField, gt: &VectorField, within: &Mask) -> Result<(f64, usize)> {
    ensure_same_dims(pred, gt, "angular_error")?;
    ensure_same_dims(pred, within, "angular_error mask")?;
    let mut sum = 0.0;
    let mut n = 0;
    for r in 0..pred.height() {
        for c in 0..pred.width() {
            if !within.get(r, c) {
                continue;
            }
            let (a0, a1) = pred.get(r, c);
            let (b0, b1) = gt.get(r, c);
            let na = (a0 * a0 + a1 * a1).sqrt();
            let nb = (b0 * b0 + b1 * b1).sqrt();
            let cos = if na > 0.0 && nb > 0.0 {
                ((a0 * b0 + a1 * b1) / (na * nb)).clamp(-1.0, 1.0)
            } else {
                -1.0
            };
            sum += cos.acos().to_degrees();
            n += 1;
        }
    }
    Ok((sum, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(w: usize, h: usize, r0: usize, c0: usize, rh: usize, cw: usize) -> Mask {
        let mut m = Mask::new(w, h);
        for r in r0..r0 + rh {
            for c in c0..c0 + cw {
                m.set(r, c, true);
            }
        }
        m
    }

    fn pred(mask: Mask, score: f64) -> Instance {
        Instance {
            mask,
            class_id: 1,
            confidence: score,
            score,
        }
    }

    fn gt(mask: Mask) -> GtInstance {
        GtInstance {
            id: 1,
            class_id: 1,
            mask,
        }
    }

    #[test]
    fn iou_cases() {
        let a = block(4, 4, 0, 0, 2, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &block(4, 4, 2, 2, 2, 2)).unwrap(), 0.0);
        assert_eq!(iou(&a, &block(4, 4, 0, 1, 2, 2)).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&Mask::new(2, 2), &Mask::new(2, 2)).unwrap(), 0.0);
        assert!(iou(&a, &Mask::new(3, 3)).is_err());
    }

    #[test]
    fn perfect_match_scores_one() {
        let g = block(8, 8, 1, 1, 4, 4);
        let r = average_precision(&[vec![pred(g.clone(), 0.5)]], &[vec![gt(g)]], &default_thresholds())
            .unwrap();
        assert_eq!(r.mean_ap, 1.0);
        assert_eq!(r.ap50, 1.0);
    }

    #[test]
    fn iou_point_six_scores_point_three() {
        // 3 shared pixels out of a 5-pixel union.
        let g = block(10, 1, 0, 0, 1, 4);
        let p = block(10, 1, 0, 1, 1, 4);
        assert_eq!(iou(&g, &p).unwrap(), 0.6);
        let r = average_precision(&[vec![pred(p, 0.9)]], &[vec![gt(g)]], &default_thresholds())
            .unwrap();
        assert_eq!(
            r.per_class[0].ap_per_threshold,
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(r.mean_ap, 0.3);
    }

    #[test]
    fn true_positive_before_false_positive() {
        let g = block(8, 8, 0, 0, 3, 3);
        let miss = block(8, 8, 5, 5, 3, 3);
        let r = average_precision(
            &[vec![pred(g.clone(), 0.9), pred(miss, 0.8)]],
            &[vec![gt(g)]],
            &[0.5],
        )
        .unwrap();
        assert_eq!(r.ap50, 1.0);
    }

    #[test]
    fn coverage_weighted_by_area() {
        // GT areas 100 and 300; best IoUs 0.5 and 1.0.
        let g1 = block(40, 40, 0, 0, 10, 10);
        let g2 = block(40, 40, 20, 0, 10, 30);
        let p1 = block(40, 40, 0, 0, 5, 10);
        let report = mean_weighted_coverage(
            &[vec![pred(p1, 0.5), pred(g2.clone(), 0.5)]],
            &[vec![gt(g1), gt(g2)]],
        )
        .unwrap();
        assert_eq!(report.mean, 0.875);
    }

    #[test]
    fn coverage_without_predictions_is_zero() {
        let g = block(4, 4, 0, 0, 2, 2);
        let report = mean_weighted_coverage(&[vec![]], &[vec![gt(g)]]).unwrap();
        assert_eq!(report.mean, 0.0);
        let empty = mean_weighted_coverage(&[vec![]], &[vec![]]).unwrap();
        assert_eq!(empty.per_image, vec![None]);
    }

    #[test]
    fn gt_instance_class_by_majority() {
        let inst = LabelMap::from_vec(3, 1, vec![4, 4, 4]).unwrap();
        let sem = LabelMap::from_vec(3, 1, vec![2, 1, 2]).unwrap();
        let g = gt_instances(&inst, &sem).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].class_id, 2);
        assert_eq!(g[0].id, 4);
    }
}
