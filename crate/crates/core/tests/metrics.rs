use dwt_core::extract::{rank_instances, Instance, RankMode};
use dwt_core::metrics::{
    average_precision, default_thresholds, gt_instances, mean_weighted_coverage, ordering_study, GtInstance,
};
use dwt_core::LabelMap;
use proptest::prelude::*;

const W: usize = 10;
const H: usize = 8;

fn rect_labels(rects: &[(usize, usize, usize, usize, u32)]) -> LabelMap {
    let mut m = LabelMap::new(W, H);
    for &(r0, c0, rh, cw, id) in rects {
        for r in r0..(r0 + rh).min(H) {
            for c in c0..(c0 + cw).min(W) {
                m.set(r, c, id);
            }
        }
    }
    m
}

fn rects(max: usize) -> impl Strategy<Value = Vec<(usize, usize, usize, usize, u32)>> {
    prop::collection::vec((0..H, 0..W, 1..=5usize, 1..=6usize, 1u32..=5), 0..=max)
}

/// Disjoint predictions from a random label map; classes 1 or 2 by id parity.
fn predictions(labels: &LabelMap, scores: &[f64]) -> Vec<Instance> {
    labels
        .ids()
        .into_iter()
        .enumerate()
        .map(|(i, id)| Instance {
            mask: labels.mask_of(id),
            class_id: 1 + id % 2,
            confidence: scores[i % scores.len()],
            score: scores[i % scores.len()],
        })
        .collect()
}

fn ground_truth(labels: &LabelMap) -> Vec<GtInstance> {
    let semseg = LabelMap::from_vec(W, H, labels.data().iter().map(|&i| if i == 0 { 0 } else { 1 + i % 2 }).collect())
        .unwrap();
    gt_instances(labels, &semseg).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn with_order(preds: &[Instance], order: &[usize]) -> Vec<Instance> {
    let n = order.len() as f64;
    order
        .iter()
        .enumerate()
        .map(|(rank, &i)| Instance {
            score: n - rank as f64,
            ..preds[i].clone()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn oracle_ordering_beats_every_permutation(p in rects(6), g in rects(5)) {
        let preds = predictions(&rect_labels(&p), &[0.5]);
        prop_assume!(preds.len() <= 5);
        let gts = ground_truth(&rect_labels(&g));
        let th = default_thresholds();
        let oracle = rank_instances(&preds, RankMode::Oracle { gt: &gts });
        let best = average_precision(&[oracle], &[gts.clone()], &th).unwrap().mean_ap;
        for order in permutations(preds.len()) {
            let ap = average_precision(&[with_order(&preds, &order)], &[gts.clone()], &th).unwrap().mean_ap;
            prop_assert!(ap <= best + 1e-12, "permutation {order:?}: {ap} > oracle {best}");
        }
    }

    #[test]
    fn oracle_dominates_random_and_confidence(
        scenes in prop::collection::vec((rects(6), rects(5), prop::collection::vec(0.0f64..1.0, 1..6)), 1..4)
    ) {
        let preds: Vec<_> = scenes.iter().map(|(p, _, s)| predictions(&rect_labels(p), s)).collect();
        let gts: Vec<_> = scenes.iter().map(|(_, g, _)| ground_truth(&rect_labels(g))).collect();
        let study = ordering_study(&preds, &gts, &(0..10).collect::<Vec<_>>()).unwrap();
        for &r in &study.random_per_seed {
            prop_assert!(study.oracle >= r - 1e-12);
        }
        prop_assert!(study.oracle >= study.confidence - 1e-12);
        prop_assert!(study.random_std >= 0.0);
    }

    #[test]
    fn scores_lie_in_unit_interval(p in rects(6), g in rects(5), s in prop::collection::vec(0.0f64..1.0, 1..6)) {
        let preds = predictions(&rect_labels(&p), &s);
        let gts = ground_truth(&rect_labels(&g));
        let r = average_precision(&[preds.clone()], &[gts.clone()], &default_thresholds()).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.mean_ap) && (0.0..=1.0).contains(&r.ap50));
        let c = mean_weighted_coverage(&[preds], &[gts]).unwrap();
        prop_assert!((0.0..=1.0).contains(&c.mean));
    }

    #[test]
    fn ap_ignores_uniform_confidence_rescaling(
        p in rects(6), g in rects(5), s in prop::collection::vec(0.01f64..1.0, 1..6), scale in 0.01f64..100.0
    ) {
        let preds = predictions(&rect_labels(&p), &s);
        let scaled: Vec<_> = preds.iter().map(|i| Instance { score: i.score * scale, confidence: i.confidence * scale, ..i.clone() }).collect();
        let gts = ground_truth(&rect_labels(&g));
        let th = default_thresholds();
        let a = average_precision(&[preds], &[gts.clone()], &th).unwrap();
        let b = average_precision(&[scaled], &[gts], &th).unwrap();
        prop_assert_eq!(a.mean_ap, b.mean_ap);
        prop_assert_eq!(a.ap50, b.ap50);
    }

    #[test]
    fn coverage_ignores_prediction_order(p in rects(6), g in rects(5), seed in any::<u64>()) {
        let preds = predictions(&rect_labels(&p), &[0.5]);
        let gts = ground_truth(&rect_labels(&g));
        let shuffled = rank_instances(&preds, RankMode::Random { seed });
        let a = mean_weighted_coverage(&[preds], &[gts.clone()]).unwrap();
        let b = mean_weighted_coverage(&[shuffled], &[gts]).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn single_prediction_orderings_agree() {
    let labels = rect_labels(&[(0, 0, 4, 4, 1)]);
    let shifted = rect_labels(&[(1, 0, 4, 4, 1)]);
    let preds = vec![predictions(&shifted, &[0.3])];
    let gts = vec![ground_truth(&labels)];
    let study = ordering_study(&preds, &gts, &[1, 2, 3]).unwrap();
    assert!(study.random_per_seed.iter().all(|&r| r == study.oracle));
    assert_eq!(study.confidence, study.oracle);
    assert_eq!(study.random_std, 0.0);
}

#[test]
fn false_positive_first_halves_precision() {
    let gt = rect_labels(&[(0, 0, 3, 3, 1)]);
    let miss = rect_labels(&[(5, 5, 3, 3, 1)]);
    let fp = Instance {
        mask: miss.mask_of(1),
        class_id: 2,
        confidence: 0.9,
        score: 0.9,
    };
    let tp = Instance {
        mask: gt.mask_of(1),
        class_id: 2,
        confidence: 0.1,
        score: 0.1,
    };
    let gts = ground_truth(&gt);
    assert_eq!(gts[0].class_id, 2);
    let r = average_precision(&[vec![fp, tp]], &[gts], &[0.5]).unwrap();
    assert_eq!(r.ap50, 0.5);
}

#[test]
fn unmatched_gt_class_counts_as_zero() {
    let gt = rect_labels(&[(0, 0, 3, 3, 1), (4, 4, 3, 3, 2)]);
    let pred = Instance {
        mask: gt.mask_of(1),
        class_id: 2,
        confidence: 1.0,
        score: 1.0,
    };
    let r = average_precision(&[vec![pred]], &[ground_truth(&gt)], &default_thresholds()).unwrap();
    assert_eq!(r.per_class.len(), 2);
    assert_eq!(r.mean_ap, 0.5);
}
