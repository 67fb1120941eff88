//! Detection, proposal and REC metrics.
//!
//! AP uses 101-point interpolation of the precision envelope; matching is
//! greedy by descending score, each ground truth used at most once, the
//! highest-IoU unmatched ground truth winning (ties by ground-truth order).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, rank_order};
use crate::{BBox, ScoredBox};

/// Number of recall points sampled by interpolated AP.
pub const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub iou_thresh: f64,
    pub per_class: BTreeMap<String, f64>,
    pub mean: f64,
    pub counts: Counts,
}

/// Greedy matching of score-ranked detections against ground truths.
/// Returns one TP flag per detection, in the ranked order.
fn greedy_match(ranked: &[(BBox, &str)], gts: &HashMap<&str, Vec<BBox>>, thr: f64) -> Vec<bool> {
    let mut used: HashMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    ranked
        .iter()
        .map(|(b, img)| {
            let Some(cands) = gts.get(img) else { return false };
            let used = used.get_mut(img).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in cands.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let v = iou(b, g);
                if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from ranked TP flags.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / RECALL_POINTS as f64
}

/// Per-class and mean AP at one IoU threshold. Classes without ground truth
/// are skipped; detections keep input order among equal scores.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> ApReport {
    let mut gt_by_class: BTreeMap<&str, HashMap<&str, Vec<BBox>>> = BTreeMap::new();
    for g in gts {
        gt_by_class.entry(&g.class).or_default().entry(&g.image_id).or_default().push(g.bbox);
    }
    let mut per_class = BTreeMap::new();
    let mut counts = Counts::default();
    for (class, by_image) in &gt_by_class {
        let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class == *class).collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        let pairs: Vec<(BBox, &str)> = ranked.iter().map(|d| (d.bbox, d.image_id.as_str())).collect();
        let tp = greedy_match(&pairs, by_image, iou_thresh);
        let n_gt: usize = by_image.values().map(Vec::len).sum();
        let n_tp = tp.iter().filter(|&&t| t).count();
        counts.tp += n_tp;
        counts.fp += tp.len() - n_tp;
        counts.fn_ += n_gt - n_tp;
        per_class.insert(class.to_string(), interpolated_ap(&tp, n_gt));
    }
    let mean = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
    ApReport { iou_thresh, per_class, mean, counts }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub ar50: f64,
    pub ar_avg: f64,
}

/// Fraction of ground truths matched per IoU threshold by the top-`k`
/// proposals of each image.
pub fn recall_curve(
    proposals: &BTreeMap<String, Vec<ScoredBox>>,
    gts: &BTreeMap<String, Vec<BBox>>,
    k: usize,
    thresholds: &[f64],
) -> Vec<f64> {
    let total: usize = gts.values().map(Vec::len).sum();
    if total == 0 {
        return vec![0.0; thresholds.len()];
    }
    let mut matched = vec![0usize; thresholds.len()];
    for (img, g) in gts {
        let Some(props) = proposals.get(img) else { continue };
        let mut ranked = props.clone();
        ranked.sort_by(rank_order);
        ranked.truncate(k);
        let pairs: Vec<(BBox, &str)> = ranked.iter().map(|p| (p.bbox, img.as_str())).collect();
        let one: HashMap<&str, Vec<BBox>> = HashMap::from([(img.as_str(), g.clone())]);
        for (ti, &t) in thresholds.iter().enumerate() {
            matched[ti] += greedy_match(&pairs, &one, t).iter().filter(|&&m| m).count();
        }
    }
    matched.iter().map(|&m| m as f64 / total as f64).collect()
}

/// AR@k at IoU 0.5 and averaged over 0.50:0.05:0.95.
pub fn average_recall(
    proposals: &BTreeMap<String, Vec<ScoredBox>>,
    gts: &BTreeMap<String, Vec<BBox>>,
    k: usize,
) -> RecallAtK {
    let curve = recall_curve(proposals, gts, k, &coco_iou_thresholds());
    RecallAtK { ar50: curve[0], ar_avg: curve.iter().sum::<f64>() / curve.len() as f64 }
}

/// Fraction of tasks whose prediction overlaps its single ground truth at
/// `iou_thresh` or more. Tasks without a prediction count as misses.
pub fn top1_accuracy(
    predictions: &BTreeMap<String, ScoredBox>,
    gts: &BTreeMap<String, BBox>,
    iou_thresh: f64,
) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let hits = gts
        .iter()
        .filter(|(task, g)| predictions.get(*task).is_some_and(|p| iou(&p.bbox, g) >= iou_thresh))
        .count();
    hits as f64 / gts.len() as f64
}

/// Metric bundle shared by the evaluation commands. Serializes with stable key order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<ApReport>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub ar: BTreeMap<usize, RecallAtK>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub extra: BTreeMap<String, f64>,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        Rect::new(x1, y1, x2, y2).unwrap()
    }

    fn det(img: &str, class: &str, bbox: BBox, score: f64) -> Detection {
        Detection { image_id: img.into(), class: class.into(), bbox, score }
    }

    fn gt(img: &str, class: &str, bbox: BBox) -> GroundTruth {
        GroundTruth { image_id: img.into(), class: class.into(), bbox }
    }

    #[test]
    fn perfect_predictions_give_unit_ap() {
        let gts = vec![gt("a", "cat", b(0., 0., 2., 2.)), gt("a", "dog", b(5., 5., 8., 8.)), gt("b", "cat", b(1., 1., 3., 3.))];
        let dets: Vec<Detection> =
            gts.iter().enumerate().map(|(i, g)| det(&g.image_id, &g.class, g.bbox, 0.9 - 0.1 * i as f64)).collect();
        let r = average_precision(&dets, &gts, 0.5);
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.counts, Counts { tp: 3, fp: 0, fn_: 0 });
    }

    #[test]
    fn low_iou_prediction_scores_zero() {
        let gts = vec![gt("a", "cat", b(0., 0., 10., 10.))];
        // IoU 0.4
        let d = det("a", "cat", b(0., 0., 10., 4.), 0.9);
        assert!((iou(&d.bbox, &gts[0].bbox) - 0.4).abs() < 1e-12);
        assert_eq!(average_precision(&[d], &gts, 0.5).mean, 0.0);
    }

    #[test]
    fn worked_tp_fp_tp_example() {
        let gts = vec![gt("a", "c", b(0., 0., 1., 1.)), gt("a", "c", b(5., 5., 6., 6.))];
        let dets = vec![
            det("a", "c", b(0., 0., 1., 1.), 0.9),
            det("a", "c", b(20., 20., 21., 21.), 0.8),
            det("a", "c", b(5., 5., 6., 6.), 0.7),
        ];
        let r = average_precision(&dets, &gts, 0.5);
        let expected = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((r.mean - expected).abs() < 1e-12);
        assert!((r.mean - 0.834_98).abs() < 1e-5);
    }

    #[test]
    fn classes_without_gt_are_skipped() {
        let gts = vec![gt("a", "cat", b(0., 0., 2., 2.))];
        let dets = vec![det("a", "cat", b(0., 0., 2., 2.), 0.9), det("a", "bus", b(0., 0., 2., 2.), 0.9)];
        let r = average_precision(&dets, &gts, 0.5);
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn recall_cases() {
        let mut gts = BTreeMap::new();
        gts.insert("a".to_string(), vec![b(0., 0., 2., 2.), b(4., 4., 6., 6.)]);
        let mut props = BTreeMap::new();
        props.insert("a".to_string(), gts["a"].iter().map(|&g| ScoredBox::new(g, 0.5)).collect::<Vec<_>>());
        assert_eq!(average_recall(&props, &gts, 2), RecallAtK { ar50: 1.0, ar_avg: 1.0 });
        assert_eq!(average_recall(&BTreeMap::new(), &gts, 2), RecallAtK { ar50: 0.0, ar_avg: 0.0 });
    }

    #[test]
    fn top1_cases() {
        let g = b(0., 0., 10., 10.);
        let mut gts = BTreeMap::new();
        let mut preds = BTreeMap::new();
        // IoUs 0.9, 0.51, 0.49, 0.0 via shrinking height
        for (t, h) in [("t1", 9.0), ("t2", 5.1), ("t3", 4.9)] {
            gts.insert(t.to_string(), g);
            preds.insert(t.to_string(), ScoredBox::new(b(0., 0., 10., h), 1.0));
        }
        gts.insert("t4".into(), g);
        preds.insert("t4".into(), ScoredBox::new(b(50., 50., 60., 60.), 1.0));
        assert!((top1_accuracy(&preds, &gts, 0.5) - 0.5).abs() < 1e-15);
        preds.remove("t1");
        assert!((top1_accuracy(&preds, &gts, 0.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn report_json_is_stable() {
        let mut r = EvalReport { seed: 3, ..Default::default() };
        r.ar.insert(300, RecallAtK { ar50: 1.0, ar_avg: 0.5 });
        r.ar.insert(100, RecallAtK { ar50: 0.5, ar_avg: 0.25 });
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"ar":{"100":{"ar50":0.5,"ar_avg":0.25},"300":{"ar50":1.0,"ar_avg":0.5}},"seed":3}"#);
    }
}
