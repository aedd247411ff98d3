//! Detection evaluation: NMS, COCO-style average precision and duplicate rate.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::matchcost::{GroundTruth, Prediction};
use crate::{Error, Result};

pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;
const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// One detection per prediction: its highest-probability class, kept if that
/// probability reaches `score_threshold`.
pub fn detections_from_predictions(scene_id: u64, preds: &[Prediction], score_threshold: f64) -> Vec<Detection> {
    preds
        .iter()
        .filter_map(|p| {
            let (class_id, &score) = p
                .class_probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
            (score >= score_threshold).then_some(Detection {
                scene_id,
                class_id,
                score,
                bbox: p.bbox,
            })
        })
        .collect()
}

/// Indices sorted by descending score, ties broken by input position.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy per-scene, per-class suppression. A detection is kept if its IoU
/// with every previously kept detection of the same scene and class is
/// below `iou_threshold`. Output is in descending score order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    let mut by_key: HashMap<(u64, usize), Vec<usize>> = HashMap::new();
    for i in score_order(dets) {
        let d = dets[i];
        let bucket = by_key.entry((d.scene_id, d.class_id)).or_default();
        if bucket.iter().all(|&k| iou(&kept[k].bbox, &d.bbox) < iou_threshold) {
            bucket.push(kept.len());
            kept.push(d);
        }
    }
    kept
}

/// `0.5, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// 101-point interpolated AP from detections already sorted by descending
/// score, given as true/false-positive flags.
pub fn interpolated_ap(tp: &[bool], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gts as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < r - 1e-12);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    /// AP per class averaged over thresholds; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// `ap[class][threshold]`; `None` for classes without ground truth.
    pub per_class_threshold: Vec<Option<Vec<f64>>>,
    /// Mean over evaluated classes and thresholds.
    pub map: f64,
    /// Mean over evaluated classes at the first threshold.
    pub map_first: f64,
}

/// Class AP at one IoU threshold. `dets` must all be of one class; `gts`
/// maps scene id to that class's ground-truth boxes.
fn class_ap(dets: &[Detection], gts: &HashMap<u64, Vec<BBox>>, num_gts: usize, threshold: f64) -> f64 {
    let mut used: HashMap<u64, Vec<bool>> = gts.iter().map(|(&s, b)| (s, vec![false; b.len()])).collect();
    let tp: Vec<bool> = score_order(dets)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let Some(boxes) = gts.get(&d.scene_id) else {
                return false;
            };
            let flags = used.get_mut(&d.scene_id).expect("same keys");
            let best = boxes
                .iter()
                .enumerate()
                .filter(|(j, _)| !flags[*j])
                .map(|(j, b)| (j, iou(&d.bbox, b)))
                .filter(|&(_, v)| v >= threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    flags[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    interpolated_ap(&tp, num_gts)
}

/// Per-class and mean AP. `gts` lists every ground truth with its scene id.
pub fn average_precision(
    dets: &[Detection],
    gts: &[(u64, GroundTruth)],
    thresholds: &[f64],
    classes: usize,
) -> Result<ApReport> {
    if thresholds.is_empty() {
        return Err(Error::Invalid("at least one IoU threshold is required".into()));
    }
    if let Some(d) = dets.iter().find(|d| d.class_id >= classes) {
        return Err(Error::OutOfRange {
            what: "classes",
            index: d.class_id,
            len: classes,
        });
    }
    if let Some((_, g)) = gts.iter().find(|(_, g)| g.class_id >= classes) {
        return Err(Error::OutOfRange {
            what: "classes",
            index: g.class_id,
            len: classes,
        });
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut per_class_threshold = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut class_gts: HashMap<u64, Vec<BBox>> = HashMap::new();
        for (s, g) in gts.iter().filter(|(_, g)| g.class_id == c) {
            class_gts.entry(*s).or_default().push(g.bbox);
        }
        let num_gts: usize = class_gts.values().map(Vec::len).sum();
        if num_gts == 0 {
            log::debug!("class {c} has no ground truth; excluded from the mean");
            per_class.push(None);
            per_class_threshold.push(None);
            continue;
        }
        let class_dets: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| class_ap(&class_dets, &class_gts, num_gts, t))
            .collect();
        per_class.push(Some(aps.iter().sum::<f64>() / aps.len() as f64));
        per_class_threshold.push(Some(aps));
    }
    let evaluated: Vec<&Vec<f64>> = per_class_threshold.iter().flatten().collect();
    let (map, map_first) = if evaluated.is_empty() {
        (0.0, 0.0)
    } else {
        let n = evaluated.len() as f64;
        (
            evaluated
                .iter()
                .map(|a| a.iter().sum::<f64>() / a.len() as f64)
                .sum::<f64>()
                / n,
            evaluated.iter().map(|a| a[0]).sum::<f64>() / n,
        )
    };
    Ok(ApReport {
        thresholds: thresholds.to_vec(),
        per_class,
        per_class_threshold,
        map,
        map_first,
    })
}

/// Fraction of detections scoring at least `score_threshold` that NMS removes.
pub fn duplicate_rate(dets: &[Detection], score_threshold: f64, iou_threshold: f64) -> f64 {
    let above: Vec<Detection> = dets.iter().filter(|d| d.score >= score_threshold).copied().collect();
    if above.is_empty() {
        return 0.0;
    }
    let kept = nms(&above, iou_threshold).len();
    (above.len() - kept) as f64 / above.len() as f64
}

pub const DETECTION_HEADER: [&str; 7] = ["scene_id", "class_id", "score", "cx", "cy", "w", "h"];

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DETECTION_HEADER)?;
    for d in dets {
        w.write_record([
            d.scene_id.to_string(),
            d.class_id.to_string(),
            d.score.to_string(),
            d.bbox.cx.to_string(),
            d.bbox.cy.to_string(),
            d.bbox.w.to_string(),
            d.bbox.h.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            line: i + 2,
            reason,
        };
        if rec.len() != DETECTION_HEADER.len() {
            return Err(bad(format!("{} fields", rec.len())));
        }
        let f = |k: usize| {
            rec[k]
                .parse::<f64>()
                .map_err(|e| bad(format!("{}: {e}", DETECTION_HEADER[k])))
        };
        out.push(Detection {
            scene_id: rec[0].parse().map_err(|e| bad(format!("scene_id: {e}")))?,
            class_id: rec[1].parse().map_err(|e| bad(format!("class_id: {e}")))?,
            score: f(2)?,
            bbox: BBox::new(f(3)?, f(4)?, f(5)?, f(6)?),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn det(scene_id: u64, class_id: usize, score: f64, bbox: BBox) -> Detection {
        Detection {
            scene_id,
            class_id,
            score,
            bbox,
        }
    }

    fn gt(class_id: usize, bbox: BBox) -> GroundTruth {
        GroundTruth { class_id, bbox }
    }

    #[test]
    fn nms_examples() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let single = [det(0, 0, 0.4, b)];
        assert_eq!(nms(&single, 0.5), single.to_vec());
        let pair = [det(0, 0, 0.8, b), det(0, 0, 0.9, b)];
        assert_eq!(nms(&pair, 0.5), vec![pair[1]]);
        // Different class or scene is never suppressed.
        let mixed = [det(0, 0, 0.9, b), det(0, 1, 0.8, b), det(1, 0, 0.7, b)];
        assert_eq!(nms(&mixed, 0.5).len(), 3);
    }

    #[test]
    fn nms_chain_keeps_first_and_last() {
        // Unit strips offset by a quarter: IoU(A,B) = IoU(B,C) = 0.6, IoU(A,C) = 1/3.
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_corners(0.25, 0.0, 1.25, 1.0);
        let c = BBox::from_corners(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&a, &b) - 0.6).abs() < 1e-12 && (iou(&b, &c) - 0.6).abs() < 1e-12);
        assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-12);
        let dets = [det(0, 0, 0.9, a), det(0, 0, 0.8, b), det(0, 0, 0.7, c)];
        assert_eq!(nms(&dets, 0.5), vec![dets[0], dets[2]]);
    }

    #[test]
    fn ap_perfect_and_empty() {
        let boxes = [BBox::new(0.2, 0.2, 0.1, 0.1), BBox::new(0.7, 0.6, 0.2, 0.3)];
        let gts = vec![(0, gt(0, boxes[0])), (1, gt(1, boxes[1])), (1, gt(0, boxes[1]))];
        let dets: Vec<Detection> = gts.iter().map(|(s, g)| det(*s, g.class_id, 0.9, g.bbox)).collect();
        let r = average_precision(&dets, &gts, &coco_thresholds(), 3).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        let r = average_precision(&[], &gts, &coco_thresholds(), 3).unwrap();
        assert_eq!(r.map, 0.0);
    }

    /// Precision envelope over the full PR curve, sampled at 101 recalls.
    fn pr_oracle(points: &[(f64, f64)]) -> f64 {
        let mut sum = 0.0;
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            let p = points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            sum += p;
        }
        sum / 101.0
    }

    #[test]
    fn duplicate_on_single_gt_keeps_full_ap() {
        let b = BBox::new(0.5, 0.5, 0.3, 0.3);
        let gts = vec![(0, gt(0, b))];
        let dets = [det(0, 0, 0.9, b), det(0, 0, 0.8, BBox::new(0.51, 0.5, 0.3, 0.3))];
        let r = average_precision(&dets, &gts, &[0.5], 1).unwrap();
        // Curve: (recall 1, precision 1) then (recall 1, precision 0.5).
        assert_eq!(r.map, pr_oracle(&[(1.0, 1.0), (1.0, 0.5)]));
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn ap_matches_pr_oracle_on_mixed_ranking() {
        let boxes: Vec<BBox> = (0..4).map(|i| BBox::new(0.1 + 0.2 * i as f64, 0.5, 0.1, 0.1)).collect();
        let gts: Vec<(u64, GroundTruth)> = boxes.iter().map(|b| (0, gt(0, *b))).collect();
        let miss = BBox::new(0.5, 0.9, 0.05, 0.05);
        // Ranking: TP, FP, TP, FP, TP; one gt never found.
        let dets = [
            det(0, 0, 0.9, boxes[0]),
            det(0, 0, 0.8, miss),
            det(0, 0, 0.7, boxes[1]),
            det(0, 0, 0.6, miss),
            det(0, 0, 0.5, boxes[2]),
        ];
        let r = average_precision(&dets, &gts, &[0.5], 1).unwrap();
        let curve = [(0.25, 1.0), (0.25, 0.5), (0.5, 2.0 / 3.0), (0.5, 0.5), (0.75, 0.6)];
        assert!((r.map - pr_oracle(&curve)).abs() < 1e-12);
    }

    #[test]
    fn greedy_matching_prefers_highest_iou() {
        let g1 = BBox::new(0.4, 0.5, 0.2, 0.2);
        let g2 = BBox::new(0.5, 0.5, 0.2, 0.2);
        let gts = vec![(0, gt(0, g1)), (0, gt(0, g2))];
        // First detection overlaps both but g2 more; second only matches g1.
        let dets = [det(0, 0, 0.9, BBox::new(0.48, 0.5, 0.2, 0.2)), det(0, 0, 0.8, g1)];
        let r = average_precision(&dets, &gts, &[0.5], 1).unwrap();
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn duplicate_rate_examples() {
        let boxes: Vec<BBox> = (0..4)
            .map(|i| BBox::new(0.1 + 0.25 * i as f64, 0.5, 0.1, 0.1))
            .collect();
        let disjoint: Vec<Detection> = boxes.iter().map(|b| det(0, 0, 0.9, *b)).collect();
        assert_eq!(duplicate_rate(&disjoint, 0.05, 0.5), 0.0);
        let doubled: Vec<Detection> = disjoint
            .iter()
            .flat_map(|d| [*d, Detection { score: 0.5, ..*d }])
            .collect();
        assert_eq!(duplicate_rate(&doubled, 0.05, 0.5), 0.5);
        assert_eq!(duplicate_rate(&doubled, 0.95, 0.5), 0.0);
    }

    #[test]
    fn detections_take_argmax_class() {
        let preds = [
            Prediction {
                class_probs: vec![0.1, 0.7, 0.2],
                bbox: BBox::new(0.5, 0.5, 0.1, 0.1),
            },
            Prediction {
                class_probs: vec![0.01, 0.02, 0.03],
                bbox: BBox::new(0.5, 0.5, 0.1, 0.1),
            },
        ];
        let dets = detections_from_predictions(4, &preds, DEFAULT_SCORE_THRESHOLD);
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].scene_id, dets[0].class_id, dets[0].score), (4, 1, 0.7));
    }

    #[test]
    fn detection_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.csv");
        let dets = vec![
            det(3, 1, 0.25, BBox::new(0.1, 0.2, 0.3, 0.4)),
            det(9, 0, 1.0 / 3.0, BBox::new(0.5, 0.5, 0.5, 0.5)),
        ];
        write_detections(&path, &dets).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("scene_id,class_id,score,cx,cy,w,h\n"));
        assert_eq!(read_detections(&path).unwrap(), dets);
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (
                0u64..3,
                0usize..2,
                0.0..1.0f64,
                0.0..1.0f64,
                0.0..1.0f64,
                0.05..0.5f64,
                0.05..0.5f64,
            ),
            0..30,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(s, c, p, x, y, w, h)| det(s, c, p, BBox::new(x, y, w, h)))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_is_idempotent(dets in arb_dets(), t in 0.1..0.9f64) {
            let once = nms(&dets, t);
            prop_assert_eq!(nms(&once, t), once);
        }

        #[test]
        fn nms_keeps_pairwise_low_overlap(dets in arb_dets(), t in 0.1..0.9f64) {
            let kept = nms(&dets, t);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    if a.scene_id == b.scene_id && a.class_id == b.class_id {
                        prop_assert!(iou(&a.bbox, &b.bbox) < t);
                    }
                }
            }
        }

        #[test]
        fn adding_unmatched_correct_detection_never_lowers_ap(dets in arb_dets(), extra in (0.0..1.0f64, 0.0..1.0f64)) {
            let gts: Vec<(u64, GroundTruth)> = dets.iter().take(5).map(|d| (d.scene_id, gt(d.class_id, d.bbox))).collect();
            let new_gt = (7u64, gt(0, BBox::new(extra.0, extra.1, 0.2, 0.2)));
            let mut all_gts = gts.clone();
            all_gts.push(new_gt);
            let before = average_precision(&dets, &all_gts, &coco_thresholds(), 2).unwrap();
            let mut more = dets.clone();
            more.push(det(7, 0, 0.5, new_gt.1.bbox));
            let after = average_precision(&more, &all_gts, &coco_thresholds(), 2).unwrap();
            for (b, a) in before.per_class_threshold.iter().zip(&after.per_class_threshold) {
                if let (Some(b), Some(a)) = (b, a) {
                    for (x, y) in b.iter().zip(a) {
                        prop_assert!(y + 1e-12 >= *x);
                    }
                }
            }
        }

        #[test]
        fn nms_changes_nothing_without_duplicates(dets in arb_dets()) {
            let above: Vec<Detection> = dets.iter().filter(|d| d.score >= DEFAULT_SCORE_THRESHOLD).copied().collect();
            prop_assume!(duplicate_rate(&above, DEFAULT_SCORE_THRESHOLD, DEFAULT_NMS_IOU) == 0.0);
            let gts: Vec<(u64, GroundTruth)> = dets.iter().step_by(2).map(|d| (d.scene_id, gt(d.class_id, d.bbox))).collect();
            let raw = average_precision(&above, &gts, &coco_thresholds(), 2).unwrap();
            let suppressed = average_precision(&nms(&above, DEFAULT_NMS_IOU), &gts, &coco_thresholds(), 2).unwrap();
            prop_assert_eq!(raw, suppressed);
        }
    }
}
