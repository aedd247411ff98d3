use anyhow::Result;
use groupdetr::assign::group_wise_assign;
use groupdetr::evalkit::{
    average_precision, coco_thresholds, detections_from_predictions, duplicate_rate, nms, ApReport, Detection,
};
use groupdetr::groupdecoder::{DecoderOutput, GroupDecoder};
use groupdetr::matchcost::{build_cost_matrix, CostWeights, GroundTruth};
use groupdetr::querystats::{matching_distance, perturbation_distance, GroupPositions};
use groupdetr::scenes::Scene;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub group_index: usize,
    pub scenes: usize,
    pub map_no_nms: f64,
    pub map_nms: f64,
    pub map50_no_nms: f64,
    pub map50_nms: f64,
    pub per_class_ap_no_nms: Vec<Option<f64>>,
    pub per_class_ap_nms: Vec<Option<f64>>,
    pub duplicate_rate: f64,
    pub detections: usize,
}

pub fn decode_all(decoder: &GroupDecoder, scenes: &[Scene]) -> Result<Vec<DecoderOutput>> {
    scenes.iter().map(|s| Ok(decoder.decode(&s.memory)?)).collect()
}

/// Detections of one group over a set of scenes.
pub fn collect_detections(
    outputs: &[DecoderOutput],
    scenes: &[Scene],
    group_index: usize,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (out, scene) in outputs.iter().zip(scenes) {
        let preds = out.group_slice(group_index)?.predictions();
        dets.extend(detections_from_predictions(scene.scene_id, &preds, score_threshold));
    }
    Ok(dets)
}

fn ground_truths(scenes: &[Scene]) -> Vec<(u64, GroundTruth)> {
    scenes
        .iter()
        .flat_map(|s| s.gts.iter().map(move |g| (s.scene_id, *g)))
        .collect()
}

/// AP with and without NMS, plus the duplicate rate, from a detection set.
pub fn score_detections(
    dets: &[Detection],
    scenes: &[Scene],
    classes: usize,
    group_index: usize,
    eval: &EvalConfig,
) -> Result<Evaluation> {
    let gts = ground_truths(scenes);
    let thresholds = coco_thresholds();
    let raw: ApReport = average_precision(dets, &gts, &thresholds, classes)?;
    let suppressed = average_precision(&nms(dets, eval.nms_iou), &gts, &thresholds, classes)?;
    Ok(Evaluation {
        group_index,
        scenes: scenes.len(),
        map_no_nms: raw.map,
        map_nms: suppressed.map,
        map50_no_nms: raw.map_first,
        map50_nms: suppressed.map_first,
        per_class_ap_no_nms: raw.per_class,
        per_class_ap_nms: suppressed.per_class,
        duplicate_rate: duplicate_rate(dets, eval.score_threshold, eval.nms_iou),
        detections: dets.len(),
    })
}

pub fn evaluate(decoder: &GroupDecoder, scenes: &[Scene], group_index: usize, eval: &EvalConfig) -> Result<Evaluation> {
    let outputs = decode_all(decoder, scenes)?;
    let dets = collect_detections(&outputs, scenes, group_index, eval.score_threshold)?;
    score_detections(&dets, scenes, decoder.config().classes, group_index, eval)
}

/// PD of the reference points and MD averaged over scenes with objects.
/// Both are `None` for single-group models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub pd: Option<f64>,
    pub md: Option<f64>,
}

pub fn positions(decoder: &GroupDecoder) -> Result<GroupPositions> {
    Ok(GroupPositions::from_rows(
        &decoder.positions(),
        decoder.config().groups,
    )?)
}

/// Distances from outputs already decoded for `scenes`.
pub fn distances(
    decoder: &GroupDecoder,
    outputs: &[DecoderOutput],
    scenes: &[Scene],
    weights: &CostWeights,
) -> Result<Distances> {
    let cfg = decoder.config();
    if cfg.groups < 2 {
        return Ok(Distances { pd: None, md: None });
    }
    let pos = positions(decoder)?;
    let pd = perturbation_distance(&pos)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (out, scene) in outputs.iter().zip(scenes).filter(|(_, s)| !s.gts.is_empty()) {
        let costs = (0..cfg.groups)
            .map(|g| build_cost_matrix(&out.group_predictions(g), &scene.gts, weights))
            .collect::<groupdetr::Result<Vec<_>>>()?;
        let md = matching_distance(&pos, &group_wise_assign(&costs)?)?;
        if md.defined {
            sum += md.value;
            count += 1;
        }
    }
    Ok(Distances {
        pd: Some(pd),
        md: (count > 0).then(|| sum / count as f64),
    })
}
