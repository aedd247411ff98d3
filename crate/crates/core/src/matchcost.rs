//! Matching cost between predictions and ground truths, and the set loss
//! applied once an assignment is fixed.
//!
//! The cost of pairing query `i` with ground truth `j` is
//! `mu_cls * focal(p_i[c_j]) + l1_weight * L1(b_i, b_j) + giou_weight * (1 - GIoU(b_i, b_j))`,
//! where the focal term is the positive-minus-negative focal cost.

use serde::{Deserialize, Serialize};

use crate::assign::{Assignment, MultiAssignment};
use crate::boxes::{self, BBox};
use crate::diffcore::Tensor;
use crate::{Error, Result};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub mu_cls: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            mu_cls: 2.0,
            l1_weight: boxes::L1_WEIGHT,
            giou_weight: boxes::GIOU_WEIGHT,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mu_cls,
            self.l1_weight,
            self.giou_weight,
            self.focal_alpha,
            self.focal_gamma,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid(format!(
                "cost weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Dense `queries x gts` matrix; entry `(i, j)` scores query `i` against
/// ground truth `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    queries: usize,
    gts: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn from_entries(queries: usize, gts: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != queries * gts {
            return Err(Error::Invalid(format!(
                "cost matrix {queries}x{gts} needs {} entries, got {}",
                queries * gts,
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("cost entry {bad} is not finite")));
        }
        Ok(Self { queries, gts, entries })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn gts(&self) -> usize {
        self.gts
    }

    pub fn get(&self, query: usize, gt: usize) -> f64 {
        self.entries[query * self.gts + gt]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Focal matching cost of predicting probability `p` for the target class:
/// `alpha (1-p)^gamma (-ln p) - (1-alpha) p^gamma (-ln(1-p))`.
pub fn focal_cls_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let positive = alpha * (1.0 - p).powf(gamma) * -p.ln();
    let negative = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln();
    positive - negative
}

pub fn pair_cost(pred: &Prediction, gt: &GroundTruth, w: &CostWeights) -> f64 {
    let p = pred.class_probs[gt.class_id];
    w.mu_cls * focal_cls_cost(p, w.focal_alpha, w.focal_gamma)
        + w.l1_weight * boxes::l1(&pred.bbox, &gt.bbox)
        + w.giou_weight * (1.0 - boxes::giou(&pred.bbox, &gt.bbox))
}

pub fn build_cost_matrix(preds: &[Prediction], gts: &[GroundTruth], w: &CostWeights) -> Result<CostMatrix> {
    for gt in gts {
        if let Some(p) = preds.first() {
            if gt.class_id >= p.class_probs.len() {
                return Err(Error::OutOfRange {
                    what: "class probabilities",
                    index: gt.class_id,
                    len: p.class_probs.len(),
                });
            }
        }
    }
    let entries = preds
        .iter()
        .flat_map(|p| gts.iter().map(move |g| pair_cost(p, g, w)))
        .collect();
    CostMatrix::from_entries(preds.len(), gts.len(), entries)
}

/// Sigmoid focal loss summed over every query and class. `targets` holds
/// one row per query with 1.0 at the matched class and 0.0 elsewhere.
fn focal_loss<'t>(probs: Tensor<'t>, targets: Vec<f64>, w: &CostWeights) -> Result<Tensor<'t>> {
    let tape = probs.tape();
    let shape = probs.shape();
    let pos_weight: Vec<f64> = targets.iter().map(|t| w.focal_alpha * t).collect();
    let neg_weight: Vec<f64> = targets.iter().map(|t| (1.0 - w.focal_alpha) * (1.0 - t)).collect();
    let pos_weight = tape.constant(&shape, pos_weight)?;
    let neg_weight = tape.constant(&shape, neg_weight)?;

    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = p.rsub_scalar(1.0);
    let pos = q.powf(w.focal_gamma).mul(p.ln().neg())?.mul(pos_weight)?;
    let neg = p.powf(w.focal_gamma).mul(q.ln().neg())?.mul(neg_weight)?;
    Ok(pos.add(neg)?.sum())
}

/// Loss for an arbitrary set of `(query, gt)` positives, divided by
/// `max(1, normalizer)`. Queries outside `pairs` are trained towards all
/// classes negative.
pub fn matched_loss<'t>(
    probs: Tensor<'t>,
    boxes: Tensor<'t>,
    gts: &[GroundTruth],
    pairs: &[(usize, usize)],
    normalizer: usize,
    w: &CostWeights,
) -> Result<Tensor<'t>> {
    let pshape = probs.shape();
    if pshape.len() != 2 || boxes.shape() != [pshape[0], 4] {
        return Err(Error::Invalid(format!(
            "set loss expects [Q, C] probabilities and [Q, 4] boxes, got {pshape:?} and {:?}",
            boxes.shape()
        )));
    }
    let (queries, classes) = (pshape[0], pshape[1]);
    let mut targets = vec![0.0; queries * classes];
    for &(q, g) in pairs {
        if q >= queries {
            return Err(Error::OutOfRange {
                what: "queries",
                index: q,
                len: queries,
            });
        }
        let gt = gts.get(g).ok_or(Error::OutOfRange {
            what: "ground truths",
            index: g,
            len: gts.len(),
        })?;
        if gt.class_id >= classes {
            return Err(Error::OutOfRange {
                what: "classes",
                index: gt.class_id,
                len: classes,
            });
        }
        targets[q * classes + gt.class_id] = 1.0;
    }
    let mut total = focal_loss(probs, targets, w)?;
    if !pairs.is_empty() {
        let rows: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
        let matched = boxes.select_rows(&rows)?;
        let gt_boxes: Vec<f64> = pairs.iter().flat_map(|&(_, g)| gts[g].bbox.to_array()).collect();
        let gt_boxes = probs.tape().constant(&[pairs.len(), 4], gt_boxes)?;
        let box_term = boxes::box_loss_tensor(matched, gt_boxes, w.l1_weight, w.giou_weight)?;
        total = total.add(box_term)?;
    }
    Ok(total.scale(1.0 / normalizer.max(1) as f64))
}

/// Group-wise set loss.
///
/// `probs` is `[K*N, C]` and `boxes` `[K*N, 4]`; `assignments[g]` holds
/// query indices local to group `g`. The result sums, over groups, the
/// focal loss of all queries plus the box loss of matched queries, divided
/// by `max(1, K*M)`.
pub fn set_loss<'t>(
    probs: Tensor<'t>,
    boxes: Tensor<'t>,
    gts: &[GroundTruth],
    assignments: &[Assignment],
    queries_per_group: usize,
    w: &CostWeights,
) -> Result<Tensor<'t>> {
    let mut pairs = Vec::with_capacity(assignments.len() * gts.len());
    for (g, a) in assignments.iter().enumerate() {
        if a.len() != gts.len() {
            return Err(Error::Invalid(format!(
                "assignment for group {g} covers {} of {} ground truths",
                a.len(),
                gts.len()
            )));
        }
        for (q, gt) in a.pairs() {
            if q >= queries_per_group {
                return Err(Error::OutOfRange {
                    what: "group queries",
                    index: q,
                    len: queries_per_group,
                });
            }
            pairs.push((g * queries_per_group + q, gt));
        }
    }
    matched_loss(probs, boxes, gts, &pairs, assignments.len() * gts.len(), w)
}

/// One-to-Many set loss, divided by `max(1, number of positives)`.
pub fn multi_set_loss<'t>(
    probs: Tensor<'t>,
    boxes: Tensor<'t>,
    gts: &[GroundTruth],
    assignment: &MultiAssignment,
    w: &CostWeights,
) -> Result<Tensor<'t>> {
    let pairs: Vec<(usize, usize)> = assignment.pairs().collect();
    matched_loss(probs, boxes, gts, &pairs, pairs.len(), w)
}
