//! Axis-aligned boxes, IoU / GIoU, and the weighted L1 + GIoU box loss.

use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Tensor};

/// Weight of the L1 term in the box loss.
pub const L1_WEIGHT: f64 = 5.0;
/// Weight of the `1 - GIoU` term in the box loss.
pub const GIOU_WEIGHT: f64 = 2.0;
/// Floor applied to union and hull areas before dividing.
pub const AREA_FLOOR: f64 = 1e-12;

/// Box in normalized image coordinates, center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Negative extents are clamped to zero.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            cx,
            cy,
            w: w.max(0.0),
            h: h.max(0.0),
        }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Whether every corner lies inside the unit square.
    pub fn in_unit_square(&self) -> bool {
        self.corners().iter().all(|&c| (0.0..=1.0).contains(&c))
    }
}

fn intersection_and_union(a: &BBox, b: &BBox) -> (f64, f64) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

/// Intersection over union. Zero when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = intersection_and_union(a, b);
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not
/// covered by the union. A hull without area yields zero.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = intersection_and_union(a, b);
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    if hull <= 0.0 {
        log::debug!("giou: degenerate hull for {a:?} and {b:?}");
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull.max(AREA_FLOOR)
}

/// L1 distance between the center-size vectors.
pub fn l1(a: &BBox, b: &BBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

pub fn box_loss_weighted(pred: &BBox, gt: &BBox, l1_weight: f64, giou_weight: f64) -> f64 {
    l1_weight * l1(pred, gt) + giou_weight * (1.0 - giou(pred, gt))
}

/// `5 * L1 + 2 * (1 - GIoU)`.
pub fn box_loss(pred: &BBox, gt: &BBox) -> f64 {
    box_loss_weighted(pred, gt, L1_WEIGHT, GIOU_WEIGHT)
}

fn column<'t>(t: Tensor<'t>, i: usize) -> diffcore::Result<Tensor<'t>> {
    t.slice(1, i, i + 1)
}

/// Taped corner coordinates of `[M, 4]` center-size boxes, each `[M, 1]`.
fn corner_columns<'t>(boxes: Tensor<'t>) -> diffcore::Result<[Tensor<'t>; 6]> {
    let cx = column(boxes, 0)?;
    let cy = column(boxes, 1)?;
    let w = column(boxes, 2)?;
    let h = column(boxes, 3)?;
    let half_w = w.scale(0.5);
    let half_h = h.scale(0.5);
    Ok([cx.sub(half_w)?, cy.sub(half_h)?, cx.add(half_w)?, cy.add(half_h)?, w, h])
}

/// Row-wise GIoU of two `[M, 4]` box tensors, shape `[M, 1]`.
pub fn giou_tensor<'t>(a: Tensor<'t>, b: Tensor<'t>) -> diffcore::Result<Tensor<'t>> {
    let [ax1, ay1, ax2, ay2, aw, ah] = corner_columns(a)?;
    let [bx1, by1, bx2, by2, bw, bh] = corner_columns(b)?;
    let iw = ax2.minimum(bx2)?.sub(ax1.maximum(bx1)?)?.relu();
    let ih = ay2.minimum(by2)?.sub(ay1.maximum(by1)?)?.relu();
    let inter = iw.mul(ih)?;
    let union = aw.mul(ah)?.add(bw.mul(bh)?)?.sub(inter)?;
    let iou = inter.div(union.clamp(AREA_FLOOR, f64::INFINITY))?;
    let hw = ax2.maximum(bx2)?.sub(ax1.minimum(bx1)?)?;
    let hh = ay2.maximum(by2)?.sub(ay1.minimum(by1)?)?;
    let hull = hw.mul(hh)?.clamp(AREA_FLOOR, f64::INFINITY);
    iou.sub(hull.sub(union)?.div(hull)?)
}

/// Summed weighted box loss over matched rows of two `[M, 4]` tensors.
pub fn box_loss_tensor<'t>(
    pred: Tensor<'t>,
    gt: Tensor<'t>,
    l1_weight: f64,
    giou_weight: f64,
) -> diffcore::Result<Tensor<'t>> {
    let l1 = pred.sub(gt)?.abs().sum().scale(l1_weight);
    let giou = giou_tensor(pred, gt)?.rsub_scalar(1.0).sum().scale(giou_weight);
    l1.add(giou)
}
