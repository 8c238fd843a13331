//! Boxes, IoU, the distance-to-sides box form, and greedy NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NMIBC: usize = 0;
pub const MIBC: usize = 1;
pub const NUM_CLASSES: usize = 2;

pub fn class_name(class_id: usize) -> &'static str {
    match class_id {
        NMIBC => "NMIBC",
        MIBC => "MIBC",
        _ => "unknown",
    }
}

/// Axis-aligned box in continuous pixel coordinates (corner form).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Box of the given size centred on `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2 && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0)) * (self.height().max(0.0))
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A box written as distances from an interior anchor point to its
/// top, bottom, left and right sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TblrBox {
    pub px: f64,
    pub py: f64,
    pub t: f64,
    pub b: f64,
    pub l: f64,
    pub r: f64,
}

impl TblrBox {
    pub fn new(px: f64, py: f64, t: f64, b: f64, l: f64, r: f64) -> Result<Self> {
        let tb = Self { px, py, t, b, l, r };
        tb.validate()?;
        Ok(tb)
    }

    /// Expresses `bbox` relative to `(px, py)`. Fails if the point lies
    /// outside the box.
    pub fn from_box(px: f64, py: f64, bbox: &BBox) -> Result<Self> {
        Self::new(px, py, py - bbox.y1, bbox.y2 - py, px - bbox.x1, bbox.x2 - px)
    }

    pub fn to_box(&self) -> BBox {
        BBox::new(
            self.px - self.l,
            self.py - self.t,
            self.px + self.r,
            self.py + self.b,
        )
    }

    pub fn distances(&self) -> [f64; 4] {
        [self.t, self.b, self.l, self.r]
    }

    pub fn with_distances(&self, d: [f64; 4]) -> Result<Self> {
        Self::new(self.px, self.py, d[0], d[1], d[2], d[3])
    }

    fn validate(&self) -> Result<()> {
        if self.distances().iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tblr distances must be finite and non-negative, got {:?}",
                self.distances()
            )));
        }
        Ok(())
    }
}

/// Areas entering the IoU loss for a shared-anchor pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    /// Intersection area.
    pub i: f64,
    /// Union area.
    pub u: f64,
    /// Ground-truth area.
    pub x: f64,
    /// Prediction area.
    pub x_pred: f64,
    pub i_w: f64,
    pub i_h: f64,
}

/// Intersection, union and both areas of two boxes sharing an anchor point.
pub fn tblr_overlap(gt: &TblrBox, pred: &TblrBox) -> Result<Overlap> {
    gt.validate()?;
    pred.validate()?;
    if gt.px != pred.px || gt.py != pred.py {
        return Err(Error::InvalidArgument(format!(
            "anchor points differ: ({}, {}) vs ({}, {})",
            gt.px, gt.py, pred.px, pred.py
        )));
    }
    Ok(overlap_from_distances(&gt.distances(), &pred.distances()))
}

/// Same algebra as [`tblr_overlap`] on bare `[t, b, l, r]` arrays.
pub(crate) fn overlap_from_distances(gt: &[f64; 4], pred: &[f64; 4]) -> Overlap {
    let [xt, xb, xl, xr] = *gt;
    let [pt, pb, pl, pr] = *pred;
    let x_pred = (pt + pb) * (pl + pr);
    let x = (xt + xb) * (xl + xr);
    let i_h = xt.min(pt) + xb.min(pb);
    let i_w = xl.min(pl) + xr.min(pr);
    let i = i_w * i_h;
    Overlap {
        i,
        u: x + x_pred - i,
        x,
        x_pred,
        i_w,
        i_h,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// Greedy class-wise non-maximum suppression.
///
/// Detections are visited by descending score (ties by input index); one is
/// kept when its IoU with every kept detection of the same class is below
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Indices of the detections kept by [`nms`], in keep order.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == d.class_id && iou(&dets[k].bbox, &d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
