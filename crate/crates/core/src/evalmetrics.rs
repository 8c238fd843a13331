//! Precision/recall curves, all-point AP, mAP and mean true-positive IoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{class_name, iou, BBox, Detection, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
}

impl GroundTruth {
    pub fn new(image_id: usize, bbox: BBox, class_id: usize) -> Result<Self> {
        if !bbox.is_valid() || !(bbox.area() > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ground truth box {bbox:?} must have positive area"
            )));
        }
        if class_id >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("class id {class_id} out of range")));
        }
        Ok(Self {
            image_id,
            bbox,
            class_id,
        })
    }
}

/// A detection tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub image_id: usize,
    #[serde(flatten)]
    pub det: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Recall gained at this detection (0 for false positives).
    pub delta_recall: f64,
    pub true_positive: bool,
    /// IoU with the matched ground truth, for true positives.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub num_gt: usize,
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    pub fn precisions(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.precision).collect()
    }

    pub fn recalls(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.recall).collect()
    }

    pub fn true_positives(&self) -> usize {
        self.points.iter().filter(|p| p.true_positive).count()
    }
}

/// Greedy matching in descending score order (ties by input order): each
/// detection of `class_id` takes the highest-IoU unmatched ground truth of
/// the same class and image with IoU >= `iou_thresh`; otherwise it is a
/// false positive. IoU ties go to the earlier ground truth.
pub fn build_pr(dets: &[ImageDetection], gts: &[GroundTruth], class_id: usize, iou_thresh: f64) -> PrCurve {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].det.class_id == class_id)
        .collect();
    order.sort_by(|&a, &b| dets[b].det.score.total_cmp(&dets[a].det.score).then(a.cmp(&b)));

    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (gi, g) in gts.iter().enumerate() {
        if g.class_id == class_id {
            by_image.entry(g.image_id).or_default().push(gi);
        }
    }
    let num_gt: usize = by_image.values().map(Vec::len).sum();
    let mut used = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(order.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_image.get(&d.image_id) {
            for &gi in cands {
                if used[gi] {
                    continue;
                }
                let v = iou(&d.det.bbox, &gts[gi].bbox);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
        }
        let (delta, matched_iou) = match best {
            Some((gi, v)) => {
                used[gi] = true;
                tp += 1;
                (1.0 / num_gt as f64, Some(v))
            }
            None => {
                fp += 1;
                (0.0, None)
            }
        };
        points.push(PrPoint {
            recall: if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 },
            precision: tp as f64 / (tp + fp) as f64,
            delta_recall: delta,
            true_positive: matched_iou.is_some(),
            iou: matched_iou,
        });
    }
    PrCurve {
        class_id,
        num_gt,
        points,
    }
}

/// `sum_k P(k) * delta_r(k)` over the curve (all-point, no interpolation).
pub fn ap(curve: &PrCurve) -> f64 {
    if curve.num_gt == 0 {
        return 0.0;
    }
    curve
        .points
        .iter()
        .map(|p| p.precision * p.delta_recall)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub ap50: f64,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: f64,
    /// Mean IoU over true-positive matches; `None` without any.
    pub mean_iou: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_images: usize,
    pub num_detections: usize,
    pub notes: Vec<String>,
}

pub const AP_IOU: f64 = 0.5;

/// Per-class AP at IoU 0.5, their mean over `classes`, and mean TP IoU.
pub fn evaluate(dets: &[ImageDetection], gts: &[GroundTruth], classes: usize) -> EvalReport {
    let mut reports = Vec::with_capacity(classes);
    let mut notes = Vec::new();
    let mut ious = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in 0..classes {
        let curve = build_pr(dets, gts, c, AP_IOU);
        if curve.num_gt == 0 {
            notes.push(format!("class {} has no ground truth; AP set to 0", class_name(c)));
        }
        let tp = curve.true_positives();
        let fp = curve.points.len() - tp;
        ious.extend(curve.points.iter().filter_map(|p| p.iou));
        tp_all += tp;
        fp_all += fp;
        fn_all += curve.num_gt - tp;
        reports.push(ClassReport {
            class_id: c,
            name: class_name(c).to_string(),
            ap50: ap(&curve),
            num_gt: curve.num_gt,
            tp,
            fp,
            fn_: curve.num_gt - tp,
        });
    }
    let map = if classes == 0 {
        0.0
    } else {
        reports.iter().map(|r| r.ap50).sum::<f64>() / classes as f64
    };
    let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    if dets.is_empty() {
        notes.push("no detections".to_string());
    }
    let mut images: Vec<usize> = gts.iter().map(|g| g.image_id).collect();
    images.extend(dets.iter().map(|d| d.image_id));
    images.sort_unstable();
    images.dedup();
    EvalReport {
        classes: reports,
        map,
        mean_iou,
        tp: tp_all,
        fp: fp_all,
        fn_: fn_all,
        num_images: images.len(),
        num_detections: dets.len(),
        notes,
    }
}

impl EvalReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("mAP: {:.6}\n", self.map));
        match self.mean_iou {
            Some(v) => s.push_str(&format!("mean_iou: {v:.6}\n")),
            None => s.push_str("mean_iou: absent\n"),
        }
        for c in &self.classes {
            s.push_str(&format!("ap50.{}: {:.6}\n", c.name, c.ap50));
            s.push_str(&format!(
                "counts.{}: gt={} tp={} fp={} fn={}\n",
                c.name, c.num_gt, c.tp, c.fp, c.fn_
            ));
        }
        s.push_str(&format!("tp: {}\nfp: {}\nfn: {}\n", self.tp, self.fp, self.fn_));
        s.push_str(&format!("images: {}\ndetections: {}\n", self.num_images, self.num_detections));
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }
}
