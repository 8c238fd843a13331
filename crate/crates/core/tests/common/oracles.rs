//! Independent reference implementations used to cross-check the library.

use mmsfe::evalmetrics::{GroundTruth, ImageDetection};
use mmsfe::geometry::{BBox, Detection};
use rand::Rng;

/// IoU written out from the corner coordinates.
pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Quadratic NMS: precompute the full pairwise IoU matrix, then walk the
/// score order and drop anything overlapping a survivor of its class.
pub fn ref_nms(dets: &[Detection], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| ref_iou(&dets[i].bbox, &dets[j].bbox)).collect())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps input order among equal scores.
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut alive = vec![true; n];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if dets[j].class_id == dets[i].class_id && m[i][j] >= thr {
                alive[j] = false;
            }
        }
    }
    keep
}

pub fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent * 0.8);
    let y1 = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(2.0..extent * 0.3);
    let h = rng.random_range(2.0..extent * 0.3);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

/// Clustered boxes so suppression actually happens.
pub fn random_nms_scene(rng: &mut impl Rng, n: usize) -> Vec<Detection> {
    let seeds: Vec<BBox> = (0..rng.random_range(1..=8)).map(|_| random_box(rng, 200.0)).collect();
    (0..n)
        .map(|_| {
            let s = seeds[rng.random_range(0..seeds.len())];
            let j: [f64; 4] = std::array::from_fn(|_| rng.random_range(-6.0..6.0));
            let b = BBox::new(s.x1 + j[0], s.y1 + j[1], s.x2 + j[2], s.y2 + j[3]);
            let b = if b.x2 > b.x1 && b.y2 > b.y1 { b } else { s };
            Detection {
                bbox: b,
                score: (rng.random_range(0..1000) as f64) / 1000.0,
                class_id: rng.random_range(0..2),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefClass {
    /// TP flag per detection of the class, in ranked order.
    pub labels: Vec<bool>,
    pub ap: f64,
    pub tp_ious: Vec<f64>,
    pub num_gt: usize,
}

/// Ranks, matches and integrates one class from scratch.
pub fn ref_class(dets: &[ImageDetection], gts: &[GroundTruth], class_id: usize) -> RefClass {
    let mut ranked: Vec<(usize, &ImageDetection)> =
        dets.iter().enumerate().filter(|(_, d)| d.det.class_id == class_id).collect();
    ranked.sort_by(|a, b| b.1.det.score.partial_cmp(&a.1.det.score).unwrap().then(a.0.cmp(&b.0)));
    let cls_gts: Vec<(usize, &GroundTruth)> = gts.iter().enumerate().filter(|(_, g)| g.class_id == class_id).collect();
    let num_gt = cls_gts.len();
    let mut taken = vec![false; gts.len()];
    let mut labels = Vec::new();
    let mut tp_ious = Vec::new();
    for (_, d) in &ranked {
        let mut best_v = -1.0;
        let mut best_g = None;
        for &(gi, g) in &cls_gts {
            if taken[gi] || g.image_id != d.image_id {
                continue;
            }
            let v = ref_iou(&d.det.bbox, &g.bbox);
            if v >= 0.5 && v > best_v {
                best_v = v;
                best_g = Some(gi);
            }
        }
        match best_g {
            Some(gi) => {
                taken[gi] = true;
                labels.push(true);
                tp_ious.push(best_v);
            }
            None => labels.push(false),
        }
    }
    let mut ap = 0.0;
    let mut tp = 0;
    for (k, &hit) in labels.iter().enumerate() {
        if hit {
            tp += 1;
            ap += (tp as f64 / (k + 1) as f64) * (1.0 / num_gt as f64);
        }
    }
    RefClass {
        labels,
        ap: if num_gt == 0 { 0.0 } else { ap },
        tp_ious,
        num_gt,
    }
}

/// Midpoint-rule integral of the recall staircase: on each recall slice
/// the height is the precision at the detection that first reached it.
/// Exact for the all-point sum since breakpoints lie on multiples of
/// `1 / num_gt`.
pub fn staircase_ap(labels: &[bool], num_gt: usize, sub: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut first_reach = Vec::new();
    let mut tp = 0;
    for (k, &hit) in labels.iter().enumerate() {
        if hit {
            tp += 1;
            first_reach.push(tp as f64 / (k + 1) as f64);
        }
    }
    let slices = num_gt * sub;
    let width = 1.0 / slices as f64;
    let mut area = 0.0;
    for s in 0..slices {
        let r = (s as f64 + 0.5) * width;
        let needed = (r * num_gt as f64).ceil() as usize;
        if needed <= first_reach.len() {
            area += first_reach[needed - 1] * width;
        }
    }
    area
}

/// Images with 0..3 gts each, plus detections that are jittered copies
/// (often TPs, sometimes off-class or displaced) and pure clutter.
pub fn random_eval_scene(rng: &mut impl Rng, images: usize) -> (Vec<ImageDetection>, Vec<GroundTruth>) {
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for image_id in 0..images {
        for _ in 0..rng.random_range(0..=3) {
            let b = random_box(rng, 128.0);
            let class_id = rng.random_range(0..2);
            gts.push(GroundTruth::new(image_id, b, class_id).unwrap());
            for _ in 0..rng.random_range(0..=2) {
                let s = rng.random_range(0.0..0.4) * (b.x2 - b.x1);
                let c = if rng.random_bool(0.8) { class_id } else { 1 - class_id };
                dets.push(ImageDetection {
                    image_id,
                    det: Detection {
                        bbox: BBox::new(b.x1 + s, b.y1, b.x2 + s, b.y2),
                        score: rng.random_range(0.0..1.0),
                        class_id: c,
                    },
                });
            }
        }
        for _ in 0..rng.random_range(0..=2) {
            dets.push(ImageDetection {
                image_id,
                det: Detection {
                    bbox: random_box(rng, 128.0),
                    score: rng.random_range(0.0..1.0),
                    class_id: rng.random_range(0..2),
                },
            });
        }
    }
    (dets, gts)
}
