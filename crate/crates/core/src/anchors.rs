//! Anchor tiling, k-means++ shape clustering, anchor/ground-truth matching,
//! RoI-to-level routing and the receptive-field recurrence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Anchor side lengths (square root of the area) for pyramid levels 1..=4.
pub const LEVEL_SIDES: [f64; 4] = [32.0, 64.0, 128.0, 256.0];
/// Feature stride of pyramid levels 1..=4.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 1.0, 1.1];

/// Receptive field after each layer: `RF_L = RF_{L-1} + (k_L - 1) * prod_{l<L} s_l`
/// with `RF_0 = 1`.
pub fn receptive_field(layers: &[(usize, usize)]) -> Result<Vec<usize>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("receptive_field: empty layer list".into()));
    }
    let mut rf = 1;
    let mut jump = 1;
    let mut out = Vec::with_capacity(layers.len());
    for &(k, s) in layers {
        if k == 0 || s == 0 {
            return Err(Error::InvalidArgument(format!(
                "receptive_field: kernel and stride must be >= 1, got ({k}, {s})"
            )));
        }
        rf += (k - 1) * jump;
        jump *= s;
        out.push(rf);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveFieldSpec {
    pub layers: Vec<(usize, usize)>,
    pub fields: Vec<usize>,
}

impl ReceptiveFieldSpec {
    pub fn new(layers: Vec<(usize, usize)>) -> Result<Self> {
        let fields = receptive_field(&layers)?;
        Ok(Self { layers, fields })
    }
}

/// One tiled feature level: `sides x ratios` anchors per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnchors {
    /// Pyramid level, 1 = finest.
    pub level: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub sides: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl LevelAnchors {
    pub fn per_cell(&self) -> usize {
        self.sides.len() * self.ratios.len()
    }

    pub fn count(&self) -> usize {
        self.per_cell() * self.height * self.width
    }

    /// Shape `(w, h)` of anchor kind `a`. Ratios are `w / h` and keep the area.
    pub fn shape(&self, a: usize) -> (f64, f64) {
        let side = self.sides[a / self.ratios.len()];
        let r = self.ratios[a % self.ratios.len()];
        (side * r.sqrt(), side / r.sqrt())
    }

    pub fn anchor(&self, a: usize, y: usize, x: usize) -> BBox {
        let (w, h) = self.shape(a);
        let s = self.stride as f64;
        BBox::from_center((x as f64 + 0.5) * s, (y as f64 + 0.5) * s, w, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    /// Index into [`AnchorSet::levels`].
    pub level_idx: usize,
    /// Anchor kind within the cell; also the channel in the head output.
    pub kind: usize,
    pub y: usize,
    pub x: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub image_height: usize,
    pub image_width: usize,
    pub levels: Vec<LevelAnchors>,
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    /// One level per pyramid map, with the per-level side from
    /// [`LEVEL_SIDES`].
    pub fn pyramid(image_height: usize, image_width: usize, ratios: &[f64]) -> Result<Self> {
        Self::pyramid_with_sides(image_height, image_width, &LEVEL_SIDES, ratios)
    }

    /// Like [`AnchorSet::pyramid`] with one custom side per level.
    pub fn pyramid_with_sides(
        image_height: usize,
        image_width: usize,
        sides: &[f64; 4],
        ratios: &[f64],
    ) -> Result<Self> {
        let levels = (0..4)
            .map(|i| LevelAnchors {
                level: i + 1,
                stride: LEVEL_STRIDES[i],
                height: image_height / LEVEL_STRIDES[i],
                width: image_width / LEVEL_STRIDES[i],
                sides: vec![sides[i]],
                ratios: ratios.to_vec(),
            })
            .collect();
        Self::from_levels(image_height, image_width, levels)
    }

    /// All four anchor sides tiled on the coarsest (stride 32) map only.
    pub fn single_level(image_height: usize, image_width: usize, ratios: &[f64]) -> Result<Self> {
        Self::single_level_with_sides(image_height, image_width, &LEVEL_SIDES, ratios)
    }

    pub fn single_level_with_sides(
        image_height: usize,
        image_width: usize,
        sides: &[f64; 4],
        ratios: &[f64],
    ) -> Result<Self> {
        let stride = LEVEL_STRIDES[3];
        let level = LevelAnchors {
            level: 4,
            stride,
            height: image_height / stride,
            width: image_width / stride,
            sides: sides.to_vec(),
            ratios: ratios.to_vec(),
        };
        Self::from_levels(image_height, image_width, vec![level])
    }

    pub fn from_levels(image_height: usize, image_width: usize, levels: Vec<LevelAnchors>) -> Result<Self> {
        let mut anchors = Vec::new();
        for (li, l) in levels.iter().enumerate() {
            if l.ratios.iter().any(|r| !(*r > 0.0)) || l.sides.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "anchor sides and ratios must be positive: {:?} {:?}",
                    l.sides, l.ratios
                )));
            }
            if l.height == 0 || l.width == 0 {
                return Err(Error::InvalidArgument(format!(
                    "level {} has an empty {}x{} map",
                    l.level, l.height, l.width
                )));
            }
            // Head outputs are (kind, y, x) planes; anchors follow the same order.
            for kind in 0..l.per_cell() {
                for y in 0..l.height {
                    for x in 0..l.width {
                        anchors.push(Anchor {
                            level_idx: li,
                            kind,
                            y,
                            x,
                            bbox: l.anchor(kind, y, x),
                        });
                    }
                }
            }
        }
        Ok(Self {
            image_height,
            image_width,
            levels,
            anchors,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Offset of the first anchor of each level in [`AnchorSet::anchors`].
    pub fn level_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.levels
            .iter()
            .map(|l| {
                let o = off;
                off += l.count();
                o
            })
            .collect()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.anchors.iter().map(|a| a.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// `(w, h)` centroids sorted by ascending `w / h`.
    pub centroids: Vec<(f64, f64)>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Total within-cluster squared distance after seeding and each Lloyd step.
    pub inertia: Vec<f64>,
    /// Set when two centroids coincide (fewer distinct shapes than `k`).
    pub duplicate_centroids: bool,
}

impl Clustering {
    pub fn ratios(&self) -> Vec<f64> {
        self.centroids.iter().map(|(w, h)| w / h).collect()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.centroids.len()];
        for &a in &self.assignment {
            h[a] += 1;
        }
        h
    }
}

const MAX_LLOYD_ITERS: usize = 300;

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn nearest(p: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, sq_dist(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ over box `(w, h)` with Euclidean distance, followed by Lloyd
/// iterations until the assignment stops changing (at most 300).
pub fn kmeanspp_cluster(gt_boxes: &[BBox], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || gt_boxes.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= k <= #boxes, got k={k} with {} boxes",
            gt_boxes.len()
        )));
    }
    let pts: Vec<(f64, f64)> = gt_boxes.iter().map(|b| (b.width(), b.height())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = vec![pts[rng.random_range(0..pts.len())]];
    let mut d2: Vec<f64> = pts.iter().map(|&p| sq_dist(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = pts.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..pts.len())
        };
        centroids.push(pts[next]);
        for (d, &p) in d2.iter_mut().zip(&pts) {
            *d = d.min(sq_dist(p, pts[next]));
        }
    }

    let mut assignment: Vec<usize> = pts.iter().map(|&p| nearest(p, &centroids).0).collect();
    let inertia_of = |assign: &[usize], cents: &[(f64, f64)]| -> f64 {
        pts.iter().zip(assign).map(|(&p, &a)| sq_dist(p, cents[a])).sum()
    };
    let mut inertia = vec![inertia_of(&assignment, &centroids)];
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERS {
        iterations += 1;
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&p, &a) in pts.iter().zip(&assignment) {
            sums[a].0 += p.0;
            sums[a].1 += p.1;
            sums[a].2 += 1;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
        let next: Vec<usize> = pts.iter().map(|&p| nearest(p, &centroids).0).collect();
        let changed = next != assignment;
        assignment = next;
        inertia.push(inertia_of(&assignment, &centroids));
        if !changed {
            break;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = centroids[a].0 / centroids[a].1;
        let rb = centroids[b].0 / centroids[b].1;
        ra.total_cmp(&rb).then(a.cmp(&b))
    });
    let mut remap = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let sorted: Vec<(f64, f64)> = order.iter().map(|&i| centroids[i]).collect();
    let duplicate_centroids = sorted
        .iter()
        .enumerate()
        .any(|(i, a)| sorted[i + 1..].iter().any(|b| sq_dist(*a, *b) < 1e-18));
    Ok(Clustering {
        centroids: sorted,
        assignment: assignment.into_iter().map(|a| remap[a]).collect(),
        iterations,
        inertia,
        duplicate_centroids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<MatchLabel>,
    /// Ground-truth index for positives.
    pub assigned: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

impl MatchResult {
    pub fn count(&self, label: MatchLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assigned
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|g| (i, g)))
    }
}

/// Labels anchors positive (`IoU >= t_pos`), negative (`IoU < t_neg`) or
/// ignored, then forces the best anchor(s) of every ground truth positive.
pub fn match_anchors(anchors: &[BBox], gts: &[BBox], t_pos: f64, t_neg: f64) -> Result<MatchResult> {
    if !(0.0 < t_neg && t_neg <= t_pos && t_pos < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "match thresholds need 0 < t_neg <= t_pos < 1, got {t_neg} / {t_pos}"
        )));
    }
    let n = anchors.len();
    if gts.is_empty() {
        return Ok(MatchResult {
            labels: vec![MatchLabel::Negative; n],
            assigned: vec![None; n],
            max_iou: vec![0.0; n],
        });
    }
    let mut max_iou = vec![0.0; n];
    let mut best_gt = vec![0usize; n];
    let mut gt_best = vec![0.0f64; gts.len()];
    let mut ious = vec![0.0; n * gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            ious[i * gts.len() + j] = v;
            if v > max_iou[i] {
                max_iou[i] = v;
                best_gt[i] = j;
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut labels = Vec::with_capacity(n);
    let mut assigned = Vec::with_capacity(n);
    for i in 0..n {
        if max_iou[i] >= t_pos {
            labels.push(MatchLabel::Positive);
            assigned.push(Some(best_gt[i]));
        } else if max_iou[i] < t_neg {
            labels.push(MatchLabel::Negative);
            assigned.push(None);
        } else {
            labels.push(MatchLabel::Ignore);
            assigned.push(None);
        }
    }
    for (j, &best) in gt_best.iter().enumerate() {
        if best > 0.0 {
            for i in 0..n {
                if ious[i * gts.len() + j] == best {
                    labels[i] = MatchLabel::Positive;
                    assigned[i] = Some(j);
                }
            }
        } else if n > 0 {
            labels[0] = MatchLabel::Positive;
            assigned[0] = Some(j);
        }
    }
    Ok(MatchResult {
        labels,
        assigned,
        max_iou,
    })
}

/// Pyramid level for a RoI: `clamp(2 + floor(log2(sqrt(area) / 64)), 1, 4)`.
pub fn assign_level(roi: &BBox) -> Result<usize> {
    let area = roi.area();
    if !(area > 0.0) {
        return Err(Error::InvalidArgument(format!("RoI {roi:?} has zero area")));
    }
    let lvl = 2.0 + (area.sqrt() / 64.0).log2().floor();
    Ok(lvl.clamp(1.0, 4.0) as usize)
}
