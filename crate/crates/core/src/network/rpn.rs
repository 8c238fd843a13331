use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{match_anchors, AnchorSet, MatchLabel};
use crate::autodiff::{sigmoid, ConvSpec, Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::geometry::{nms_indices, BBox, Detection};

use super::layers::{Bound, Conv, ParamStore};

/// Raw regression outputs are clamped to this magnitude before decoding.
pub const MAX_LOG_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
    /// Index of the head map the proposal came from.
    pub level: usize,
}

/// Shared head: 3x3 conv + relu, then sibling 1x1 objectness (`A`
/// channels) and tblr regression (`4A` channels, `4a + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub conv: Conv,
    pub obj: Conv,
    pub reg: Conv,
    pub anchors_per_cell: usize,
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    pub obj: Vec<Var>,
    pub reg: Vec<Var>,
}

impl RpnHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        width: usize,
        hidden: usize,
        anchors_per_cell: usize,
    ) -> Result<Self> {
        let conv = Conv::new(store, rng, "rpn.conv", ConvSpec::new(width, hidden, 3, 1, 1)?, true);
        let obj = Conv::with_std(store, rng, "rpn.obj", ConvSpec::new(hidden, anchors_per_cell, 1, 1, 0)?, 0.01);
        let reg = Conv::with_std(store, rng, "rpn.reg", ConvSpec::new(hidden, 4 * anchors_per_cell, 1, 1, 0)?, 0.01);
        Ok(Self {
            conv,
            obj,
            reg,
            anchors_per_cell,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, maps: &[Var]) -> Result<RpnOutput> {
        let mut out = RpnOutput {
            obj: Vec::with_capacity(maps.len()),
            reg: Vec::with_capacity(maps.len()),
        };
        for &m in maps {
            let h = self.conv.forward(tape, p, m)?;
            let h = tape.relu(h);
            out.obj.push(self.obj.forward(tape, p, h)?);
            out.reg.push(self.reg.forward(tape, p, h)?);
        }
        Ok(out)
    }
}

/// Distances `[t, b, l, r]` from the centre of `reference` for raw outputs
/// `raw`: `[h/2 e^t0, h/2 e^t1, w/2 e^t2, w/2 e^t3]`.
pub fn decode_distances(reference: &BBox, raw: [f64; 4]) -> [f64; 4] {
    let (hh, hw) = (reference.height() / 2.0, reference.width() / 2.0);
    let e = raw.map(|t| t.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp());
    [hh * e[0], hh * e[1], hw * e[2], hw * e[3]]
}

pub fn decode_box(reference: &BBox, raw: [f64; 4]) -> BBox {
    let (cx, cy) = reference.center();
    let d = decode_distances(reference, raw);
    BBox::new(cx - d[2], cy - d[0], cx + d[3], cy + d[1])
}

/// Per-coordinate decoding scales `[h/2, h/2, w/2, w/2]`.
pub fn distance_scales(reference: &BBox) -> [f64; 4] {
    let (hh, hw) = (reference.height() / 2.0, reference.width() / 2.0);
    [hh, hh, hw, hw]
}

/// Target distances from the centre of `reference` to the edges of `gt`,
/// or `None` when the centre is not strictly inside `gt`.
pub fn target_distances(reference: &BBox, gt: &BBox) -> Option<[f64; 4]> {
    let (cx, cy) = reference.center();
    let d = [cy - gt.y1, gt.y2 - cy, cx - gt.x1, gt.x2 - cx];
    d.iter().all(|v| *v > 0.0).then_some(d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_top_k: usize,
    pub post_nms_top_k: usize,
    pub nms_threshold: f64,
}

/// Decodes one image (`batch`) of head outputs into clipped proposals:
/// top-K by objectness per level, NMS across levels, then the post-NMS cap.
pub fn proposals_from_maps(
    obj: &[&Tensor],
    reg: &[&Tensor],
    anchors: &AnchorSet,
    batch: usize,
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    if obj.len() != anchors.levels.len() || reg.len() != anchors.levels.len() {
        return Err(shape_err!(
            "{} objectness / {} regression maps for {} anchor levels",
            obj.len(),
            reg.len(),
            anchors.levels.len()
        ));
    }
    let (iw, ih) = (anchors.image_width as f64, anchors.image_height as f64);
    let offsets = anchors.level_offsets();
    let mut cands: Vec<Proposal> = Vec::new();
    for (li, lvl) in anchors.levels.iter().enumerate() {
        let a = lvl.per_cell();
        let hw = lvl.height * lvl.width;
        let (n, c, h, w) = obj[li].dims4()?;
        let (rn, rc, rh, rw) = reg[li].dims4()?;
        if batch >= n || c != a || h != lvl.height || w != lvl.width || (rn, rc, rh, rw) != (n, 4 * a, h, w) {
            return Err(shape_err!(
                "head maps {:?} / {:?} do not fit level {} ({a} anchors on {}x{})",
                obj[li].shape(),
                reg[li].shape(),
                lvl.level,
                lvl.height,
                lvl.width
            ));
        }
        let o = &obj[li].data()[batch * a * hw..][..a * hw];
        let r = &reg[li].data()[batch * 4 * a * hw..][..4 * a * hw];
        let mut order: Vec<usize> = (0..a * hw).collect();
        order.sort_by(|&i, &j| o[j].total_cmp(&o[i]).then(i.cmp(&j)));
        order.truncate(cfg.pre_nms_top_k);
        for i in order {
            let (kind, cell) = (i / hw, i % hw);
            let raw = [0, 1, 2, 3].map(|j| r[(4 * kind + j) * hw + cell]);
            let anchor = &anchors.anchors[offsets[li] + i].bbox;
            let bbox = decode_box(anchor, raw).clip(iw, ih);
            if bbox.width() > 0.0 && bbox.height() > 0.0 {
                cands.push(Proposal {
                    bbox,
                    objectness: sigmoid(o[i]),
                    level: li,
                });
            }
        }
    }
    let dets: Vec<Detection> = cands
        .iter()
        .map(|p| Detection {
            bbox: p.bbox,
            score: p.objectness,
            class_id: 0,
        })
        .collect();
    let keep = nms_indices(&dets, cfg.nms_threshold);
    Ok(keep.into_iter().take(cfg.post_nms_top_k).map(|i| cands[i]).collect())
}

/// Sampled anchors for one image: `(flat anchor index, label)` plus the
/// positives with their regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    pub sampled: Vec<(usize, bool)>,
    /// `(anchor index, target distances)`.
    pub regression: Vec<(usize, [f64; 4])>,
}

pub fn rpn_targets(
    anchors: &AnchorSet,
    gts: &[BBox],
    t_pos: f64,
    t_neg: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<RpnTargets> {
    let boxes = anchors.boxes();
    let m = match_anchors(&boxes, gts, t_pos, t_neg)?;
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, l) in m.labels.iter().enumerate() {
        match l {
            MatchLabel::Positive => pos.push(i),
            MatchLabel::Negative => neg.push(i),
            MatchLabel::Ignore => {}
        }
    }
    pos.shuffle(rng);
    pos.truncate(batch_size / 2);
    neg.shuffle(rng);
    neg.truncate(batch_size.saturating_sub(pos.len()));
    pos.sort_unstable();
    neg.sort_unstable();
    let regression = pos
        .iter()
        .filter_map(|&i| {
            let g = m.assigned[i]?;
            target_distances(&boxes[i], &gts[g]).map(|d| (i, d))
        })
        .collect();
    let mut sampled: Vec<(usize, bool)> = pos.iter().map(|&i| (i, true)).chain(neg.iter().map(|&i| (i, false))).collect();
    sampled.sort_unstable();
    Ok(RpnTargets { sampled, regression })
}
