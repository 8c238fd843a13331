//! The detector: residual backbone, top-down feature encoder, shared RPN
//! head, quantised RoI pooling and the per-RoI decoder.

mod backbone;
pub mod checkpoint;
mod layers;
mod roi;
mod rpn;
mod sfe;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use backbone::{Backbone, ResUnit, BLOCK_STRIDES};
pub use checkpoint::{Checkpoint, StoredParam};
pub use layers::{Bound, Conv, Linear, ParamId, ParamStore};
pub use roi::{cell_window, roi_regions, Decoder, MapInfo};
pub use rpn::{
    decode_box, decode_distances, distance_scales, proposals_from_maps, rpn_targets, target_distances, Proposal,
    ProposalConfig, RpnHead, RpnOutput, RpnTargets, MAX_LOG_SCALE,
};
pub use sfe::{Pyramid, Sfe};

use crate::anchors::{AnchorSet, LEVEL_SIDES, LEVEL_STRIDES};
use crate::autodiff::{softmax_in_place, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms, BBox, Detection, NUM_CLASSES};
use crate::losses::RegressionKind;

/// Architecture and inference settings of a built model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub stem_channels: usize,
    pub block_channels: [usize; 4],
    pub units_per_block: usize,
    pub sfe: bool,
    pub sfe_width: usize,
    pub smoothing: bool,
    pub rpn_hidden: usize,
    pub anchor_sides: [f64; 4],
    pub anchor_ratios: Vec<f64>,
    pub roi_bins: usize,
    pub fc_hidden: usize,
    pub pre_nms_top_k: usize,
    pub post_nms_top_k: usize,
    pub rpn_nms_threshold: f64,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            stem_channels: 8,
            block_channels: [16, 32, 64, 128],
            units_per_block: 1,
            sfe: true,
            sfe_width: 32,
            smoothing: true,
            rpn_hidden: 32,
            anchor_sides: LEVEL_SIDES,
            anchor_ratios: vec![0.6, 1.0, 1.1],
            roi_bins: 7,
            fc_hidden: 128,
            pre_nms_top_k: 200,
            post_nms_top_k: 50,
            rpn_nms_threshold: 0.7,
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 32", self.image_size));
        }
        if self.stem_channels == 0 || self.block_channels.contains(&0) || self.sfe_width == 0 || self.rpn_hidden == 0 {
            return bad("channel widths must be positive".into());
        }
        if !(1..=2).contains(&self.units_per_block) {
            return bad(format!("units_per_block must be 1 or 2, got {}", self.units_per_block));
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad(format!("anchor ratios must be positive, got {:?}", self.anchor_ratios));
        }
        if self.anchor_sides.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad(format!("anchor sides must be positive, got {:?}", self.anchor_sides));
        }
        if self.roi_bins == 0 || self.fc_hidden == 0 || self.pre_nms_top_k == 0 || self.post_nms_top_k == 0 {
            return bad("roi_bins, fc_hidden and proposal counts must be positive".into());
        }
        for (name, v) in [
            ("rpn_nms_threshold", self.rpn_nms_threshold),
            ("nms_threshold", self.nms_threshold),
            ("score_threshold", self.score_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            pre_nms_top_k: self.pre_nms_top_k,
            post_nms_top_k: self.post_nms_top_k,
            nms_threshold: self.rpn_nms_threshold,
        }
    }
}

/// Sampling and weighting used by [`Model::image_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    /// Localisation weight of the decoder (final detector) loss.
    pub lambda: f64,
    /// Localisation weight of the proposal stage.
    pub rpn_lambda: f64,
    pub regression: RegressionKind,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub roi_batch: usize,
    pub roi_fg_iou: f64,
    pub jitter_per_gt: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            rpn_lambda: 1.0,
            regression: RegressionKind::IouLoss,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 128,
            roi_batch: 16,
            roi_fg_iou: 0.5,
            jitter_per_gt: 4,
        }
    }
}

/// Per-image loss terms, each already divided by its sample count.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.cls += o.cls;
        self.loc += o.loc;
    }
}

/// Tape handles for one forward pass up to the RPN.
#[derive(Debug, Clone)]
pub struct Forward {
    pub c: [Var; 4],
    pub pyramid: Pyramid,
    pub rpn: RpnOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub sfe: Sfe,
    pub rpn: RpnHead,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(
            &mut params,
            &mut rng,
            1,
            config.stem_channels,
            config.block_channels,
            config.units_per_block,
        )?;
        let sfe = Sfe::new(
            &mut params,
            &mut rng,
            config.block_channels,
            config.sfe_width,
            config.sfe,
            config.smoothing,
        )?;
        let per_cell = config.anchor_ratios.len() * if config.sfe { 1 } else { 4 };
        let rpn = RpnHead::new(&mut params, &mut rng, config.sfe_width, config.rpn_hidden, per_cell)?;
        let decoder = Decoder::new(
            &mut params,
            &mut rng,
            config.sfe_width,
            config.roi_bins,
            config.fc_hidden,
            NUM_CLASSES,
        );
        Ok(Self {
            config,
            params,
            backbone,
            sfe,
            rpn,
            decoder,
        })
    }

    /// Anchors matching the head maps for an `h x w` input.
    pub fn anchors(&self, h: usize, w: usize) -> Result<AnchorSet> {
        let c = &self.config;
        if c.sfe {
            AnchorSet::pyramid_with_sides(h, w, &c.anchor_sides, &c.anchor_ratios)
        } else {
            AnchorSet::single_level_with_sides(h, w, &c.anchor_sides, &c.anchor_ratios)
        }
    }

    pub fn map_infos(&self, h: usize, w: usize) -> Vec<MapInfo> {
        let strides: &[usize] = if self.config.sfe { &LEVEL_STRIDES } else { &LEVEL_STRIDES[3..] };
        strides
            .iter()
            .map(|&s| MapInfo {
                stride: s,
                height: h / s,
                width: w / s,
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Forward> {
        let c = self.backbone.forward(tape, p, x)?;
        let pyramid = self.sfe.forward(tape, p, &c)?;
        let rpn = self.rpn.forward(tape, p, &pyramid.maps)?;
        Ok(Forward { c, pyramid, rpn })
    }

    /// Proposals for image `batch` of a recorded forward pass.
    pub fn proposals(&self, tape: &Tape, fwd: &Forward, anchors: &AnchorSet, batch: usize) -> Result<Vec<Proposal>> {
        let obj: Vec<&Tensor> = fwd.rpn.obj.iter().map(|&v| tape.value(v)).collect();
        let reg: Vec<&Tensor> = fwd.rpn.reg.iter().map(|&v| tape.value(v)).collect();
        proposals_from_maps(&obj, &reg, anchors, batch, &self.config.proposal_config())
    }

    /// Full inference on an `N x 1 x H x W` batch; one list per image,
    /// sorted by descending score.
    pub fn detect(&self, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
        let (n, c, h, w) = images.dims4()?;
        if c != 1 {
            return Err(Error::InvalidArgument(format!("expected 1 input channel, got {c}")));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let fwd = self.forward(&mut tape, &p, x)?;
        let anchors = self.anchors(h, w)?;
        let infos = self.map_infos(h, w);
        let mut out = Vec::with_capacity(n);
        for b in 0..n {
            let props = self.proposals(&tape, &fwd, &anchors, b)?;
            let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
            let (regions, kept) = roi_regions(&boxes, w as f64, h as f64, &infos, b)?;
            if regions.is_empty() {
                out.push(Vec::new());
                continue;
            }
            let (cls, reg) = self.decoder.forward(&mut tape, &p, &fwd.pyramid.maps, &regions)?;
            let logits = tape.value(cls).data().to_vec();
            let raw = tape.value(reg).data().to_vec();
            let mut dets = Vec::new();
            for (r, &pi) in kept.iter().enumerate() {
                let prop = &props[pi];
                let mut probs = logits[r * NUM_CLASSES..][..NUM_CLASSES].to_vec();
                softmax_in_place(&mut probs);
                let t = [raw[4 * r], raw[4 * r + 1], raw[4 * r + 2], raw[4 * r + 3]];
                let bbox = decode_box(&prop.bbox, t).clip(w as f64, h as f64);
                if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
                    continue;
                }
                for (class_id, &pc) in probs.iter().enumerate() {
                    let score = prop.objectness * pc;
                    if score >= self.config.score_threshold && score.is_finite() {
                        dets.push(Detection { bbox, score, class_id });
                    }
                }
            }
            let mut kept = nms(&dets, self.config.nms_threshold);
            kept.sort_by(|a, b| b.score.total_cmp(&a.score));
            kept.truncate(self.config.max_detections);
            out.push(kept);
        }
        Ok(out)
    }

    /// Detections for a single `h x w` grayscale image.
    pub fn detect_image(&self, pixels: &[f64], h: usize, w: usize) -> Result<Vec<Detection>> {
        let t = Tensor::new(&[1, 1, h, w], pixels.to_vec())?;
        Ok(self.detect(&t)?.pop().unwrap_or_default())
    }

    /// Records the two-stage training objective for one `1 x 1 x H x W`
    /// image with ground truth `(box, class)`:
    /// `(bce + rpn_lambda * reg) / n_anchors + (ce + lambda * reg) / n_rois`.
    pub fn image_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        image: &Tensor,
        gts: &[(BBox, usize)],
        ts: &TrainSettings,
        rng: &mut impl Rng,
    ) -> Result<(Var, LossParts)> {
        let (n, _, h, w) = image.dims4()?;
        if n != 1 {
            return Err(Error::InvalidArgument(format!("image_loss takes one image, got {n}")));
        }
        if gts.iter().any(|(_, c)| *c >= NUM_CLASSES) {
            return Err(Error::InvalidArgument("ground-truth class out of range".into()));
        }
        let x = tape.constant(image.clone());
        let fwd = self.forward(tape, p, x)?;
        let anchors = self.anchors(h, w)?;
        let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.0).collect();

        // Stage one: sampled anchors.
        let targets = rpn_targets(&anchors, &gt_boxes, ts.rpn_pos_iou, ts.rpn_neg_iou, ts.rpn_batch, rng)?;
        let offsets = anchors.level_offsets();
        let level_of = |i: usize| offsets.iter().rposition(|&o| o <= i).expect("offset 0 exists");
        let mut rpn_cls = zero(tape);
        let mut rpn_loc = zero(tape);
        for li in 0..anchors.levels.len() {
            let off = offsets[li];
            let hw = anchors.levels[li].height * anchors.levels[li].width;
            let (idx, lab): (Vec<usize>, Vec<f64>) = targets
                .sampled
                .iter()
                .filter(|(i, _)| level_of(*i) == li)
                .map(|&(i, pos)| (i - off, if pos { 1.0 } else { 0.0 }))
                .unzip();
            if !idx.is_empty() {
                let logits = tape.gather(fwd.rpn.obj[li], idx)?;
                let l = tape.bce_with_logits(logits, lab)?;
                rpn_cls = tape.add(rpn_cls, l)?;
            }
            let pos: Vec<&(usize, [f64; 4])> = targets.regression.iter().filter(|(i, _)| level_of(*i) == li).collect();
            if !pos.is_empty() {
                let mut idx = Vec::with_capacity(4 * pos.len());
                for (i, _) in &pos {
                    let local = i - off;
                    let (kind, cell) = (local / hw, local % hw);
                    idx.extend((0..4).map(|j| (4 * kind + j) * hw + cell));
                }
                let raw = tape.gather(fwd.rpn.reg[li], idx)?;
                let raw = tape.reshape(raw, &[pos.len(), 4])?;
                let refs: Vec<BBox> = pos.iter().map(|(i, _)| anchors.anchors[*i].bbox).collect();
                let tg: Vec<[f64; 4]> = pos.iter().map(|(_, d)| *d).collect();
                let l = regression_loss(tape, raw, &refs, tg, ts.regression)?;
                rpn_loc = tape.add(rpn_loc, l)?;
            }
        }
        let n_rpn = targets.sampled.len().max(1) as f64;

        // Stage two: foreground RoIs from proposals, ground truth and jitter.
        let props = self.proposals(tape, &fwd, &anchors, 0)?;
        let (fw, fh) = (w as f64, h as f64);
        let mut rois: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        for g in &gt_boxes {
            rois.push(*g);
            for _ in 0..ts.jitter_per_gt {
                let (gw, gh) = (g.width(), g.height());
                let dx = rng.random_range(-0.15..0.15) * gw;
                let dy = rng.random_range(-0.15..0.15) * gh;
                let sx = rng.random_range(0.85..1.15);
                let sy = rng.random_range(0.85..1.15);
                let (cx, cy) = g.center();
                rois.push(BBox::from_center(cx + dx, cy + dy, gw * sx, gh * sy));
            }
        }
        let mut fg: Vec<(BBox, usize, [f64; 4])> = Vec::new();
        for r in &rois {
            let r = r.clip(fw, fh);
            if !(r.width() > 0.0 && r.height() > 0.0) {
                continue;
            }
            let best = gts
                .iter()
                .enumerate()
                .map(|(j, g)| (j, iou(&r, &g.0)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            if let Some((j, v)) = best {
                if v >= ts.roi_fg_iou {
                    if let Some(d) = target_distances(&r, &gts[j].0) {
                        fg.push((r, gts[j].1, d));
                    }
                }
            }
        }
        fg.shuffle(rng);
        fg.truncate(ts.roi_batch);
        let mut dec_cls = zero(tape);
        let mut dec_loc = zero(tape);
        let n_roi = fg.len().max(1) as f64;
        if !fg.is_empty() {
            let boxes: Vec<BBox> = fg.iter().map(|f| f.0).collect();
            let (regions, kept) = roi_regions(&boxes, fw, fh, &self.map_infos(h, w), 0)?;
            let (cls, reg) = self.decoder.forward(tape, p, &fwd.pyramid.maps, &regions)?;
            let labels = kept.iter().map(|&k| fg[k].1).collect();
            dec_cls = tape.softmax_cross_entropy(cls, labels)?;
            let refs: Vec<BBox> = kept.iter().map(|&k| fg[k].0).collect();
            let tg = kept.iter().map(|&k| fg[k].2).collect();
            dec_loc = regression_loss(tape, reg, &refs, tg, ts.regression)?;
        }

        let parts = LossParts {
            cls: tape.item(rpn_cls) / n_rpn + tape.item(dec_cls) / n_roi,
            loc: tape.item(rpn_loc) / n_rpn + tape.item(dec_loc) / n_roi,
            total: 0.0,
        };
        let a = tape.scale(rpn_loc, ts.rpn_lambda);
        let a = tape.add(rpn_cls, a)?;
        let a = tape.scale(a, 1.0 / n_rpn);
        let b = tape.scale(dec_loc, ts.lambda);
        let b = tape.add(dec_cls, b)?;
        let b = tape.scale(b, 1.0 / n_roi);
        let total = tape.add(a, b)?;
        let parts = LossParts {
            total: tape.item(total),
            ..parts
        };
        Ok((total, parts))
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Summed regression loss of raw outputs `(P, 4)` decoded against `refs`.
fn regression_loss(
    tape: &mut Tape,
    raw: Var,
    refs: &[BBox],
    targets: Vec<[f64; 4]>,
    kind: RegressionKind,
) -> Result<Var> {
    let scales: Vec<f64> = refs.iter().flat_map(distance_scales).collect();
    let e = tape.exp(raw);
    let d = tape.mul_const(e, scales)?;
    match kind {
        RegressionKind::IouLoss => Ok(tape.iou_loss(d, targets)?.0),
        RegressionKind::SmoothL1 => {
            let s = refs.iter().map(|r| (r.width() * r.height()).sqrt() / 2.0).collect();
            tape.smooth_l1_loss(d, targets, s)
        }
    }
}
