//! Training loop, batched inference and split evaluation.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Sgd, Tape, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, EvalReport, GroundTruth, ImageDetection};
use crate::geometry::{BBox, NUM_CLASSES};
use crate::network::{Checkpoint, LossParts, Model, TrainSettings};
use crate::phantom::Sample;

/// Worker count from `MMSF_THREADS`, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var("MMSF_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

/// Runs `f` on a pool capped at [`thread_count`] workers.
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(thread_count()).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Mirrors an image and its boxes horizontally and/or vertically.
pub fn flip(pixels: &[f64], h: usize, w: usize, gts: &[(BBox, usize)], hflip: bool, vflip: bool) -> (Vec<f64>, Vec<(BBox, usize)>) {
    let mut out = vec![0.0; pixels.len()];
    for y in 0..h {
        let sy = if vflip { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if hflip { w - 1 - x } else { x };
            out[y * w + x] = pixels[sy * w + sx];
        }
    }
    let (fw, fh) = (w as f64, h as f64);
    let boxes = gts
        .iter()
        .map(|&(b, c)| {
            let (x1, x2) = if hflip { (fw - b.x2, fw - b.x1) } else { (b.x1, b.x2) };
            let (y1, y2) = if vflip { (fh - b.y2, fh - b.y1) } else { (b.y1, b.y2) };
            (BBox::new(x1, y1, x2, y2), c)
        })
        .collect();
    (out, boxes)
}

fn sample_gts(s: &Sample) -> Vec<(BBox, usize)> {
    s.gts.iter().map(|g| (g.bbox, g.class_id)).collect()
}

/// Loss and parameter gradients of one image.
fn image_grads(model: &Model, s: &Sample, ts: &TrainSettings, seed: u64, augment: bool) -> Result<(Vec<Vec<f64>>, LossParts)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gts = sample_gts(s);
    let (pixels, gts) = if augment {
        let (hf, vf) = (rng.random_bool(0.5), rng.random_bool(0.5));
        flip(&s.pixels, s.height, s.width, &gts, hf, vf)
    } else {
        (s.pixels.clone(), gts)
    };
    let image = Tensor::new(&[1, 1, s.height, s.width], pixels)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let (loss, parts) = model.image_loss(&mut tape, &p, &image, &gts, ts, &mut rng)?;
    tape.backward(loss)?;
    Ok((model.params.collect_grads(&tape, &p), parts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    pub lr: f64,
    pub val_map: Option<f64>,
    pub val_mean_iou: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        format!(
            "epoch {:>3}  total {:.4}  cls {:.4}  loc {:.4}  lr {:.5}  val_mAP {}  val_IoU {}  {:.1}s",
            self.epoch,
            self.total,
            self.cls,
            self.loc,
            self.lr,
            opt(self.val_map),
            opt(self.val_mean_iou),
            self.seconds
        )
    }
}

/// `mAP * mean TP IoU`, zero without true positives.
pub fn weighted_map(r: &EvalReport) -> f64 {
    r.map * r.mean_iou.unwrap_or(0.0)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the best validation score (last epoch without a
    /// validation set).
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub log: Vec<EpochLog>,
}

/// Splits off the last `val_fraction` of `samples` for model selection.
pub fn split_validation(samples: &[Sample], val_fraction: f64) -> (&[Sample], &[Sample]) {
    let n_val = ((samples.len() as f64) * val_fraction).floor() as usize;
    let n_val = n_val.min(samples.len().saturating_sub(1));
    samples.split_at(samples.len() - n_val)
}

/// Momentum SGD over `train` with per-batch gradient averaging, norm
/// clipping, linear warm-up and one 10x learning-rate drop. `val` (may be
/// empty) is evaluated after every epoch to pick the best weights.
pub fn train_model(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let ts = cfg.train_settings();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7a11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let drop_epoch = (cfg.lr_drop * cfg.epochs as f64).floor() as usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let factor = if epoch > drop_epoch { 0.1 } else { 1.0 };
        let mut sum = LossParts::default();
        let mut lr = cfg.learning_rate;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
            let results = with_pool(|| {
                batch
                    .par_iter()
                    .zip(&seeds)
                    .map(|(&i, &s)| image_grads(&model, &train[i], &ts, s, cfg.augment))
                    .collect::<Result<Vec<_>>>()
            })?;
            model.params.zero_grads();
            for (k, (grads, parts)) in results.iter().enumerate() {
                if !parts.total.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        step: bi,
                        detail: format!("image {} loss {parts:?}", train[batch[k]].path.display()),
                    });
                }
                model.params.add_grads(grads)?;
                sum += *parts;
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            let norm = model.params.grad_norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step: bi,
                    detail: format!("gradient norm {norm}"),
                });
            }
            if cfg.clip_grad_norm > 0.0 && norm > cfg.clip_grad_norm {
                model.params.scale_grads(cfg.clip_grad_norm / norm);
            }
            let warm = if cfg.warmup_steps > 0 {
                ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            lr = cfg.learning_rate * factor * warm;
            opt.lr = lr;
            opt.step(model.params.tensors_mut())?;
            model.params.zero_grads();
            step += 1;
        }
        let n = train.len() as f64;
        let (val_map, val_mean_iou, score) = if val.is_empty() {
            (None, None, epoch as f64)
        } else {
            let r = evaluate_samples(&model, val)?;
            (Some(r.map), r.mean_iou, weighted_map(&r))
        };
        let entry = EpochLog {
            epoch,
            total: sum.total / n,
            cls: sum.cls / n,
            loc: sum.loc / n,
            lr,
            val_map,
            val_mean_iou,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
    })
}

/// Detections for every sample, tagged with its `image_id`, in sample order.
pub fn detect_samples(model: &Model, samples: &[Sample]) -> Result<Vec<ImageDetection>> {
    let per: Vec<Vec<ImageDetection>> = with_pool(|| {
        samples
            .par_iter()
            .map(|s| {
                let dets = model.detect_image(&s.pixels, s.height, s.width)?;
                Ok(dets
                    .into_iter()
                    .map(|det| ImageDetection {
                        image_id: s.image_id,
                        det,
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per.into_iter().flatten().collect())
}

pub fn ground_truths(samples: &[Sample]) -> Vec<GroundTruth> {
    samples.iter().flat_map(|s| s.gts.iter().copied()).collect()
}

pub fn evaluate_samples(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    let dets = detect_samples(model, samples)?;
    Ok(evaluate(&dets, &ground_truths(samples), NUM_CLASSES))
}

/// Writes `model` with the resolved `cfg` embedded.
pub fn save_model(cfg: &RunConfig, model: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_store(&cfg.to_text(), &model.params).save(path)
}

/// Rebuilds the model described by the embedded config and restores its
/// weights.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ck.config_text)?;
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    ck.restore(&mut model.params)?;
    Ok((cfg, model))
}

/// One row of a loss-weight comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub map: f64,
    pub mean_iou: Option<f64>,
    pub weighted_map: f64,
}

impl SweepRow {
    pub fn from_report(lambda: f64, r: &EvalReport) -> Self {
        Self {
            lambda,
            map: r.map,
            mean_iou: r.mean_iou,
            weighted_map: weighted_map(r),
        }
    }
}

/// Fixed-width comparison table; the best weighted mAP is starred.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let best = rows
        .iter()
        .map(|r| r.weighted_map)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut s = String::from("lambda      mAP  mean_IoU  mAPxIoU\n");
    for r in rows {
        let iou = r.mean_iou.map_or("     -".to_string(), |v| format!("{v:.4}"));
        let star = if r.weighted_map == best { " *" } else { "" };
        s.push_str(&format!("{:>6}  {:.4}    {iou}   {:.4}{star}\n", r.lambda, r.map, r.weighted_map));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_moves_pixels_and_boxes_together() {
        let (h, w) = (4, 6);
        let mut px = vec![0.0; h * w];
        // Mark the box [1, 0, 3, 2) region.
        for y in 0..2 {
            for x in 1..3 {
                px[y * w + x] = 1.0;
            }
        }
        let gts = [(BBox::new(1.0, 0.0, 3.0, 2.0), 1)];
        for (hf, vf) in [(true, false), (false, true), (true, true)] {
            let (out, b) = flip(&px, h, w, &gts, hf, vf);
            let b = b[0].0;
            for y in 0..h {
                for x in 0..w {
                    let inside = (x as f64) >= b.x1 && (x as f64) < b.x2 && (y as f64) >= b.y1 && (y as f64) < b.y2;
                    assert_eq!(out[y * w + x] == 1.0, inside, "flip {hf} {vf} at {x},{y}");
                }
            }
        }
    }

    #[test]
    fn validation_split_keeps_training_nonempty() {
        let s: Vec<Sample> = (0..3)
            .map(|i| Sample {
                image_id: i,
                path: Default::default(),
                width: 1,
                height: 1,
                pixels: vec![0.0],
                gts: vec![],
            })
            .collect();
        let (t, v) = split_validation(&s, 0.5);
        assert_eq!((t.len(), v.len()), (2, 1));
        let (t, v) = split_validation(&s[..1], 0.9);
        assert_eq!((t.len(), v.len()), (1, 0));
    }
}
