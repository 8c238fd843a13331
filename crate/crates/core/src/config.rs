//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::RegressionKind;
use crate::network::{ModelConfig, TrainSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub anchor_sides: [f64; 4],
    pub anchor_ratios: Vec<f64>,
    pub lambda: f64,
    pub rpn_lambda: f64,
    pub regression: RegressionKind,
    pub sfe: bool,
    pub smoothing: bool,
    pub units_per_block: usize,
    pub stem_channels: usize,
    pub block_channels: [usize; 4],
    pub sfe_width: usize,
    pub rpn_hidden: usize,
    pub fc_hidden: usize,
    pub roi_bins: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Learning rate is multiplied by 0.1 from `floor(lr_drop * epochs)` on.
    pub lr_drop: f64,
    pub clip_grad_norm: f64,
    pub augment: bool,
    pub val_fraction: f64,
    pub max_train_images: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub roi_batch: usize,
    pub roi_fg_iou: f64,
    pub jitter_per_gt: usize,
    pub pre_nms_top_k: usize,
    pub post_nms_top_k: usize,
    pub rpn_nms_threshold: f64,
    pub nms_threshold: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainSettings::default();
        Self {
            seed: 7,
            image_size: m.image_size,
            anchor_sides: m.anchor_sides,
            anchor_ratios: m.anchor_ratios,
            lambda: t.lambda,
            rpn_lambda: t.rpn_lambda,
            regression: t.regression,
            sfe: m.sfe,
            smoothing: m.smoothing,
            units_per_block: m.units_per_block,
            stem_channels: m.stem_channels,
            block_channels: m.block_channels,
            sfe_width: m.sfe_width,
            rpn_hidden: m.rpn_hidden,
            fc_hidden: m.fc_hidden,
            roi_bins: m.roi_bins,
            learning_rate: 0.02,
            weight_decay: 1e-4,
            momentum: 0.9,
            epochs: 24,
            batch_size: 8,
            warmup_steps: 100,
            lr_drop: 0.75,
            clip_grad_norm: 10.0,
            augment: true,
            val_fraction: 0.1,
            max_train_images: 0,
            rpn_pos_iou: t.rpn_pos_iou,
            rpn_neg_iou: t.rpn_neg_iou,
            rpn_batch: t.rpn_batch,
            roi_batch: t.roi_batch,
            roi_fg_iou: t.roi_fg_iou,
            jitter_per_gt: t.jitter_per_gt,
            pre_nms_top_k: m.pre_nms_top_k,
            post_nms_top_k: m.post_nms_top_k,
            rpn_nms_threshold: m.rpn_nms_threshold,
            nms_threshold: m.nms_threshold,
            score_threshold: m.score_threshold,
            max_detections: m.max_detections,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

fn parse_four<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 4]> {
    let l: Vec<T> = parse_list(key, v)?;
    l.try_into()
        .map_err(|l: Vec<T>| Error::Config(format!("`{key}`: expected 4 values, got {}", l.len())))
}

impl RunConfig {
    /// Ordered `key = value` lines; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("image_size", self.image_size.to_string());
        kv("anchor_sides", list(&self.anchor_sides));
        kv("anchor_ratios", list(&self.anchor_ratios));
        kv("lambda", self.lambda.to_string());
        kv("rpn_lambda", self.rpn_lambda.to_string());
        kv("regression", self.regression.to_string());
        kv("sfe", self.sfe.to_string());
        kv("smoothing", self.smoothing.to_string());
        kv("units_per_block", self.units_per_block.to_string());
        kv("stem_channels", self.stem_channels.to_string());
        kv("block_channels", list(&self.block_channels));
        kv("sfe_width", self.sfe_width.to_string());
        kv("rpn_hidden", self.rpn_hidden.to_string());
        kv("fc_hidden", self.fc_hidden.to_string());
        kv("roi_bins", self.roi_bins.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("momentum", self.momentum.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("lr_drop", self.lr_drop.to_string());
        kv("clip_grad_norm", self.clip_grad_norm.to_string());
        kv("augment", self.augment.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("max_train_images", self.max_train_images.to_string());
        kv("rpn_pos_iou", self.rpn_pos_iou.to_string());
        kv("rpn_neg_iou", self.rpn_neg_iou.to_string());
        kv("rpn_batch", self.rpn_batch.to_string());
        kv("roi_batch", self.roi_batch.to_string());
        kv("roi_fg_iou", self.roi_fg_iou.to_string());
        kv("jitter_per_gt", self.jitter_per_gt.to_string());
        kv("pre_nms_top_k", self.pre_nms_top_k.to_string());
        kv("post_nms_top_k", self.post_nms_top_k.to_string());
        kv("rpn_nms_threshold", self.rpn_nms_threshold.to_string());
        kv("nms_threshold", self.nms_threshold.to_string());
        kv("score_threshold", self.score_threshold.to_string());
        kv("max_detections", self.max_detections.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "anchor_sides" => self.anchor_sides = parse_four(key, v)?,
            "anchor_ratios" => self.anchor_ratios = parse_list(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "rpn_lambda" => self.rpn_lambda = parse(key, v)?,
            "regression" => self.regression = v.parse()?,
            "sfe" => self.sfe = parse_bool(key, v)?,
            "smoothing" => self.smoothing = parse_bool(key, v)?,
            "units_per_block" => self.units_per_block = parse(key, v)?,
            "stem_channels" => self.stem_channels = parse(key, v)?,
            "block_channels" => self.block_channels = parse_four(key, v)?,
            "sfe_width" => self.sfe_width = parse(key, v)?,
            "rpn_hidden" => self.rpn_hidden = parse(key, v)?,
            "fc_hidden" => self.fc_hidden = parse(key, v)?,
            "roi_bins" => self.roi_bins = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "lr_drop" => self.lr_drop = parse(key, v)?,
            "clip_grad_norm" => self.clip_grad_norm = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "max_train_images" => self.max_train_images = parse(key, v)?,
            "rpn_pos_iou" => self.rpn_pos_iou = parse(key, v)?,
            "rpn_neg_iou" => self.rpn_neg_iou = parse(key, v)?,
            "rpn_batch" => self.rpn_batch = parse(key, v)?,
            "roi_batch" => self.roi_batch = parse(key, v)?,
            "roi_fg_iou" => self.roi_fg_iou = parse(key, v)?,
            "jitter_per_gt" => self.jitter_per_gt = parse(key, v)?,
            "pre_nms_top_k" => self.pre_nms_top_k = parse(key, v)?,
            "post_nms_top_k" => self.post_nms_top_k = parse(key, v)?,
            "rpn_nms_threshold" => self.rpn_nms_threshold = parse(key, v)?,
            "nms_threshold" => self.nms_threshold = parse(key, v)?,
            "score_threshold" => self.score_threshold = parse(key, v)?,
            "max_detections" => self.max_detections = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite() && self.rpn_lambda > 0.0 && self.rpn_lambda.is_finite()) {
            return bad(format!("lambda and rpn_lambda must be positive, got {} / {}", self.lambda, self.rpn_lambda));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("need learning_rate > 0, 0 <= momentum < 1, weight_decay >= 0".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.rpn_batch == 0 || self.roi_batch == 0 {
            return bad("epochs, batch_size, rpn_batch and roi_batch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lr_drop) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("lr_drop must lie in [0, 1] and val_fraction in [0, 1)".into());
        }
        if !(self.clip_grad_norm >= 0.0) {
            return bad("clip_grad_norm must be >= 0 (0 disables)".into());
        }
        if !(0.0 < self.rpn_neg_iou && self.rpn_neg_iou <= self.rpn_pos_iou && self.rpn_pos_iou < 1.0) {
            return bad(format!(
                "need 0 < rpn_neg_iou <= rpn_pos_iou < 1, got {} / {}",
                self.rpn_neg_iou, self.rpn_pos_iou
            ));
        }
        if !(0.0 < self.roi_fg_iou && self.roi_fg_iou <= 1.0) {
            return bad(format!("roi_fg_iou must lie in (0, 1], got {}", self.roi_fg_iou));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            stem_channels: self.stem_channels,
            block_channels: self.block_channels,
            units_per_block: self.units_per_block,
            sfe: self.sfe,
            sfe_width: self.sfe_width,
            smoothing: self.smoothing,
            rpn_hidden: self.rpn_hidden,
            anchor_sides: self.anchor_sides,
            anchor_ratios: self.anchor_ratios.clone(),
            roi_bins: self.roi_bins,
            fc_hidden: self.fc_hidden,
            pre_nms_top_k: self.pre_nms_top_k,
            post_nms_top_k: self.post_nms_top_k,
            rpn_nms_threshold: self.rpn_nms_threshold,
            score_threshold: self.score_threshold,
            nms_threshold: self.nms_threshold,
            max_detections: self.max_detections,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            lambda: self.lambda,
            rpn_lambda: self.rpn_lambda,
            regression: self.regression,
            rpn_pos_iou: self.rpn_pos_iou,
            rpn_neg_iou: self.rpn_neg_iou,
            rpn_batch: self.rpn_batch,
            roi_batch: self.roi_batch,
            roi_fg_iou: self.roi_fg_iou,
            jitter_per_gt: self.jitter_per_gt,
        }
    }
}
