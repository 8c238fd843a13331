//! `mmsfe` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 1 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::anchors::kmeanspp_cluster;
use crate::config::RunConfig;
use crate::error::Error;
use crate::evalmetrics::EvalReport;
use crate::geometry::{class_name, BBox, Detection};
use crate::losses::RegressionKind;
use crate::network::Model;
use crate::phantom::{load_split, read_pgm, write_dataset, write_pgm, DatasetManifest, PhantomParams, Sample};
use crate::train::{
    detect_samples, ground_truths, load_model, save_model, split_validation, sweep_table, train_model, SweepRow,
};

#[derive(Debug, Parser)]
#[command(name = "mmsfe", version, about = "Multi-scale tumour detector on synthetic bladder phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom train/test dataset.
    GenData(GenDataArgs),
    /// Cluster ground-truth box shapes with k-means++ and suggest anchor ratios.
    ClusterAnchors(ClusterArgs),
    /// Train a detector (optionally sweeping the localisation weight).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run a checkpoint on one PGM image.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Config file whose `anchor_ratios` is replaced (created if missing).
    #[arg(long)]
    pub patch_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// One value trains once; several values run a comparison sweep.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub lambda: Vec<f64>,
    #[arg(long)]
    pub regression: Option<RegressionKind>,
    /// Use only the coarsest backbone map (single-level ablation).
    #[arg(long)]
    pub no_sfe: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train on the first N images of the split (0 = all).
    #[arg(long)]
    pub max_train_images: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub overlay_dir: Option<PathBuf>,
    /// Detections below this score are left out of overlays.
    #[arg(long, default_value_t = 0.5)]
    pub overlay_min_score: f64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub overlay_min_score: f64,
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(m) => eprintln!("error: {m}"),
            }
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::ClusterAnchors(a) => cmd_cluster_anchors(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CliResult {
    if a.train == 0 || a.test == 0 {
        return Err(CliError::Usage("--train and --test must be at least 1".into()));
    }
    let params = PhantomParams::for_size(a.size);
    params.validate()?;
    let m = write_dataset(a.train, a.test, a.seed, &params, &a.out)?;
    println!("dataset: {}", a.out.display());
    println!("seed: {}", m.seed);
    for s in &m.splits {
        let mibc = s.records.iter().filter(|r| r.class_id == 1).count();
        println!(
            "split {}: {} images, {} {}, {} {}",
            s.name,
            s.records.len(),
            s.records.len() - mibc,
            class_name(0),
            mibc,
            class_name(1)
        );
    }
    println!("records: {}", m.record_count());
    Ok(())
}

fn require_dataset(dir: &Path) -> CliResult<DatasetManifest> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Usage(format!(
            "dataset missing: {} has no manifest.json (run gen-data first)",
            dir.display()
        )));
    }
    Ok(DatasetManifest::load(dir)?)
}

pub fn cmd_cluster_anchors(a: &ClusterArgs) -> CliResult {
    let m = require_dataset(&a.data)?;
    let split = m
        .split(&a.split)
        .ok_or_else(|| CliError::Usage(format!("dataset has no split `{}`", a.split)))?;
    let boxes: Vec<BBox> = split.records.iter().map(|r| r.bbox()).collect();
    let c = kmeanspp_cluster(&boxes, a.k, a.seed)?;
    println!("boxes: {}", boxes.len());
    println!("k: {}", a.k);
    println!("iterations: {}", c.iterations);
    let hist = c.histogram();
    for (i, (w, h)) in c.centroids.iter().enumerate() {
        println!("centroid {i}: w={w:.3} h={h:.3} ratio={:.4} members={}", w / h, hist[i]);
    }
    if c.duplicate_centroids {
        println!("warning: duplicate centroids (fewer distinct shapes than k)");
    }
    let ratios: Vec<f64> = c.ratios().iter().map(|r| (r * 1e4).round() / 1e4).collect();
    let text: Vec<String> = ratios.iter().map(f64::to_string).collect();
    println!("anchor_ratios = {}", text.join(","));
    if let Some(path) = &a.patch_config {
        let mut cfg = if path.exists() { RunConfig::load(path)? } else { RunConfig::default() };
        cfg.anchor_ratios = ratios;
        cfg.validate()?;
        cfg.save(path)?;
        println!("patched: {}", path.display());
    }
    Ok(())
}

/// Resolves config file, `--set` overrides and explicit flags (in that
/// order of precedence, lowest first).
pub fn resolve_train_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(d) = &a.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(r) = a.regression {
        cfg.regression = r;
    }
    if a.no_sfe {
        cfg.sfe = false;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.max_train_images {
        cfg.max_train_images = v;
    }
    if let [l] = a.lambda[..] {
        cfg.lambda = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn training_split(cfg: &RunConfig) -> CliResult<Vec<Sample>> {
    require_dataset(&cfg.data_dir)?;
    let mut train = load_split(&cfg.data_dir, "train")?;
    if cfg.max_train_images > 0 {
        train.truncate(cfg.max_train_images);
    }
    Ok(train)
}

/// Trains one model into `cfg.out_dir`, returning its test-split report.
fn train_one(cfg: &RunConfig, train: &[Sample], test: &[Sample]) -> CliResult<EvalReport> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join("config.txt"), &cfg.to_text())?;
    let (tr, val) = split_validation(train, cfg.val_fraction);
    println!(
        "training: {} images ({} held out), {} epochs, lambda {}, regression {}, sfe {}",
        tr.len(),
        val.len(),
        cfg.epochs,
        cfg.lambda,
        cfg.regression,
        cfg.sfe
    );
    let mut log_lines = String::new();
    let outcome = train_model(cfg, tr, val, |e| {
        println!("{}", e.to_line());
        log_lines.push_str(&serde_json::to_string(e).expect("serializable log"));
        log_lines.push('\n');
    });
    write_text(&cfg.out_dir.join("train_log.jsonl"), &log_lines)?;
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            let dump = cfg.out_dir.join("diagnostic.txt");
            write_text(&dump, &format!("{e}\n\nconfig:\n{}\nlog:\n{log_lines}", cfg.to_text()))?;
            return Err(CliError::Runtime(format!("{e} (diagnostics in {})", dump.display())));
        }
        Err(e) => return Err(e.into()),
    };
    save_model(cfg, &outcome.best, &cfg.out_dir.join("best.ckpt"))?;
    save_model(cfg, &outcome.last, &cfg.out_dir.join("last.ckpt"))?;
    println!("best epoch: {}", outcome.best_epoch);
    let dets = detect_samples(&outcome.best, test)?;
    let report = crate::evalmetrics::evaluate(&dets, &ground_truths(test), crate::geometry::NUM_CLASSES);
    write_text(&cfg.out_dir.join("report.json"), &report_json(cfg, "test", &report))?;
    print!("{}", report.to_text());
    Ok(report)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult {
    let cfg = resolve_train_config(a)?;
    let train = training_split(&cfg)?;
    let test = load_split(&cfg.data_dir, "test")?;
    if a.lambda.len() <= 1 {
        train_one(&cfg, &train, &test)?;
        return Ok(());
    }
    let mut rows = Vec::new();
    for &l in &a.lambda {
        let mut c = cfg.clone();
        c.lambda = l;
        c.out_dir = cfg.out_dir.join(format!("lambda_{l}"));
        c.validate()?;
        let report = train_one(&c, &train, &test)?;
        rows.push(SweepRow::from_report(l, &report));
    }
    let table = sweep_table(&rows);
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join("lambda_sweep.txt"), &table)?;
    write_text(
        &cfg.out_dir.join("lambda_sweep.json"),
        &serde_json::to_string_pretty(&rows).expect("serializable rows"),
    )?;
    println!("\n{table}");
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    split: &'a str,
    config: String,
    metrics: &'a EvalReport,
}

pub fn report_json(cfg: &RunConfig, split: &str, r: &EvalReport) -> String {
    serde_json::to_string_pretty(&ReportFile {
        split,
        config: cfg.to_text(),
        metrics: r,
    })
    .expect("serializable report")
        + "\n"
}

/// Pixels on the one-pixel outline of `b` rounded to the integer grid and
/// clipped to the image.
pub fn outline_pixels(b: &BBox, w: usize, h: usize) -> Vec<(usize, usize)> {
    let clampi = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n);
    let (x0, x1) = (clampi(b.x1, w), clampi(b.x2, w));
    let (y0, y1) = (clampi(b.y1, h), clampi(b.y2, h));
    if x1 <= x0 || y1 <= y0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for x in x0..x1 {
        out.push((x, y0));
        if y1 - 1 != y0 {
            out.push((x, y1 - 1));
        }
    }
    for y in y0 + 1..y1.saturating_sub(1) {
        out.push((x0, y));
        if x1 - 1 != x0 {
            out.push((x1 - 1, y));
        }
    }
    out
}

pub const PRED_OUTLINE: f64 = 1.0;
pub const GT_OUTLINE: f64 = 0.9;

/// Burns predicted (and optional ground-truth) outlines into a copy of
/// `pixels`.
pub fn draw_overlay(pixels: &[f64], w: usize, h: usize, preds: &[BBox], gts: &[BBox]) -> Vec<f64> {
    let mut out = pixels.to_vec();
    for (boxes, v) in [(gts, GT_OUTLINE), (preds, PRED_OUTLINE)] {
        for b in boxes {
            for (x, y) in outline_pixels(b, w, h) {
                out[y * w + x] = v;
            }
        }
    }
    out
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult {
    let (cfg, model) = load_model(&a.checkpoint)?;
    require_dataset(&a.data)?;
    let samples = load_split(&a.data, &a.split)?;
    let dets = detect_samples(&model, &samples)?;
    let report = crate::evalmetrics::evaluate(&dets, &ground_truths(&samples), crate::geometry::NUM_CLASSES);
    println!("split: {}", a.split);
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        write_text(p, &report_json(&cfg, &a.split, &report))?;
    }
    if let Some(dir) = &a.overlay_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for s in &samples {
            let preds: Vec<BBox> = dets
                .iter()
                .filter(|d| d.image_id == s.image_id && d.det.score >= a.overlay_min_score)
                .map(|d| d.det.bbox)
                .collect();
            let gts: Vec<BBox> = s.gts.iter().map(|g| g.bbox).collect();
            let img = draw_overlay(&s.pixels, s.width, s.height, &preds, &gts);
            let name = s.path.file_name().map_or_else(|| format!("{:05}.pgm", s.image_id).into(), |n| n.to_owned());
            write_pgm(&dir.join(name), s.width, s.height, &img)?;
        }
        println!("overlays: {}", dir.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictFile {
    image: String,
    detections: Vec<Detection>,
}

pub fn predict_json(path: &Path, dets: &[Detection]) -> String {
    serde_json::to_string_pretty(&PredictFile {
        image: path.display().to_string(),
        detections: dets.to_vec(),
    })
    .expect("serializable detections")
        + "\n"
}

pub fn cmd_predict(a: &PredictArgs) -> CliResult {
    let (_, model): (RunConfig, Model) = load_model(&a.checkpoint)?;
    let (w, h, pixels) = read_pgm(&a.image)?;
    let dets = model.detect_image(&pixels, h, w)?;
    let json = predict_json(&a.image, &dets);
    match &a.out {
        Some(p) => write_text(p, &json)?,
        None => print!("{json}"),
    }
    if let Some(p) = &a.overlay {
        let preds: Vec<BBox> = dets.iter().filter(|d| d.score >= a.overlay_min_score).map(|d| d.bbox).collect();
        write_pgm(p, w, h, &draw_overlay(&pixels, w, h, &preds, &[]))?;
    }
    Ok(())
}
