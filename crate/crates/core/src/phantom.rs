//! Synthetic bladder phantoms: a bright annular wall around a darker lumen
//! with one elliptical tumour. A tumour is MIBC when any of its pixels lies
//! at or beyond the outer wall radius, NMIBC otherwise.
//!
//! On-disk layout:
//!
//! ```text
//! images/{split}/NNNNN.pgm      8-bit binary PGM (P5)
//! annotations/{split}.jsonl     {"image": str, "class_id": int, "box": [x1, y1, x2, y2]}
//! manifest.json
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::GroundTruth;
use crate::geometry::{BBox, MIBC, NMIBC};

pub const BACKGROUND: f64 = 0.1;
pub const LUMEN: f64 = 0.25;
pub const WALL: f64 = 0.7;
pub const TUMOR: f64 = 0.55;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub image_size: usize,
    pub outer_radius: (f64, f64),
    pub wall_thickness: (f64, f64),
    pub tumor_axes: (f64, f64),
    pub center_jitter: f64,
    pub noise_sigma: f64,
    pub mibc_fraction: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            image_size: 128,
            outer_radius: (36.0, 48.0),
            wall_thickness: (5.0, 9.0),
            tumor_axes: (10.0, 20.0),
            center_jitter: 6.0,
            noise_sigma: 0.05,
            mibc_fraction: 0.5,
        }
    }
}

impl PhantomParams {
    /// Default geometry rescaled from the 128-pixel reference to `size`.
    pub fn for_size(size: usize) -> Self {
        let d = Self::default();
        let k = size as f64 / d.image_size as f64;
        let scale = |(a, b): (f64, f64)| (a * k, b * k);
        Self {
            image_size: size,
            outer_radius: scale(d.outer_radius),
            wall_thickness: scale(d.wall_thickness),
            tumor_axes: scale(d.tumor_axes),
            center_jitter: d.center_jitter * k,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("phantom params: {msg}")));
        let ordered = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite();
        if self.image_size < 32 {
            return bad(format!("image_size {} < 32", self.image_size));
        }
        if !ordered(self.outer_radius) || !ordered(self.wall_thickness) || !ordered(self.tumor_axes) {
            return bad("ranges must be positive and ordered".into());
        }
        if self.wall_thickness.1 >= self.outer_radius.0 {
            return bad(format!(
                "inner radius must stay positive: thickness up to {} vs outer from {}",
                self.wall_thickness.1, self.outer_radius.0
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.mibc_fraction) {
            return bad("noise_sigma must be >= 0 and mibc_fraction in [0, 1]".into());
        }
        if !(self.center_jitter >= 0.0) {
            return bad("center_jitter must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub cx: f64,
    pub cy: f64,
    pub inner_radius: f64,
    pub outer_radius: f64,
}

impl Wall {
    pub fn new(cx: f64, cy: f64, inner_radius: f64, outer_radius: f64) -> Result<Self> {
        if !(inner_radius > 0.0 && outer_radius > inner_radius) {
            return Err(Error::InvalidArgument(format!(
                "wall needs outer > inner > 0, got {inner_radius} / {outer_radius}"
            )));
        }
        Ok(Self {
            cx,
            cy,
            inner_radius,
            outer_radius,
        })
    }

    fn radius_at(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Rotation of the `a` axis from +x, radians.
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Continuous axis-aligned bounding box.
    pub fn bounding_box(&self) -> BBox {
        let (s, c) = self.theta.sin_cos();
        let hw = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let hh = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        BBox::new(self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    /// Half-extent along the unit direction at angle `phi`.
    fn support(&self, phi: f64) -> f64 {
        let d = phi - self.theta;
        ((self.a * d.cos()).powi(2) + (self.b * d.sin()).powi(2)).sqrt()
    }

    /// Pixels `(x, y)` whose centres fall inside the ellipse.
    pub fn pixels(&self, size: usize) -> Vec<(usize, usize)> {
        let bb = self.bounding_box();
        let x0 = bb.x1.floor().max(0.0) as usize;
        let y0 = bb.y1.floor().max(0.0) as usize;
        let x1 = (bb.x2.ceil().max(0.0) as usize).min(size);
        let y1 = (bb.y2.ceil().max(0.0) as usize).min(size);
        let mut out = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Class implied by the geometry: MIBC iff a tumour pixel centre lies at
/// radius >= the outer wall radius.
pub fn classify(wall: &Wall, tumor: &Ellipse, size: usize) -> usize {
    let invasive = tumor
        .pixels(size)
        .iter()
        .any(|&(x, y)| wall.radius_at(x as f64 + 0.5, y as f64 + 0.5) >= wall.outer_radius);
    if invasive {
        MIBC
    } else {
        NMIBC
    }
}

/// Tight integer box around a pixel set: `[min, max + 1)` on both axes.
pub fn tight_box(pixels: &[(usize, usize)]) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &(x, y) in pixels {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (!pixels.is_empty()).then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomScene {
    pub size: usize,
    /// Row-major `size x size` intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub wall: Wall,
    pub tumor: Ellipse,
    pub class_id: usize,
    pub gt: BBox,
}

/// Renders the wall/lumen/tumour intensities plus clamped Gaussian noise.
pub fn render(size: usize, wall: &Wall, tumor: &Ellipse, noise_sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let r = wall.radius_at(px, py);
            let base = if r >= wall.outer_radius {
                BACKGROUND
            } else if r >= wall.inner_radius {
                WALL
            } else {
                LUMEN
            };
            img.push(if tumor.contains(px, py) { TUMOR } else { base });
        }
    }
    if noise_sigma > 0.0 {
        let n = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for v in img.iter_mut() {
            *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Builds a scene from explicit geometry. Fails if the tumour has no
/// pixels inside the image.
pub fn scene_from_geometry(
    size: usize,
    wall: Wall,
    tumor: Ellipse,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<PhantomScene> {
    let pixels = tumor.pixels(size);
    let gt = tight_box(&pixels)
        .ok_or_else(|| Error::InvalidArgument("tumour covers no pixels".into()))?;
    Ok(PhantomScene {
        size,
        image: render(size, &wall, &tumor, noise_sigma, rng),
        wall,
        tumor,
        class_id: classify(&wall, &tumor, size),
        gt,
    })
}

const MAX_ATTEMPTS: usize = 10_000;

/// Deterministic scene for `seed`. The intended class is drawn first and
/// tumour placement is resampled until the geometric label agrees.
pub fn generate_scene(seed: u64, params: &PhantomParams) -> Result<PhantomScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = params.image_size;
    let half = size as f64 / 2.0;
    let j = params.center_jitter;
    let cx = half + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let cy = half + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let outer = rng.random_range(params.outer_radius.0..=params.outer_radius.1);
    let thick = rng.random_range(params.wall_thickness.0..=params.wall_thickness.1);
    let wall = Wall::new(cx, cy, outer - thick, outer)?;
    let want = if rng.random_bool(params.mibc_fraction) { MIBC } else { NMIBC };

    for _ in 0..MAX_ATTEMPTS {
        let a = rng.random_range(params.tumor_axes.0..=params.tumor_axes.1);
        let b = rng.random_range(params.tumor_axes.0..=params.tumor_axes.1);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let mut tumor = Ellipse { cx: 0.0, cy: 0.0, a, b, theta };
        let h = tumor.support(phi);
        let (lo, hi) = if want == MIBC {
            (outer - 0.6 * h, (outer + 0.3 * h).min(wall.inner_radius + 0.9 * h))
        } else {
            ((wall.inner_radius - 1.2 * h).max(0.0), outer - h - 1.5)
        };
        if !(lo < hi) {
            continue;
        }
        let rc = rng.random_range(lo..hi);
        tumor.cx = cx + rc * phi.cos();
        tumor.cy = cy + rc * phi.sin();

        let bb = tumor.bounding_box();
        if bb.x1 < 1.0 || bb.y1 < 1.0 || bb.x2 > size as f64 - 1.0 || bb.y2 > size as f64 - 1.0 {
            continue;
        }
        let pixels = tumor.pixels(size);
        let touches_lumen = pixels
            .iter()
            .any(|&(x, y)| wall.radius_at(x as f64 + 0.5, y as f64 + 0.5) < wall.inner_radius);
        if pixels.is_empty() || !touches_lumen || classify(&wall, &tumor, size) != want {
            continue;
        }
        return scene_from_geometry(size, wall, tumor, params.noise_sigma, &mut rng);
    }
    Err(Error::InvalidArgument(format!(
        "could not place a tumour for seed {seed} within {MAX_ATTEMPTS} attempts"
    )))
}

/// Writes `P5` PGM bytes; intensities are rounded from `[0, 1]` to `0..=255`.
pub fn encode_pgm(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit `P5` PGM into `(width, height, intensities / 255)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format!("expected P5 magic, got {}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field `{s}`: {e}"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format!("only 8-bit PGM supported, maxval {maxval}"));
    }
    let body = bytes.get(pos..pos + w * h).ok_or("truncated PGM body")?;
    Ok((w, h, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: [i64; 4],
}

impl AnnotationRecord {
    pub fn bbox(&self) -> BBox {
        let [x1, y1, x2, y2] = self.bbox;
        BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub annotations: String,
    pub records: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub params: PhantomParams,
    pub splits: Vec<SplitManifest>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Option<&SplitManifest> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn record_count(&self) -> usize {
        self.splits.iter().map(|s| s.records.len()).sum()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates `n_train + n_test` scenes and writes them under `out_dir`.
/// Output bytes depend only on `(seed, params, n_train, n_test)`.
pub fn write_dataset(
    n_train: usize,
    n_test: usize,
    seed: u64,
    params: &PhantomParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    params.validate()?;
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Vec::new();
    for (name, n) in [("train", n_train), ("test", n_test)] {
        let img_dir = out_dir.join("images").join(name);
        create_dir(&img_dir)?;
        create_dir(&out_dir.join("annotations"))?;
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let scene = generate_scene(seeder.next_u64(), params)?;
            let rel = format!("images/{name}/{i:05}.pgm");
            write_pgm(&out_dir.join(&rel), scene.size, scene.size, &scene.image)?;
            let b = scene.gt;
            records.push(AnnotationRecord {
                image: rel,
                class_id: scene.class_id,
                bbox: [b.x1 as i64, b.y1 as i64, b.x2 as i64, b.y2 as i64],
            });
        }
        let ann_rel = format!("annotations/{name}.jsonl");
        let ann_path = out_dir.join(&ann_rel);
        let mut f = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        for r in &records {
            let line = serde_json::to_string(r).expect("serializable record");
            writeln!(f, "{line}").map_err(|e| Error::io(&ann_path, e))?;
        }
        splits.push(SplitManifest {
            name: name.to_string(),
            annotations: ann_rel,
            records,
        });
    }
    let manifest = DatasetManifest {
        seed,
        params: params.clone(),
        splits,
    };
    let mpath = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", ln + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// One loaded image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: usize,
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub gts: Vec<GroundTruth>,
}

/// Loads every image of a split listed in `annotations/{split}.jsonl`.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let ann = dir.join("annotations").join(format!("{split}.jsonl"));
    let records = read_annotations(&ann)?;
    let mut samples: Vec<Sample> = Vec::new();
    for rec in records {
        let path = dir.join(&rec.image);
        let gt_box = rec.bbox();
        if let Some(s) = samples.last_mut().filter(|s| s.path == path) {
            s.gts.push(GroundTruth::new(s.image_id, gt_box, rec.class_id)?);
            continue;
        }
        let (width, height, pixels) = read_pgm(&path)?;
        if gt_box.x2 > width as f64 || gt_box.y2 > height as f64 || gt_box.x1 < 0.0 || gt_box.y1 < 0.0 {
            return Err(Error::format(&ann, format!("box {:?} outside {}", rec.bbox, rec.image)));
        }
        let image_id = samples.len();
        samples.push(Sample {
            image_id,
            path,
            width,
            height,
            pixels,
            gts: vec![GroundTruth::new(image_id, gt_box, rec.class_id)?],
        });
    }
    Ok(samples)
}
