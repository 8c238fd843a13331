use rand::Rng;

use crate::anchors::assign_level;
use crate::autodiff::{Region, Tape, Var};
use crate::error::Result;
use crate::geometry::BBox;

use super::layers::{Bound, Linear, ParamStore};

/// One pooled head map: its stride and `(height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapInfo {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

/// Cell window of `roi` on `map`: edges floored (start) and ceiled (end),
/// at least one cell wide, clamped to the map.
pub fn cell_window(roi: &BBox, map: &MapInfo) -> (usize, usize, usize, usize) {
    let s = map.stride as f64;
    let span = |lo: f64, hi: f64, n: usize| {
        let a = ((lo / s).floor().max(0.0) as usize).min(n - 1);
        let b = ((hi / s).ceil() as usize).clamp(a + 1, n);
        (a, b)
    };
    let (y0, y1) = span(roi.y1, roi.y2, map.height);
    let (x0, x1) = span(roi.x1, roi.x2, map.width);
    (y0, y1, x0, x1)
}

/// Routes and quantises RoIs. Each RoI is clipped to the image first;
/// RoIs left with zero area are dropped. Returns the regions and the
/// indices of the RoIs they came from.
///
/// With several maps (finest first) the map is chosen by
/// [`assign_level`]; with one map every RoI uses it.
pub fn roi_regions(
    rois: &[BBox],
    image_width: f64,
    image_height: f64,
    maps: &[MapInfo],
    batch: usize,
) -> Result<(Vec<Region>, Vec<usize>)> {
    let mut regions = Vec::with_capacity(rois.len());
    let mut kept = Vec::with_capacity(rois.len());
    for (i, roi) in rois.iter().enumerate() {
        let c = roi.clip(image_width, image_height);
        if !(c.width() > 0.0 && c.height() > 0.0) {
            continue;
        }
        let level = if maps.len() == 1 {
            0
        } else {
            (assign_level(&c)? - 1).min(maps.len() - 1)
        };
        let (y0, y1, x0, x1) = cell_window(&c, &maps[level]);
        regions.push(Region {
            level,
            batch,
            y0,
            y1,
            x0,
            x1,
        });
        kept.push(i);
    }
    Ok((regions, kept))
}

/// Two fully connected layers over pooled RoI features into a 2-way class
/// head and a 4-value tblr regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub reg: Linear,
    pub bins: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        width: usize,
        bins: usize,
        hidden: usize,
        classes: usize,
    ) -> Self {
        let fan_in = width * bins * bins;
        Self {
            fc1: Linear::new(store, rng, "dec.fc1", fan_in, hidden),
            fc2: Linear::new(store, rng, "dec.fc2", hidden, hidden),
            cls: Linear::with_std(store, rng, "dec.cls", hidden, classes, 0.01),
            reg: Linear::with_std(store, rng, "dec.reg", hidden, 4, 0.001),
            bins,
        }
    }

    /// Class logits `(R, K)` and raw regression `(R, 4)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, maps: &[Var], regions: &[Region]) -> Result<(Var, Var)> {
        let pooled = tape.region_max_pool(maps, regions, self.bins)?;
        let x = tape.flatten(pooled)?;
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, p, h)?;
        let h = tape.relu(h);
        let cls = self.cls.forward(tape, p, h)?;
        let reg = self.reg.forward(tape, p, h)?;
        Ok((cls, reg))
    }
}
