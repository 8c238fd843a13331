//! Box-regression and classification losses.
//!
//! The IoU loss works on the distance-to-sides form: for a prediction
//! `(t~, b~, l~, r~)` and a ground truth `(t, b, l, r)` sharing an anchor
//! point, `L = -ln(I / U)` with the analytic gradient
//! `dL/dx~ = (1/U) dX~/dx~ - (U + I)/(U I) dI/dx~`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{overlap_from_distances, Overlap, TblrBox};

/// Lower clamp applied to probabilities and to the IoU loss areas.
pub const EPS: f64 = 1e-7;

pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Smooth-L1 summed over the four distances, on residuals divided by `scale`.
pub fn smooth_l1_box(gt: &[f64; 4], pred: &[f64; 4], scale: f64) -> f64 {
    gt.iter()
        .zip(pred)
        .map(|(g, p)| smooth_l1((p - g) / scale))
        .sum()
}

pub fn smooth_l1_box_grad(gt: &[f64; 4], pred: &[f64; 4], scale: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = smooth_l1_grad((pred[k] - gt[k]) / scale) / scale;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouLossTerms {
    pub loss: f64,
    pub overlap: Overlap,
}

/// `-ln(I/U)` for a shared-anchor pair. `None` when the boxes do not
/// intersect; such pairs are excluded from the loss.
pub fn iou_loss_forward(gt: &TblrBox, pred: &TblrBox) -> Result<Option<IouLossTerms>> {
    let overlap = crate::geometry::tblr_overlap(gt, pred)?;
    Ok(iou_loss_terms(overlap))
}

/// Gradient of [`iou_loss_forward`] with respect to the predicted
/// `(t~, b~, l~, r~)`. At `x~ == x` the intersection is treated as not
/// bound by the prediction (zero subgradient).
pub fn iou_loss_backward(gt: &TblrBox, pred: &TblrBox) -> Result<Option<[f64; 4]>> {
    crate::geometry::tblr_overlap(gt, pred)?;
    Ok(iou_loss_grad_raw(&gt.distances(), &pred.distances()))
}

fn iou_loss_terms(overlap: Overlap) -> Option<IouLossTerms> {
    if overlap.i <= 0.0 {
        return None;
    }
    let i = overlap.i.max(EPS);
    let u = overlap.u.max(EPS);
    Some(IouLossTerms {
        loss: -(i / u).ln(),
        overlap,
    })
}

pub(crate) fn iou_loss_raw(gt: &[f64; 4], pred: &[f64; 4]) -> Option<f64> {
    iou_loss_terms(overlap_from_distances(gt, pred)).map(|t| t.loss)
}

pub(crate) fn iou_loss_grad_raw(gt: &[f64; 4], pred: &[f64; 4]) -> Option<[f64; 4]> {
    let o = overlap_from_distances(gt, pred);
    if o.i <= 0.0 {
        return None;
    }
    let i = o.i.max(EPS);
    let u = o.u.max(EPS);
    let [pt, pb, pl, pr] = *pred;
    let d_area = [pl + pr, pl + pr, pt + pb, pt + pb];
    let d_inter = [
        if pt < gt[0] { o.i_w } else { 0.0 },
        if pb < gt[1] { o.i_w } else { 0.0 },
        if pl < gt[2] { o.i_h } else { 0.0 },
        if pr < gt[3] { o.i_h } else { 0.0 },
    ];
    let k = (u + i) / (u * i);
    let mut g = [0.0; 4];
    for j in 0..4 {
        g[j] = d_area[j] / u - k * d_inter[j];
    }
    Some(g)
}

/// One classification target: `p_star` is 1 for MIBC, `p` the predicted
/// MIBC probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassTarget {
    pub p_star: u8,
    pub p: f64,
}

impl ClassTarget {
    pub fn new(p_star: u8, p: f64) -> Self {
        Self {
            p_star,
            p: p.clamp(EPS, 1.0 - EPS),
        }
    }
}

/// Summed binary cross-entropy `sum_i -log(p*_i p_i + (1 - p*_i)(1 - p_i))`.
pub fn bce(targets: &[ClassTarget]) -> f64 {
    targets
        .iter()
        .map(|t| {
            let p = t.p.clamp(EPS, 1.0 - EPS);
            let s = f64::from(t.p_star);
            -(s * p + (1.0 - s) * (1.0 - p)).ln()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionKind {
    SmoothL1,
    IouLoss,
}

impl fmt::Display for RegressionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegressionKind::SmoothL1 => "smooth_l1",
            RegressionKind::IouLoss => "iou",
        })
    }
}

impl FromStr for RegressionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth_l1" | "smoothl1" => Ok(RegressionKind::SmoothL1),
            "iou" | "iou_loss" => Ok(RegressionKind::IouLoss),
            other => Err(Error::Config(format!(
                "unknown regression kind `{other}` (expected smooth_l1 or iou)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub n_pred: usize,
    pub regression_kind: RegressionKind,
}

impl LossConfig {
    pub fn new(lambda: f64, n_pred: usize, regression_kind: RegressionKind) -> Result<Self> {
        if !(lambda > 0.0) || n_pred == 0 {
            return Err(Error::InvalidArgument(format!(
                "loss config needs lambda > 0 and n_pred >= 1 (got {lambda}, {n_pred})"
            )));
        }
        Ok(Self {
            lambda,
            n_pred,
            regression_kind,
        })
    }
}

/// `(l_cls + lambda * l_loc) / n_pred`.
pub fn total_loss(l_cls: f64, l_loc: f64, cfg: &LossConfig) -> f64 {
    (l_cls + cfg.lambda * l_loc) / cfg.n_pred as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tb(d: [f64; 4]) -> TblrBox {
        TblrBox::new(0.0, 0.0, d[0], d[1], d[2], d[3]).unwrap()
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn smooth_l1_c1_at_knee() {
        let h = 1e-9;
        assert!((smooth_l1(1.0 - h) - smooth_l1(1.0 + h)).abs() < 1e-8);
        assert!((smooth_l1_grad(1.0 - h) - smooth_l1_grad(1.0 + h)).abs() < 1e-8);
        assert!((smooth_l1_grad(-1.0 + h) - smooth_l1_grad(-1.0 - h)).abs() < 1e-8);
    }

    #[test]
    fn iou_loss_examples() {
        let unit = tb([1.0; 4]);
        let t = iou_loss_forward(&unit, &unit).unwrap().unwrap();
        assert_eq!(t.loss, 0.0);

        let gt = tb([2.0; 4]);
        let t = iou_loss_forward(&gt, &unit).unwrap().unwrap();
        assert_eq!((t.overlap.i, t.overlap.u), (4.0, 16.0));
        assert!((t.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn iou_loss_decreases_along_interpolation() {
        let gt = tb([2.0; 4]);
        let mut prev = f64::INFINITY;
        for s in 0..=20 {
            let v = 1.0 + s as f64 / 20.0;
            let l = iou_loss_forward(&gt, &tb([v; 4])).unwrap().unwrap().loss;
            assert!(l < prev);
            prev = l;
        }
        assert!(prev.abs() < 1e-12);
    }

    #[test]
    fn iou_loss_grad_at_identity() {
        let unit = tb([1.0; 4]);
        let g = iou_loss_backward(&unit, &unit).unwrap().unwrap();
        assert_eq!(g, [0.5; 4]);
    }

    #[test]
    fn iou_loss_excluded_when_disjoint() {
        // Shared anchor with zero extent on one side for both boxes.
        let gt = tb([1.0, 1.0, 0.0, 2.0]);
        let pred = tb([1.0, 1.0, 2.0, 0.0]);
        assert!(iou_loss_forward(&gt, &pred).unwrap().is_none());
        assert!(iou_loss_backward(&gt, &pred).unwrap().is_none());
    }

    #[test]
    fn iou_loss_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = 1e-6;
        let mut checked = 0;
        while checked < 1000 {
            let gt: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.1..10.0));
            let pred: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.1..10.0));
            if (0..4).any(|k| (gt[k] - pred[k]).abs() < 10.0 * eps) {
                continue;
            }
            let g = iou_loss_grad_raw(&gt, &pred).unwrap();
            for k in 0..4 {
                let mut p = pred;
                p[k] += eps;
                let up = iou_loss_raw(&gt, &p).unwrap();
                p[k] -= 2.0 * eps;
                let dn = iou_loss_raw(&gt, &p).unwrap();
                let fd = (up - dn) / (2.0 * eps);
                let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5, "k={k} analytic={} fd={fd}", g[k]);
            }
            checked += 1;
        }
    }

    #[test]
    fn iou_loss_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let gt: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.1..10.0));
            let pred: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.1..10.0));
            let c = rng.random_range(0.1..20.0);
            let gs = gt.map(|v| v * c);
            let ps = pred.map(|v| v * c);
            let l = iou_loss_raw(&gt, &pred).unwrap();
            let ls = iou_loss_raw(&gs, &ps).unwrap();
            assert!((l - ls).abs() < 1e-10);
            let g = iou_loss_grad_raw(&gt, &pred).unwrap();
            let gsc = iou_loss_grad_raw(&gs, &ps).unwrap();
            for k in 0..4 {
                assert!((g[k] / c - gsc[k]).abs() < 1e-10 * (1.0 + g[k].abs()));
            }
        }
    }

    #[test]
    fn iou_loss_positive_off_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let gt: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.1..10.0));
            let mut pred = gt;
            pred[rng.random_range(0..4)] += rng.random_range(0.01..3.0);
            assert!(iou_loss_raw(&gt, &pred).unwrap() > 0.0);
            assert_eq!(iou_loss_raw(&gt, &gt).unwrap(), 0.0);
        }
    }

    #[test]
    fn bce_values() {
        assert!(bce(&[ClassTarget::new(1, 1.0 - EPS)]) < 1e-6);
        assert!((bce(&[ClassTarget::new(1, 0.5)]) - 2f64.ln()).abs() < 1e-12);
        assert!((bce(&[ClassTarget::new(0, 0.9)]) + 0.1f64.ln()).abs() < 1e-12);
        assert!(bce(&[ClassTarget::new(0, 0.0)]) >= 0.0);
        assert!(bce(&[ClassTarget::new(1, 0.0)]).is_finite());
    }

    #[test]
    fn total_loss_values() {
        let cfg = LossConfig::new(2.0, 1, RegressionKind::IouLoss).unwrap();
        assert_eq!(total_loss(1.0, 0.5, &cfg), 2.0);
        let cfg = LossConfig::new(1.0, 4, RegressionKind::IouLoss).unwrap();
        assert_eq!(total_loss(3.0, 0.0, &cfg), 0.75);
        assert!(LossConfig::new(0.0, 1, RegressionKind::IouLoss).is_err());
        assert!(LossConfig::new(1.0, 0, RegressionKind::IouLoss).is_err());
    }

    #[test]
    fn regression_kind_parses() {
        assert_eq!("iou".parse::<RegressionKind>().unwrap(), RegressionKind::IouLoss);
        assert_eq!(
            "smooth_l1".parse::<RegressionKind>().unwrap(),
            RegressionKind::SmoothL1
        );
        assert!("l2".parse::<RegressionKind>().is_err());
    }
}
