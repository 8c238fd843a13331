//! Finite-difference checks for every tape op on random inputs.

use mmsfe::autodiff::gradcheck::{check_gradients, GradCheck};
use mmsfe::autodiff::{ConvSpec, Region, Tape, Tensor, Var};
use mmsfe::Result;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CASES: usize = 100;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap().with_requires_grad(true)
}

/// Values with magnitude in `[0.05, 1)`, kept away from kinks at zero.
fn rand_signed(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn rand_shape(rng: &mut impl Rng) -> Vec<usize> {
    (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..=4)).collect()
}

fn weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Contracts `out` against fixed random weights so every output element
/// receives a distinct upstream gradient.
fn contract(tape: &mut Tape, out: Var, w: &[f64]) -> Result<Var> {
    let p = tape.mul_const(out, w.to_vec())?;
    Ok(tape.sum(p))
}

/// Distances in `[0.5, 5)` with every coordinate at least 1e-3 from the
/// matching reference coordinate.
fn rand_rows(rng: &mut impl Rng, reference: &[[f64; 4]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(reference.len() * 4);
    for r in reference {
        for &g in r {
            let v = loop {
                let v = rng.random_range(0.5..5.0);
                if (v - g).abs() > 1e-3 {
                    break v;
                }
            };
            out.push(v);
        }
    }
    out
}

type Case = fn(&mut ChaCha8Rng) -> Result<GradCheck>;

fn unary(rng: &mut ChaCha8Rng, x: Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> Result<GradCheck> {
    let w = weights(rng, x.numel());
    check_gradients(|t, v| { let o = f(t, v[0])?; contract(t, o, &w) }, &[x], EPS)
}

fn case_add(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = rand_shape(rng);
    let (a, b) = (rand_signed(rng, &s), rand_signed(rng, &s));
    let w = weights(rng, a.numel());
    check_gradients(|t, v| { let o = t.add(v[0], v[1])?; contract(t, o, &w) }, &[a, b], EPS)
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = rand_shape(rng);
    let (a, b) = (rand_signed(rng, &s), rand_signed(rng, &s));
    let w = weights(rng, a.numel());
    check_gradients(|t, v| { let o = t.mul(v[0], v[1])?; contract(t, o, &w) }, &[a, b], EPS)
}

fn case_mul_const(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = rand_shape(rng);
    let x = rand_signed(rng, &s);
    let c = weights(rng, x.numel());
    let w = weights(rng, x.numel());
    check_gradients(|t, v| { let o = t.mul_const(v[0], c.clone())?; contract(t, o, &w) }, &[x], EPS)
}

fn case_scale(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = rand_shape(rng);
    let x = rand_signed(rng, &s);
    let k = rng.random_range(-3.0..3.0);
    let w = weights(rng, x.numel());
    check_gradients(|t, v| { let o = t.scale(v[0], k); contract(t, o, &w) }, &[x], EPS)
}

fn case_add_channel_bias(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let mut s = vec![rng.random_range(1..=3), rng.random_range(1..=4)];
    s.extend((0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=4)));
    let x = rand_signed(rng, &s);
    let b = rand_signed(rng, &[s[1]]);
    let w = weights(rng, x.numel());
    check_gradients(|t, v| { let o = t.add_channel_bias(v[0], v[1])?; contract(t, o, &w) }, &[x, b], EPS)
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = rand_shape(rng);
    let x = rand_signed(rng, &s);
    unary(rng, x, |t, v| Ok(t.relu(v)))
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = rand_shape(rng);
    let x = rand_tensor(rng, &s, -4.0, 4.0);
    unary(rng, x, |t, v| Ok(t.sigmoid(v)))
}

fn case_exp(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = rand_shape(rng);
    let x = rand_tensor(rng, &s, -2.0, 2.0);
    unary(rng, x, |t, v| Ok(t.exp(v)))
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = vec![rng.random_range(1..=4), rng.random_range(2..=6)];
    let x = rand_tensor(rng, &s, -3.0, 3.0);
    unary(rng, x, |t, v| t.softmax(v))
}

fn case_sum(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = rand_shape(rng);
    let x = rand_signed(rng, &s);
    let k = rng.random_range(-3.0..3.0);
    check_gradients(|t, v| { let o = t.sum(v[0]); Ok(t.scale(o, k)) }, &[x], EPS)
}

fn case_reshape(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (a, b, c) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let x = rand_signed(rng, &[a, b, c]);
    unary(rng, x, move |t, v| {
        let s = t.shape(v).to_vec();
        t.reshape(v, &[s[0] * s[2], s[1]])
    })
}

fn case_flatten(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s: Vec<usize> = (0..4).map(|_| rng.random_range(1..=3)).collect();
    let x = rand_signed(rng, &s);
    unary(rng, x, |t, v| t.flatten(v))
}

fn case_gather(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = rand_shape(rng);
    let x = rand_signed(rng, &s);
    let n = x.numel();
    let idx: Vec<usize> = (0..rng.random_range(1..=2 * n)).map(|_| rng.random_range(0..n)).collect();
    let w = weights(rng, idx.len());
    check_gradients(|t, v| { let o = t.gather(v[0], idx.clone())?; contract(t, o, &w) }, &[x], EPS)
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let k = *[1usize, 3].choose(rng).unwrap();
    let stride = rng.random_range(1..=2);
    let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
    let spec = ConvSpec::new(cin, cout, k, stride, pad)?;
    let x = rand_signed(rng, &[n, cin, h, w]);
    let wt = rand_signed(rng, &[cout, cin, k, k]);
    let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    let wts = weights(rng, n * cout * ho * wo);
    check_gradients(|t, v| { let o = t.conv2d(v[0], v[1], &spec)?; contract(t, o, &wts) }, &[x, wt], EPS)
}

/// Pairwise distinct values at least 0.02 apart, so no max-pool window
/// holds a near tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks.iter().map(|&r| r as f64 * 0.02 - 0.01 * n as f64).collect();
    Tensor::new(shape, data).unwrap().with_requires_grad(true)
}

fn even_map(rng: &mut ChaCha8Rng) -> Tensor {
    let s = [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        2 * rng.random_range(1..=3),
        2 * rng.random_range(1..=3),
    ];
    distinct(rng, &s)
}

fn case_max_pool2(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let x = even_map(rng);
    let n = x.numel() / 4;
    let w = weights(rng, n);
    check_gradients(|t, v| { let o = t.max_pool2(v[0])?; contract(t, o, &w) }, &[x], EPS)
}

fn case_avg_pool2(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let x = even_map(rng);
    let n = x.numel() / 4;
    let w = weights(rng, n);
    check_gradients(|t, v| { let o = t.avg_pool2(v[0])?; contract(t, o, &w) }, &[x], EPS)
}

fn case_upsample2(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let x = even_map(rng);
    let n = x.numel() * 4;
    let w = weights(rng, n);
    check_gradients(|t, v| { let o = t.upsample2(v[0])?; contract(t, o, &w) }, &[x], EPS)
}

fn case_linear(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (n, fin, fout) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
    let x = rand_signed(rng, &[n, fin]);
    let wt = rand_signed(rng, &[fout, fin]);
    let b = rand_signed(rng, &[fout]);
    let w = weights(rng, n * fout);
    check_gradients(|t, v| { let o = t.linear(v[0], v[1], v[2])?; contract(t, o, &w) }, &[x, wt, b], EPS)
}

fn case_region_max_pool(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let sizes = [(rng.random_range(4..=8), rng.random_range(4..=8)), (rng.random_range(2..=4), rng.random_range(2..=4))];
    let levels: Vec<Tensor> = sizes.iter().map(|&(h, w)| distinct(rng, &[n, c, h, w])).collect();
    let bins = rng.random_range(1..=3);
    let regions: Vec<Region> = (0..rng.random_range(1..=4))
        .map(|_| {
            let level = rng.random_range(0..2);
            let (h, w) = sizes[level];
            let y0 = rng.random_range(0..h);
            let x0 = rng.random_range(0..w);
            Region {
                level,
                batch: rng.random_range(0..n),
                y0,
                y1: rng.random_range(y0 + 1..=h),
                x0,
                x1: rng.random_range(x0 + 1..=w),
            }
        })
        .collect();
    let w = weights(rng, regions.len() * c * bins * bins);
    check_gradients(
        |t, v| { let o = t.region_max_pool(v, &regions, bins)?; contract(t, o, &w) },
        &levels,
        EPS,
    )
}

fn case_iou_loss(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let p = rng.random_range(1..=5);
    let gt: Vec<[f64; 4]> = (0..p).map(|_| std::array::from_fn(|_| rng.random_range(0.5..5.0))).collect();
    let pred = Tensor::new(&[p, 4], rand_rows(rng, &gt))?.with_requires_grad(true);
    let k = rng.random_range(0.5..2.0);
    check_gradients(|t, v| { let (o, _) = t.iou_loss(v[0], gt.clone())?; Ok(t.scale(o, k)) }, &[pred], EPS)
}

fn case_smooth_l1_loss(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let p = rng.random_range(1..=5);
    let gt: Vec<[f64; 4]> = (0..p).map(|_| std::array::from_fn(|_| rng.random_range(0.5..5.0))).collect();
    let scales: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..3.0)).collect();
    let mut rows = rand_rows(rng, &gt);
    // Keep every normalized residual away from the |d| = 1 knee.
    for (i, v) in rows.iter_mut().enumerate() {
        let (g, s) = (gt[i / 4][i % 4], scales[i / 4]);
        if ((*v - g).abs() / s - 1.0).abs() < 1e-3 {
            *v = g + 0.5 * s;
        }
    }
    let pred = Tensor::new(&[p, 4], rows)?.with_requires_grad(true);
    check_gradients(|t, v| t.smooth_l1_loss(v[0], gt.clone(), scales.clone()), &[pred], EPS)
}

fn case_bce_with_logits(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let s = rand_shape(rng);
    let x = rand_tensor(rng, &s, -4.0, 4.0);
    let targets: Vec<f64> = (0..x.numel()).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    check_gradients(|t, v| t.bce_with_logits(v[0], targets.clone()), &[x], EPS)
}

fn case_softmax_cross_entropy(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (p, k) = (rng.random_range(1..=5), rng.random_range(2..=4));
    let x = rand_tensor(rng, &[p, k], -3.0, 3.0);
    let labels: Vec<usize> = (0..p).map(|_| rng.random_range(0..k)).collect();
    check_gradients(|t, v| t.softmax_cross_entropy(v[0], labels.clone()), &[x], EPS)
}

pub const OPS: &[(&str, Case)] = &[
    ("add", case_add),
    ("mul", case_mul),
    ("mul_const", case_mul_const),
    ("scale", case_scale),
    ("add_channel_bias", case_add_channel_bias),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("exp", case_exp),
    ("softmax", case_softmax),
    ("sum", case_sum),
    ("reshape", case_reshape),
    ("flatten", case_flatten),
    ("gather", case_gather),
    ("conv2d", case_conv2d),
    ("max_pool2", case_max_pool2),
    ("avg_pool2", case_avg_pool2),
    ("upsample2", case_upsample2),
    ("linear", case_linear),
    ("region_max_pool", case_region_max_pool),
    ("iou_loss", case_iou_loss),
    ("smooth_l1_loss", case_smooth_l1_loss),
    ("bce_with_logits", case_bce_with_logits),
    ("softmax_cross_entropy", case_softmax_cross_entropy),
];

/// Worst relative error of `op` over `cases` seeded random instances.
pub fn run_op(name: &str, cases: usize) -> f64 {
    let (_, case) = OPS.iter().find(|(n, _)| *n == name).expect("known op");
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
        let mut rng = ChaCha8Rng::seed_from_u64(tag ^ ((i as u64) << 32));
        let r = case(&mut rng).unwrap_or_else(|e| panic!("{name} case {i}: {e}"));
        assert!(r.checked > 0, "{name} case {i} checked nothing");
        worst = worst.max(r.max_rel_err);
    }
    worst
}
