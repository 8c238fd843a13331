use crate::error::{shape_err, Error, Result};
use crate::losses;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::{ConvSpec, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A cell-aligned pooling window on one pyramid level, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub level: usize,
    pub batch: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddChannelBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    Sum(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2(Var, Vec<usize>),
    AvgPool2(Var),
    Upsample2(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    RegionMaxPool {
        levels: Vec<Var>,
        argmax: Vec<Option<(usize, usize)>>,
    },
    IouLoss {
        pred: Var,
        gt: Vec<[f64; 4]>,
    },
    SmoothL1 {
        pred: Var,
        gt: Vec<[f64; 4]>,
        scales: Vec<f64>,
    },
    BceLogits(Var, Vec<f64>),
    SoftmaxXent(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only record of one forward pass. Parents always precede their
/// children, so reverse insertion order is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Records a copy of a trainable tensor.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut v = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        v.set_requires_grad(true);
        self.push(v, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape(), data).expect("same shape");
        self.derived(t, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        Ok(self.derived(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        Ok(self.derived(t, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if c.len() != vx.numel() {
            return Err(shape_err!(
                "mul_const: {} constants for shape {:?}",
                c.len(),
                vx.shape()
            ));
        }
        let data = vx.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let t = Tensor::new(vx.shape(), data)?;
        Ok(self.derived(t, Op::MulConst(x, c), &[x]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    /// `x[n, c, ..] + bias[c]` for `x` of rank >= 2.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let vb = self.value(bias);
        if vx.shape().len() < 2 || vb.shape() != [vx.shape()[1]] {
            return Err(shape_err!(
                "add_channel_bias: bias {:?} does not match channels of {:?}",
                vb.shape(),
                vx.shape()
            ));
        }
        let c = vx.shape()[1];
        let inner: usize = vx.shape()[2..].iter().product();
        let mut data = vx.data().to_vec();
        for (chunk_idx, chunk) in data.chunks_mut(inner).enumerate() {
            let b = vb.data()[chunk_idx % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let t = Tensor::new(vx.shape(), data)?;
        Ok(self.derived(t, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let k = *vx
            .shape()
            .last()
            .ok_or_else(|| shape_err!("softmax of a scalar"))?;
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(k.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(vx.shape(), data)?;
        Ok(self.derived(t, Op::Softmax(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.derived(t, Op::Reshape(x), &[x]))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.first().ok_or_else(|| shape_err!("flatten of a scalar"))?;
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Picks flat elements `idx` of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.numel()) {
            return Err(shape_err!("gather index {bad} out of range {}", vx.numel()));
        }
        let data = idx.iter().map(|&i| vx.data()[i]).collect();
        let t = Tensor::from_vec(data);
        Ok(self.derived(t, Op::Gather(x, idx), &[x]))
    }

    /// 2-D convolution without bias. `w` is `(out, in, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        if c != spec.in_channels {
            return Err(shape_err!(
                "conv2d: input has {c} channels, spec expects {}",
                spec.in_channels
            ));
        }
        let k = spec.kernel;
        if ws != [spec.out_channels, spec.in_channels, k, k] {
            return Err(shape_err!(
                "conv2d: weights {:?}, expected {:?}",
                ws,
                [spec.out_channels, spec.in_channels, k, k]
            ));
        }
        let ho = spec.output_extent(h)?;
        let wo = spec.output_extent(wd)?;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride: spec.stride,
            pad: spec.padding,
            ho,
            wo,
        };
        let co = spec.out_channels;
        let rows = geom.col_rows();
        let plane = geom.col_cols();
        let xin = self.value(x).data();
        let wdata = self.value(w).data();
        let mut out = vec![0.0; n * co * plane];
        let cols = if geom.is_pointwise() {
            for b in 0..n {
                let src = &xin[b * c * h * wd..(b + 1) * c * h * wd];
                gemm(co, rows, plane, wdata, false, src, false, &mut out[b * co * plane..(b + 1) * co * plane], 0.0);
            }
            Vec::new()
        } else {
            let mut cols = vec![0.0; n * rows * plane];
            for b in 0..n {
                let src = &xin[b * c * h * wd..(b + 1) * c * h * wd];
                let cb = &mut cols[b * rows * plane..(b + 1) * rows * plane];
                im2col(src, &geom, cb);
                gemm(co, rows, plane, wdata, false, cb, false, &mut out[b * co * plane..(b + 1) * co * plane], 0.0);
            }
            cols
        };
        let t = Tensor::new(&[n, co, ho, wo], out)?;
        Ok(self.derived(t, Op::Conv2d { x, w, geom, cols }, &[x, w]))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(shape_err!("max_pool2 on {h}x{w} map"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    arg.push(best);
                }
            }
        }
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.derived(t, Op::MaxPool2(x, arg), &[x]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(shape_err!("avg_pool2 on {h}x{w} map"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = base + 2 * oy * w + 2 * ox;
                    out.push(0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]));
                }
            }
        }
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.derived(t, Op::AvgPool2(x), &[x]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for oy in 0..ho {
                let srow = &src[plane * h * w + (oy / 2) * w..][..w];
                let drow = &mut out[plane * ho * wo + oy * wo..][..wo];
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = srow[ox / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.derived(t, Op::Upsample2(x), &[x]))
    }

    /// Fully connected layer: `x (N, in)`, `w (out, in)`, `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let (n, fin) = match xs[..] {
            [n, f] => (n, f),
            _ => return Err(shape_err!("linear: input must be (N, F), got {xs:?}")),
        };
        if ws.len() != 2 || ws[1] != fin || bs != [ws[0]] {
            return Err(shape_err!(
                "linear: input {xs:?}, weights {ws:?}, bias {bs:?} are inconsistent"
            ));
        }
        let fout = ws[0];
        let mut out = vec![0.0; n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, &mut out, 1.0);
        let t = Tensor::new(&[n, fout], out)?;
        Ok(self.derived(t, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Max pooling of each region into a `bins x bins` grid. Bin `i` of a
    /// window of extent `e` starting at `s` covers cells
    /// `[s + floor(i e / bins), s + ceil((i + 1) e / bins))`.
    pub fn region_max_pool(&mut self, levels: &[Var], regions: &[Region], bins: usize) -> Result<Var> {
        if levels.is_empty() || bins == 0 {
            return Err(Error::InvalidArgument("region_max_pool needs levels and bins".into()));
        }
        let c = self.value(levels[0]).dims4()?.1;
        for &l in levels {
            if self.value(l).dims4()?.1 != c {
                return Err(shape_err!("region_max_pool: levels differ in channel count"));
            }
        }
        let mut out = Vec::with_capacity(regions.len() * c * bins * bins);
        let mut argmax = Vec::with_capacity(out.capacity());
        for r in regions {
            let lv = *levels
                .get(r.level)
                .ok_or_else(|| shape_err!("region level {} out of range", r.level))?;
            let (n, _, h, w) = self.value(lv).dims4()?;
            if r.batch >= n || r.y0 >= r.y1 || r.x0 >= r.x1 || r.y1 > h || r.x1 > w {
                return Err(shape_err!("region {r:?} invalid for level map {n}x{c}x{h}x{w}"));
            }
            let src = self.value(lv).data();
            let (eh, ew) = (r.y1 - r.y0, r.x1 - r.x0);
            for ch in 0..c {
                let base = (r.batch * c + ch) * h * w;
                for by in 0..bins {
                    let ys = r.y0 + by * eh / bins;
                    let ye = r.y0 + ((by + 1) * eh).div_ceil(bins);
                    for bx in 0..bins {
                        let xs = r.x0 + bx * ew / bins;
                        let xe = r.x0 + ((bx + 1) * ew).div_ceil(bins);
                        let mut best: Option<usize> = None;
                        for y in ys..ye {
                            for x in xs..xe {
                                let i = base + y * w + x;
                                if best.is_none_or(|b| src[i] > src[b]) {
                                    best = Some(i);
                                }
                            }
                        }
                        out.push(best.map_or(0.0, |b| src[b]));
                        argmax.push(best.map(|b| (r.level, b)));
                    }
                }
            }
        }
        let t = Tensor::new(&[regions.len(), c, bins, bins], out)?;
        let parents = levels.to_vec();
        Ok(self.derived(
            t,
            Op::RegionMaxPool {
                levels: parents.clone(),
                argmax,
            },
            &parents,
        ))
    }

    /// Sum of IoU losses between predicted distances `pred (P, 4)` and
    /// targets `gt`, both `[t, b, l, r]`. Non-intersecting pairs contribute
    /// nothing. Returns the loss and the number of pairs that contributed.
    pub fn iou_loss(&mut self, pred: Var, gt: Vec<[f64; 4]>) -> Result<(Var, usize)> {
        let rows = self.check_box_rows(pred, gt.len(), "iou_loss")?;
        let mut total = 0.0;
        let mut used = 0;
        for (p, g) in rows.iter().zip(&gt) {
            if let Some(l) = losses::iou_loss_raw(g, p) {
                total += l;
                used += 1;
            }
        }
        let v = self.derived(Tensor::scalar(total), Op::IouLoss { pred, gt }, &[pred]);
        Ok((v, used))
    }

    /// Sum of Smooth-L1 losses over `(pred - gt) / scale` per coordinate.
    pub fn smooth_l1_loss(&mut self, pred: Var, gt: Vec<[f64; 4]>, scales: Vec<f64>) -> Result<Var> {
        let rows = self.check_box_rows(pred, gt.len(), "smooth_l1_loss")?;
        if scales.len() != gt.len() {
            return Err(shape_err!("smooth_l1_loss: {} scales for {} rows", scales.len(), gt.len()));
        }
        let total = rows
            .iter()
            .zip(&gt)
            .zip(&scales)
            .map(|((p, g), s)| losses::smooth_l1_box(g, p, *s))
            .sum();
        Ok(self.derived(Tensor::scalar(total), Op::SmoothL1 { pred, gt, scales }, &[pred]))
    }

    /// Summed binary cross-entropy on logits with 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let vx = self.value(logits);
        if vx.numel() != targets.len() {
            return Err(shape_err!("bce: {} logits, {} targets", vx.numel(), targets.len()));
        }
        let total = vx
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| t * softplus(-z) + (1.0 - t) * softplus(z))
            .sum();
        Ok(self.derived(Tensor::scalar(total), Op::BceLogits(logits, targets), &[logits]))
    }

    /// Summed softmax cross-entropy of `logits (P, K)` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (p, k) = match shape[..] {
            [p, k] => (p, k),
            _ => return Err(shape_err!("softmax_cross_entropy: logits must be (P, K), got {shape:?}")),
        };
        if labels.len() != p || labels.iter().any(|&l| l >= k) {
            return Err(shape_err!("softmax_cross_entropy: bad labels for {p}x{k} logits"));
        }
        let data = self.value(logits).data();
        let total = data
            .chunks(k)
            .zip(&labels)
            .map(|(row, &l)| log_sum_exp(row) - row[l])
            .sum();
        Ok(self.derived(Tensor::scalar(total), Op::SoftmaxXent(logits, labels), &[logits]))
    }

    fn check_box_rows(&self, pred: Var, n: usize, what: &str) -> Result<Vec<[f64; 4]>> {
        let vp = self.value(pred);
        if vp.shape() != [n, 4] {
            return Err(shape_err!("{what}: prediction shape {:?}, expected [{n}, 4]", vp.shape()));
        }
        if vp.data().iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument(format!("{what}: negative predicted distance")));
        }
        Ok(vp.data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, lo);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.needs_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes[..];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = grad_slot(nodes, lo, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = grad_slot(nodes, lo, *b) {
                    add_into(gb, g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = grad_slot(nodes, lo, *a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                }
                if let Some(gb) = grad_slot(nodes, lo, *b) {
                    for ((d, gi), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                }
            }
            Op::MulConst(x, c) => {
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for ((d, gi), ci) in gx.iter_mut().zip(g).zip(c) {
                        *d += gi * ci;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for (d, gi) in gx.iter_mut().zip(g) {
                        *d += gi * s;
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                let shape = node.value.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = grad_slot(nodes, lo, *b) {
                    for (chunk_idx, chunk) in g.chunks(inner).enumerate() {
                        gb[chunk_idx % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for ((d, gi), y) in gx.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for ((d, gi), y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for ((d, gi), y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gi * y;
                    }
                }
            }
            Op::Softmax(x) => {
                let k = *node.value.shape().last().unwrap_or(&1);
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for ((drow, grow), yrow) in gx.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gi - dot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    add_into(gx, g);
                }
            }
            Op::Gather(x, idx) => {
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for (gi, &j) in g.iter().zip(idx) {
                        gx[j] += gi;
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let n = node.value.shape()[0];
                let co = node.value.shape()[1];
                let rows = geom.col_rows();
                let plane = geom.col_cols();
                let in_len = geom.c * geom.h * geom.w;
                let xin = self.value(*x).data();
                let wdata = self.value(*w).data();
                if let Some(gw) = grad_slot(nodes, lo, *w) {
                    for b in 0..n {
                        let gout = &g[b * co * plane..(b + 1) * co * plane];
                        let cb = if geom.is_pointwise() {
                            &xin[b * in_len..(b + 1) * in_len]
                        } else {
                            &cols[b * rows * plane..(b + 1) * rows * plane]
                        };
                        gemm(co, plane, rows, gout, false, cb, true, gw, 1.0);
                    }
                }
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    let mut dcols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
                    for b in 0..n {
                        let gout = &g[b * co * plane..(b + 1) * co * plane];
                        let gxb = &mut gx[b * in_len..(b + 1) * in_len];
                        if geom.is_pointwise() {
                            gemm(rows, co, plane, wdata, true, gout, false, gxb, 1.0);
                        } else {
                            gemm(rows, co, plane, wdata, true, gout, false, &mut dcols, 0.0);
                            col2im(&dcols, geom, gxb);
                        }
                    }
                }
            }
            Op::MaxPool2(x, arg) => {
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for (gi, &j) in g.iter().zip(arg) {
                        gx[j] += gi;
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("rank 4");
                let (ho, wo) = (h / 2, w / 2);
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for (o, gi) in g.iter().enumerate() {
                        let plane = o / (ho * wo);
                        let oy = (o / wo) % ho;
                        let ox = o % wo;
                        let i = plane * h * w + 2 * oy * w + 2 * ox;
                        for j in [i, i + 1, i + w, i + w + 1] {
                            gx[j] += 0.25 * gi;
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("rank 4");
                let wo = 2 * w;
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for (o, gi) in g.iter().enumerate() {
                        let plane = o / (4 * h * w);
                        let oy = (o / wo) % (2 * h);
                        let ox = o % wo;
                        gx[plane * h * w + (oy / 2) * w + ox / 2] += gi;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let n = node.value.shape()[0];
                let fout = node.value.shape()[1];
                let fin = self.shape(*x)[1];
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    gemm(n, fout, fin, g, false, self.value(*w).data(), false, gx, 1.0);
                }
                if let Some(gw) = grad_slot(nodes, lo, *w) {
                    gemm(fout, n, fin, g, true, self.value(*x).data(), false, gw, 1.0);
                }
                if let Some(gb) = grad_slot(nodes, lo, *b) {
                    for row in g.chunks(fout) {
                        add_into(gb, row);
                    }
                }
            }
            Op::RegionMaxPool { levels, argmax } => {
                for (li, &lv) in levels.iter().enumerate() {
                    if let Some(gl) = grad_slot(nodes, lo, lv) {
                        for (gi, a) in g.iter().zip(argmax) {
                            if let Some((l, j)) = a {
                                if *l == li {
                                    gl[*j] += gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::IouLoss { pred, gt } => {
                let vp = self.value(*pred).data();
                if let Some(gp) = grad_slot(nodes, lo, *pred) {
                    for (r, gtr) in gt.iter().enumerate() {
                        let p = [vp[4 * r], vp[4 * r + 1], vp[4 * r + 2], vp[4 * r + 3]];
                        if let Some(d) = losses::iou_loss_grad_raw(gtr, &p) {
                            for k in 0..4 {
                                gp[4 * r + k] += g[0] * d[k];
                            }
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, gt, scales } => {
                let vp = self.value(*pred).data();
                if let Some(gp) = grad_slot(nodes, lo, *pred) {
                    for (r, (gtr, s)) in gt.iter().zip(scales).enumerate() {
                        let p = [vp[4 * r], vp[4 * r + 1], vp[4 * r + 2], vp[4 * r + 3]];
                        let d = losses::smooth_l1_box_grad(gtr, &p, *s);
                        for k in 0..4 {
                            gp[4 * r + k] += g[0] * d[k];
                        }
                    }
                }
            }
            Op::BceLogits(x, t) => {
                let vx = self.value(*x).data();
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for ((d, z), ti) in gx.iter_mut().zip(vx).zip(t) {
                        *d += g[0] * (sigmoid(*z) - ti);
                    }
                }
            }
            Op::SoftmaxXent(x, labels) => {
                let vx = self.value(*x).data();
                let k = self.shape(*x)[1];
                if let Some(gx) = grad_slot(nodes, lo, *x) {
                    for ((drow, row), &l) in gx.chunks_mut(k).zip(vx.chunks(k)).zip(labels) {
                        let mut p = row.to_vec();
                        softmax_in_place(&mut p);
                        p[l] -= 1.0;
                        for (d, pi) in drow.iter_mut().zip(p) {
                            *d += g[0] * pi;
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], lo: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(lo[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
