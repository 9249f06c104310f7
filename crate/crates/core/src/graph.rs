//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants ([`Graph::constant`]) or differentiable ([`Graph::param`]);
//! interior nodes require a gradient iff any input does, so frozen networks
//! still pass gradients through to their inputs without accumulating any
//! for their own weights.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sigmoid(Var),
    Reshape(Var),
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
    SelectMaps {
        x: Var,
        pairs: Vec<(usize, usize)>,
    },
    NormalizeMax {
        x: Var,
        argmax: Vec<usize>,
        denom: Vec<f64>,
        active: Vec<bool>,
    },
    Upsample {
        x: Var,
        rows: Vec<Lerp>,
        cols: Vec<Lerp>,
    },
    SoftThreshold {
        x: Var,
        omega: f64,
    },
    Erase {
        images: Var,
        masks: Var,
        src: Vec<usize>,
    },
    Bce {
        scores: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
        eps: f64,
    },
    GatherSum {
        x: Var,
        idx: Vec<(usize, usize)>,
        scale: f64,
    },
    SumScaled {
        x: Var,
        scale: f64,
    },
    Add(Var, Var),
    Scale(Var, f64),
}

/// Linear interpolation source for one output coordinate.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lerp {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Corner-aligned bilinear sample positions for resizing `src` to `dst`.
pub(crate) fn lerp_table(src: usize, dst: usize) -> Vec<Lerp> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return Lerp {
                    lo: 0,
                    hi: 0,
                    frac: 0.0,
                };
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Lerp {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// 2-D convolution of `x: (N, Ci, H, W)` with `w: (Co, Ci, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4();
        let (co, wci, kh, kw) = self.value(w).dims4();
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert_eq!(kh, kw, "conv2d expects square kernels");
        let geo = ConvGeom::new(ci, h, wd, kh, stride, pad);
        let mut out = Tensor::zeros(&[n, co, geo.ho, geo.wo]);
        let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let plane = ci * h * wd;
        let out_plane = co * geo.ho * geo.wo;
        for s in 0..n {
            geo.im2col(&xs[s * plane..(s + 1) * plane], &mut cols);
            let o = &mut out.data_mut()[s * out_plane..(s + 1) * out_plane];
            gemm(co, geo.col_rows(), geo.col_cols(), ws, false, &cols, false, o, 0.0);
            if let Some(b) = b {
                let bs = self.nodes[b.0].value.data();
                let hw = geo.ho * geo.wo;
                for (c, bias) in bs.iter().enumerate() {
                    for v in &mut o[c * hw..(c + 1) * hw] {
                        *v += bias;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let od = out.data_mut();
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    let o = p * ho * wo + i * wo + j;
                    od[o] = xs[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f64;
        let xs = self.value(x).data();
        let data = xs.chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c], data), Op::GlobalAvgPool(x), rg)
    }

    /// `x: (N, K)`, `w: (C, K)` -> `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, k) = self.value(x).dims2();
        let (c, wk) = self.value(w).dims2();
        assert_eq!(k, wk, "linear feature mismatch");
        let mut out = Tensor::zeros(&[n, c]);
        gemm(
            n,
            k,
            c,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            out.data_mut(),
            0.0,
        );
        if let Some(b) = b {
            let bs = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(c) {
                for (v, bias) in row.iter_mut().zip(&bs) {
                    *v += bias;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Per-channel `(x - shift) * scale` on `(N, C, H, W)`.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        assert!(scale.len() == c && shift.len() == c);
        let mut out = self.value(x).clone();
        for (p, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let ch = p % c;
            for v in plane {
                *v = (*v - shift[ch]) * scale[ch];
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        )
    }

    /// Gather `(sample, channel)` planes of `(N, C, H, W)` into `(M, 1, H, W)`.
    pub fn select_maps(&mut self, x: Var, pairs: &[(usize, usize)]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(pairs.len() * hw);
        for &(s, ch) in pairs {
            assert!(s < n && ch < c, "select_maps index out of range");
            let off = (s * c + ch) * hw;
            data.extend_from_slice(&xs[off..off + hw]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[pairs.len(), 1, h, w], data),
            Op::SelectMaps {
                x,
                pairs: pairs.to_vec(),
            },
            rg,
        )
    }

    /// Divide each `(M, 1, H, W)` plane by its maximum; planes whose maximum
    /// is at most `eps` are divided by `eps` instead (and so stay near zero).
    pub fn normalize_max(&mut self, x: Var, eps: f64) -> Var {
        let (m, ch, h, w) = self.value(x).dims4();
        let plane = ch * h * w;
        let mut out = self.value(x).clone();
        let mut argmax = Vec::with_capacity(m);
        let mut denom = Vec::with_capacity(m);
        let mut active = Vec::with_capacity(m);
        for (i, p) in out.data_mut().chunks_mut(plane).enumerate() {
            let (arg, mx) = p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| {
                    if v > bv {
                        (j, v)
                    } else {
                        (bi, bv)
                    }
                });
            let d = mx.max(eps);
            for v in p.iter_mut() {
                *v /= d;
            }
            argmax.push(i * plane + arg);
            denom.push(d);
            active.push(mx > eps);
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::NormalizeMax {
                x,
                argmax,
                denom,
                active,
            },
            rg,
        )
    }

    /// Corner-aligned bilinear resize of `(N, C, h, w)` to `(N, C, out_h, out_w)`.
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let rows = lerp_table(h, out_h);
        let cols = lerp_table(w, out_w);
        let xs = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        let od = out.data_mut();
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut od[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (i, r) in rows.iter().enumerate() {
                for (j, q) in cols.iter().enumerate() {
                    let top = src[r.lo * w + q.lo] * (1.0 - q.frac) + src[r.lo * w + q.hi] * q.frac;
                    let bot = src[r.hi * w + q.lo] * (1.0 - q.frac) + src[r.hi * w + q.hi] * q.frac;
                    dst[i * out_w + j] = top * (1.0 - r.frac) + bot * r.frac;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x, rows, cols }, rg)
    }

    /// Elementwise `sigmoid(omega * (x - psi))`.
    pub fn soft_threshold(&mut self, x: Var, omega: f64, psi: f64) -> Var {
        let out = self.value(x).map(|a| sigmoid(omega * (a - psi)));
        let rg = self.rg(x);
        self.push(out, Op::SoftThreshold { x, omega }, rg)
    }

    /// `out[m] = images[src[m]] * (1 - masks[m])`, broadcasting the
    /// single-channel mask over image channels.
    pub fn erase(&mut self, images: Var, masks: Var, src: &[usize]) -> Var {
        let (n, c, h, w) = self.value(images).dims4();
        let (m, mc, mh, mw) = self.value(masks).dims4();
        assert!(mc == 1 && mh == h && mw == w, "erase mask shape mismatch");
        assert_eq!(m, src.len());
        let hw = h * w;
        let is = self.value(images).data();
        let ms = self.value(masks).data();
        let mut out = Tensor::zeros(&[m, c, h, w]);
        let od = out.data_mut();
        for (k, &s) in src.iter().enumerate() {
            assert!(s < n);
            let mask = &ms[k * hw..(k + 1) * hw];
            for ch in 0..c {
                let img = &is[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                let dst = &mut od[(k * c + ch) * hw..(k * c + ch + 1) * hw];
                for p in 0..hw {
                    dst[p] = img[p] * (1.0 - mask[p]);
                }
            }
        }
        let rg = self.rg(images) || self.rg(masks);
        self.push(
            out,
            Op::Erase {
                images,
                masks,
                src: src.to_vec(),
            },
            rg,
        )
    }

    /// Weighted binary cross entropy of probabilities against targets,
    /// `-(1/denom) * sum w * [t ln s + (1 - t) ln(1 - s)]` with scores
    /// clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, scores: Var, targets: &[f64], weights: &[f64], denom: f64, eps: f64) -> Var {
        let ss = self.value(scores).data();
        assert!(ss.len() == targets.len() && ss.len() == weights.len());
        let mut total = 0.0;
        for ((&s, &t), &wt) in ss.iter().zip(targets).zip(weights) {
            if wt == 0.0 {
                continue;
            }
            let s = s.clamp(eps, 1.0 - eps);
            total += wt * (t * s.ln() + (1.0 - t) * (1.0 - s).ln());
        }
        let rg = self.rg(scores);
        self.push(
            Tensor::scalar(-total / denom),
            Op::Bce {
                scores,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
                eps,
            },
            rg,
        )
    }

    /// `scale * sum x[r, c]` over the listed entries of a rank-2 tensor.
    pub fn gather_sum(&mut self, x: Var, idx: &[(usize, usize)], scale: f64) -> Var {
        let (_, c) = self.value(x).dims2();
        let xs = self.value(x).data();
        let total: f64 = idx.iter().map(|&(r, k)| xs[r * c + k]).sum();
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(scale * total),
            Op::GatherSum {
                x,
                idx: idx.to_vec(),
                scale,
            },
            rg,
        )
    }

    pub fn sum_scaled(&mut self, x: Var, scale: f64) -> Var {
        let total = scale * self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::SumScaled { x, scale }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, k), rg)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.backward_from(root, Tensor::from_vec(self.value(root).shape(), vec![1.0]))
    }

    /// Backpropagate an arbitrary upstream gradient `seed` from `root`.
    pub fn backward_from(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(root).shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, ci, h, wd) = xv.dims4();
                let (co, _, k, _) = wv.dims4();
                let geo = ConvGeom::new(ci, h, wd, k, *stride, *pad);
                let (rows, ncols) = (geo.col_rows(), geo.col_cols());
                let plane = ci * h * wd;
                let out_plane = co * ncols;
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut cols = vec![0.0; rows * ncols];
                let mut dcols = vec![0.0; rows * ncols];
                let mut dw = need_w.then(|| Tensor::zeros(wv.shape()));
                let mut dx = need_x.then(|| Tensor::zeros(xv.shape()));
                for s in 0..n {
                    let g = &dy.data()[s * out_plane..(s + 1) * out_plane];
                    if let Some(dw) = dw.as_mut() {
                        geo.im2col(&xv.data()[s * plane..(s + 1) * plane], &mut cols);
                        gemm(co, ncols, rows, g, false, &cols, true, dw.data_mut(), 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, co, ncols, wv.data(), true, g, false, &mut dcols, 0.0);
                        geo.col2im(&dcols, &mut dx.data_mut()[s * plane..(s + 1) * plane]);
                    }
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; co];
                        for s in 0..n {
                            for (c, acc) in db.iter_mut().enumerate() {
                                let off = s * out_plane + c * ncols;
                                *acc += dy.data()[off..off + ncols].iter().sum::<f64>();
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[co], db));
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let data = dy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(dy.shape(), data));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += dy.data()[o];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                for (p, plane) in dx.data_mut().chunks_mut(hw).enumerate() {
                    let g = dy.data()[p] / hw as f64;
                    plane.fill(g);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, k) = xv.dims2();
                let (c, _) = wv.dims2();
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(&[n, k]);
                    gemm(n, c, k, dy.data(), false, wv.data(), false, dx.data_mut(), 0.0);
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(&[c, k]);
                    gemm(c, n, k, dy.data(), true, xv.data(), false, dw.data_mut(), 0.0);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; c];
                        for row in dy.data().chunks(c) {
                            for (acc, g) in db.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[c], db));
                    }
                }
            }
            Op::Sigmoid(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(dy.shape(), data));
            }
            Op::Reshape(x) => {
                let g = dy.clone().reshaped(self.value(*x).shape());
                self.accumulate(grads, *x, g);
            }
            Op::ChannelAffine { x, scale } => {
                let (_, c, h, w) = dy.dims4();
                let mut dx = dy.clone();
                for (p, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let k = scale[p % c];
                    for v in plane {
                        *v *= k;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SelectMaps { x, pairs } => {
                let xv = self.value(*x);
                let (_, c, h, w) = xv.dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                for (m, &(s, ch)) in pairs.iter().enumerate() {
                    let off = (s * c + ch) * hw;
                    for p in 0..hw {
                        dx.data_mut()[off + p] += dy.data()[m * hw + p];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::NormalizeMax {
                x,
                argmax,
                denom,
                active,
            } => {
                let xv = self.value(*x);
                let plane = xv.len() / denom.len().max(1);
                let mut dx = Tensor::zeros(xv.shape());
                for (m, &d) in denom.iter().enumerate() {
                    let range = m * plane..(m + 1) * plane;
                    let g = &dy.data()[range.clone()];
                    let xs = &xv.data()[range.clone()];
                    let out = &mut dx.data_mut()[range];
                    for p in 0..plane {
                        out[p] = g[p] / d;
                    }
                    if active[m] {
                        let dot: f64 = g.iter().zip(xs).map(|(a, b)| a * b).sum();
                        out[argmax[m] - m * plane] -= dot / (d * d);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample { x, rows, cols } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4();
                let (oh, ow) = (rows.len(), cols.len());
                let mut dx = Tensor::zeros(xv.shape());
                for (p, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
                    for (i, r) in rows.iter().enumerate() {
                        for (j, q) in cols.iter().enumerate() {
                            let v = g[i * ow + j];
                            dst[r.lo * w + q.lo] += v * (1.0 - r.frac) * (1.0 - q.frac);
                            dst[r.lo * w + q.hi] += v * (1.0 - r.frac) * q.frac;
                            dst[r.hi * w + q.lo] += v * r.frac * (1.0 - q.frac);
                            dst[r.hi * w + q.hi] += v * r.frac * q.frac;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftThreshold { x, omega } => {
                let data = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &m)| g * omega * m * (1.0 - m))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(dy.shape(), data));
            }
            Op::Erase { images, masks, src } => {
                let iv = self.value(*images);
                let mv = self.value(*masks);
                let (_, c, h, w) = iv.dims4();
                let hw = h * w;
                if self.rg(*images) {
                    let mut di = Tensor::zeros(iv.shape());
                    for (k, &s) in src.iter().enumerate() {
                        let mask = &mv.data()[k * hw..(k + 1) * hw];
                        for ch in 0..c {
                            let g = &dy.data()[(k * c + ch) * hw..(k * c + ch + 1) * hw];
                            let dst = &mut di.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                            for p in 0..hw {
                                dst[p] += g[p] * (1.0 - mask[p]);
                            }
                        }
                    }
                    self.accumulate(grads, *images, di);
                }
                if self.rg(*masks) {
                    let mut dm = Tensor::zeros(mv.shape());
                    for (k, &s) in src.iter().enumerate() {
                        let dst = &mut dm.data_mut()[k * hw..(k + 1) * hw];
                        for ch in 0..c {
                            let g = &dy.data()[(k * c + ch) * hw..(k * c + ch + 1) * hw];
                            let img = &iv.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                            for p in 0..hw {
                                dst[p] -= g[p] * img[p];
                            }
                        }
                    }
                    self.accumulate(grads, *masks, dm);
                }
            }
            Op::Bce {
                scores,
                targets,
                weights,
                denom,
                eps,
            } => {
                let up = dy.item();
                let sv = self.value(*scores);
                let data = sv
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&s, &t), &wt)| {
                        if wt == 0.0 || s < *eps || s > 1.0 - eps {
                            0.0
                        } else {
                            -up * wt * (t / s - (1.0 - t) / (1.0 - s)) / denom
                        }
                    })
                    .collect();
                self.accumulate(grads, *scores, Tensor::from_vec(sv.shape(), data));
            }
            Op::GatherSum { x, idx, scale } => {
                let xv = self.value(*x);
                let (_, c) = xv.dims2();
                let mut dx = Tensor::zeros(xv.shape());
                let g = dy.item() * scale;
                for &(r, k) in idx {
                    dx.data_mut()[r * c + k] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumScaled { x, scale } => {
                let g = dy.item() * scale;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Scale(x, k) => {
                self.accumulate(grads, *x, dy.map(|v| v * k));
            }
        }
    }
}

/// Geometry of a square-kernel convolution over one sample.
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            ci,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ncols = self.col_cols();
        for c in 0..self.ci {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            *v = if jj < 0 || jj >= self.w as isize {
                                0.0
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let ncols = self.col_cols();
        for c in 0..self.ci {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[jj as usize] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}
