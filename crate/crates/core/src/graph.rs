//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated eagerly; calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`].
//! Parameters are borrowed from their [`ParamStore`] for the lifetime of the
//! graph, so optimizer updates happen after the graph is dropped.
//!
//! Image tensors are NCHW. Scalar-valued ops (losses) produce shape `[1]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape, Result};
use crate::nn::ParamStore;
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;
use crate::warp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Value<'a, S> {
    Owned(Tensor<S>),
    Borrowed(&'a Tensor<S>),
}

impl<S> Value<'_, S> {
    fn get(&self) -> &Tensor<S> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

enum Op<S> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Relu(NodeId),
    LeakyRelu(NodeId, S),
    Sigmoid(NodeId),
    Tanh(NodeId),
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    Upsample2x(NodeId),
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    ChannelGate { x: NodeId, gate: NodeId },
    Blend { fill: NodeId, base: NodeId, mask: Tensor<S> },
    Reshape(NodeId),
    AffineGrid { theta: NodeId },
    GridSample { src: NodeId, grid: NodeId },
    MeanSqDiff(NodeId, NodeId),
    WeightedSum(Vec<(NodeId, S)>),
    NegLog { p: NodeId, eps: S, complement: bool },
    PointLoss { theta: NodeId, target: Vec<S>, points: Vec<[S; 2]> },
}

struct Node<'a, S> {
    value: Value<'a, S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    params: Vec<(u64, usize, NodeId)>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        self.nodes[id.0].value.get()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is wanted (gradient checks, probes).
    pub fn input_with_grad(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter `index` of `store`, borrowed for the graph's lifetime.
    /// Frozen parameters do not require gradients.
    pub fn param(&mut self, store: &'a ParamStore<S>, index: usize) -> NodeId {
        let p = store.get(index);
        self.nodes.push(Node { value: Value::Borrowed(&p.value), op: Op::Leaf, requires_grad: p.trainable });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push((store.id(), index, id));
        id
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        self.value(id).item()
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, fin) = dims2(xv)?;
        let (fout, win) = dims2(wv)?;
        if fin != win {
            return Err(shape(format!("linear: input width {fin} vs weight {fout}x{win}")));
        }
        let mut out = vec![S::zero(); n * fout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != fout {
                return Err(shape("linear: bias length"));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        matmul(n, fin, fout, S::one(), xv.data(), false, wv.data(), true, S::one(), &mut out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_vec(&[n, fout], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = S::from_f64_lossy(slope);
        let out = self.value(x).map(|v| if v > S::zero() { v } else { v * s });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, s), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(shape(format!("max_pool2 on {h}x{w}")));
        }
        let src = xv.data();
        let mut out = vec![S::zero(); n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if s[cand] > s[best] {
                            best = cand;
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    out[o] = s[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Bilinear 2x upsampling (half-pixel centers, edge clamped).
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let ty = upsample_taps::<S>(h);
        let tx = upsample_taps::<S>(w);
        let src = xv.data();
        let mut out = vec![S::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let o = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = s[y0 * w + x0] * (S::one() - lx) + s[y0 * w + x1] * lx;
                    let bot = s[y1 * w + x0] * (S::one() - lx) + s[y1 * w + x1] * lx;
                    o[oy * wo + ox] = top * (S::one() - ly) + bot * ly;
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(t, Op::Upsample2x(x), rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*parts.first().ok_or_else(|| shape("concat of nothing"))?);
        let (n, _, h, w) = first.dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape(format!("concat: {:?} vs {:?}", self.value(p).shape(), first.shape())));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                out.extend_from_slice(&v.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::from_vec(&[n, total_c, h, w], out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape(format!("add: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x * gate` with a one-channel `gate` broadcast across channels.
    pub fn channel_gate(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (xv, gv) = (self.value(x), self.value(gate));
        let (n, c, h, w) = xv.dims4()?;
        if gv.dims4()? != (n, 1, h, w) {
            return Err(shape(format!("gate {:?} does not broadcast over {:?}", gv.shape(), xv.shape())));
        }
        let hw = h * w;
        let mut out = xv.data().to_vec();
        for b in 0..n {
            let g = &gv.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let o = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (v, &gg) in o.iter_mut().zip(g) {
                    *v *= gg;
                }
            }
        }
        let t = Tensor::from_vec(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(t, Op::ChannelGate { x, gate }, rg))
    }

    /// `mask * fill + (1 - mask) * base` with a constant `N x 1 x H x W` mask.
    pub fn blend(&mut self, fill: NodeId, base: NodeId, mask: Tensor<S>) -> Result<NodeId> {
        let (fv, bv) = (self.value(fill), self.value(base));
        let (n, c, h, w) = fv.dims4()?;
        if bv.shape() != fv.shape() || mask.dims4()? != (n, 1, h, w) {
            return Err(shape("blend: fill/base/mask shapes disagree"));
        }
        let hw = h * w;
        let mut out = vec![S::zero(); fv.len()];
        for b in 0..n {
            let m = &mask.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for p in 0..hw {
                    out[off + p] = m[p] * fv.data()[off + p] + (S::one() - m[p]) * bv.data()[off + p];
                }
            }
        }
        let t = Tensor::from_vec(fv.shape(), out)?;
        let rg = self.rg(fill) || self.rg(base);
        Ok(self.push(t, Op::Blend { fill, base, mask }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(new_shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[N, C, H, W]` to `[N, C*H*W]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.reshape(x, &[n, c * h * w])
    }

    /// `theta` is `[N, 6]`; produces an `[N, out_h, out_w, 2]` grid.
    pub fn affine_grid(&mut self, theta: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let (n, six) = dims2(self.value(theta))?;
        if six != 6 {
            return Err(shape("affine_grid: theta must be N x 6"));
        }
        let mut out = vec![S::zero(); n * out_h * out_w * 2];
        let per = out_h * out_w * 2;
        for b in 0..n {
            let th = &self.value(theta).data()[b * 6..b * 6 + 6];
            warp::affine_grid_into(th, out_h, out_w, &mut out[b * per..(b + 1) * per]);
        }
        let t = Tensor::from_vec(&[n, out_h, out_w, 2], out)?;
        let rg = self.rg(theta);
        Ok(self.push(t, Op::AffineGrid { theta }, rg))
    }

    /// Bilinear sampling of `src` (`N x C x H x W`) at `grid` (`N x Ho x Wo x 2`).
    pub fn grid_sample(&mut self, src: NodeId, grid: NodeId) -> Result<NodeId> {
        let (sv, gv) = (self.value(src), self.value(grid));
        let (n, c, h, w) = sv.dims4()?;
        let (gn, ho, wo, two) = gv.dims4()?;
        if gn != n || two != 2 {
            return Err(shape(format!("grid_sample: src {:?} grid {:?}", sv.shape(), gv.shape())));
        }
        let mut out = vec![S::zero(); n * c * ho * wo];
        for b in 0..n {
            warp::sample_into(
                &sv.data()[b * c * h * w..(b + 1) * c * h * w],
                c,
                h,
                w,
                &gv.data()[b * ho * wo * 2..(b + 1) * ho * wo * 2],
                ho,
                wo,
                &mut out[b * c * ho * wo..(b + 1) * c * ho * wo],
            );
        }
        let t = Tensor::from_vec(&[n, c, ho, wo], out)?;
        let rg = self.rg(src) || self.rg(grid);
        Ok(self.push(t, Op::GridSample { src, grid }, rg))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mean_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape(format!("mean_sq_diff: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let n = S::from_usize(av.len()).unwrap();
        let s: S = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanSqDiff(a, b), rg))
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut acc = S::zero();
        let mut conv = Vec::with_capacity(terms.len());
        for &(id, c) in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(shape("weighted_sum expects scalar nodes"));
            }
            let c = S::from_f64_lossy(c);
            acc += c * v.item();
            conv.push((id, c));
        }
        let rg = terms.iter().any(|&(id, _)| self.rg(id));
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(conv), rg))
    }

    /// Mean over the batch of `-log(clamp(p))`, or of `-log(1 - clamp(p))`
    /// when `complement`; `p` is clamped to `[eps, 1 - eps]`.
    pub fn neg_log(&mut self, p: NodeId, eps: f64, complement: bool) -> NodeId {
        let e = S::from_f64_lossy(eps);
        let pv = self.value(p);
        let n = S::from_usize(pv.len().max(1)).unwrap();
        let s: S = pv
            .data()
            .iter()
            .map(|&v| {
                let q = v.max(e).min(S::one() - e);
                if complement {
                    -(S::one() - q).ln()
                } else {
                    -q.ln()
                }
            })
            .sum();
        let rg = self.rg(p);
        self.push(Tensor::scalar(s / n), Op::NegLog { p, eps: e, complement }, rg)
    }

    /// Mean over batch and points of `|(theta - target) . (x, y, 1)|^2`.
    /// `theta` and `target` are `[N, 6]` row-major 2x3 matrices.
    pub fn point_loss(&mut self, theta: NodeId, target: Vec<S>, points: Vec<[S; 2]>) -> Result<NodeId> {
        let tv = self.value(theta);
        let (n, six) = dims2(tv)?;
        if six != 6 || target.len() != n * 6 || points.is_empty() {
            return Err(shape("point_loss: theta/target must be N x 6 with points"));
        }
        let mut acc = S::zero();
        for b in 0..n {
            let d: Vec<S> = (0..6).map(|k| tv.data()[b * 6 + k] - target[b * 6 + k]).collect();
            for p in &points {
                let ex = d[0] * p[0] + d[1] * p[1] + d[2];
                let ey = d[3] * p[0] + d[4] * p[1] + d[5];
                acc += ex * ex + ey * ey;
            }
        }
        let denom = S::from_usize(n * points.len()).unwrap();
        let rg = self.rg(theta);
        Ok(self.push(Tensor::scalar(acc / denom), Op::PointLoss { theta, target, points }, rg))
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        if self.value(root).len() != 1 {
            return Err(shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Ok(Gradients { grads, params: self.params.clone() });
        }
        grads[root.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backprop_node(&self, node: &Node<'a, S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let out = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let want_x = self.rg(*x);
                let want_w = self.rg(*w);
                let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), g, *geom, want_x, want_w)?;
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fin) = dims2(xv)?;
                let fout = wv.shape()[0];
                if self.rg(*x) {
                    let mut gx = vec![S::zero(); n * fin];
                    matmul(n, fout, fin, S::one(), g.data(), false, wv.data(), false, S::zero(), &mut gx);
                    accumulate(grads, *x, Tensor::from_vec(&[n, fin], gx)?);
                }
                if self.rg(*w) {
                    let mut gw = vec![S::zero(); fout * fin];
                    matmul(fout, n, fin, S::one(), g.data(), true, xv.data(), false, S::zero(), &mut gw);
                    accumulate(grads, *w, Tensor::from_vec(&[fout, fin], gw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![S::zero(); fout];
                        for row in g.data().chunks(fout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        accumulate(grads, *b, Tensor::from_vec(&[fout], gb)?);
                    }
                }
            }
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| if y > S::zero() { gv } else { S::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(out.shape(), data)?);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > S::zero() { gv } else { gv * *slope })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(out.shape(), data)?);
            }
            Op::Sigmoid(x) => {
                let data =
                    g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y * (S::one() - y)).collect();
                accumulate(grads, *x, Tensor::from_vec(out.shape(), data)?);
            }
            Op::Tanh(x) => {
                let data = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * (S::one() - y * y)).collect();
                accumulate(grads, *x, Tensor::from_vec(out.shape(), data)?);
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4()?;
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = vec![S::zero(); xv.len()];
                for plane in 0..n * c {
                    for k in 0..ho * wo {
                        let o = plane * ho * wo + k;
                        gx[plane * h * w + argmax[o] as usize] += g.data()[o];
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
            }
            Op::Upsample2x(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4()?;
                let (ho, wo) = (2 * h, 2 * w);
                let ty = upsample_taps::<S>(h);
                let tx = upsample_taps::<S>(w);
                let mut gx = vec![S::zero(); xv.len()];
                for plane in 0..n * c {
                    let gs = &g.data()[plane * ho * wo..(plane + 1) * ho * wo];
                    let d = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let gv = gs[oy * wo + ox];
                            let (a, b) = (gv * (S::one() - ly), gv * ly);
                            d[y0 * w + x0] += a * (S::one() - lx);
                            d[y0 * w + x1] += a * lx;
                            d[y1 * w + x0] += b * (S::one() - lx);
                            d[y1 * w + x1] += b * lx;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = out.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let start = (b * total_c + offset) * hw;
                            gp.extend_from_slice(&g.data()[start..start + pc * hw]);
                        }
                        accumulate(grads, p, Tensor::from_vec(&[n, pc, h, w], gp)?);
                    }
                    offset += pc;
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::ChannelGate { x, gate } => {
                let (xv, gv) = (self.value(*x), self.value(*gate));
                let (n, c, h, w) = xv.dims4()?;
                let hw = h * w;
                if self.rg(*x) {
                    let mut gx = g.data().to_vec();
                    for b in 0..n {
                        for ch in 0..c {
                            let o = &mut gx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                            for (v, &gg) in o.iter_mut().zip(&gv.data()[b * hw..(b + 1) * hw]) {
                                *v *= gg;
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
                }
                if self.rg(*gate) {
                    let mut gg = vec![S::zero(); n * hw];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for p in 0..hw {
                                gg[b * hw + p] += g.data()[off + p] * xv.data()[off + p];
                            }
                        }
                    }
                    accumulate(grads, *gate, Tensor::from_vec(gv.shape(), gg)?);
                }
            }
            Op::Blend { fill, base, mask } => {
                let (n, c, h, w) = out.dims4()?;
                let hw = h * w;
                let weighted = |inside: bool| -> Result<Tensor<S>> {
                    let mut d = g.data().to_vec();
                    for b in 0..n {
                        let m = &mask.data()[b * hw..(b + 1) * hw];
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for p in 0..hw {
                                let wgt = if inside { m[p] } else { S::one() - m[p] };
                                d[off + p] *= wgt;
                            }
                        }
                    }
                    Tensor::from_vec(out.shape(), d)
                };
                if self.rg(*fill) {
                    accumulate(grads, *fill, weighted(true)?);
                }
                if self.rg(*base) {
                    accumulate(grads, *base, weighted(false)?);
                }
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.value(*x).shape())?;
                accumulate(grads, *x, gx);
            }
            Op::AffineGrid { theta } => {
                let (n, ho, wo, _) = out.dims4()?;
                let per = ho * wo * 2;
                let mut gt = vec![S::zero(); n * 6];
                for b in 0..n {
                    warp::affine_grid_backward(&g.data()[b * per..(b + 1) * per], ho, wo, &mut gt[b * 6..b * 6 + 6]);
                }
                accumulate(grads, *theta, Tensor::from_vec(&[n, 6], gt)?);
            }
            Op::GridSample { src, grid } => {
                let (sv, gv) = (self.value(*src), self.value(*grid));
                let (n, c, h, w) = sv.dims4()?;
                let (_, ho, wo, _) = gv.dims4()?;
                let want_src = self.rg(*src);
                let want_grid = self.rg(*grid);
                let mut gs = if want_src { vec![S::zero(); sv.len()] } else { Vec::new() };
                let mut gg = if want_grid { vec![S::zero(); gv.len()] } else { Vec::new() };
                for b in 0..n {
                    let gs_b = if want_src { Some(&mut gs[b * c * h * w..(b + 1) * c * h * w]) } else { None };
                    let gg_b = if want_grid { Some(&mut gg[b * ho * wo * 2..(b + 1) * ho * wo * 2]) } else { None };
                    warp::sample_backward(
                        &sv.data()[b * c * h * w..(b + 1) * c * h * w],
                        c,
                        h,
                        w,
                        &gv.data()[b * ho * wo * 2..(b + 1) * ho * wo * 2],
                        ho,
                        wo,
                        &g.data()[b * c * ho * wo..(b + 1) * c * ho * wo],
                        gs_b,
                        gg_b,
                    );
                }
                if want_src {
                    accumulate(grads, *src, Tensor::from_vec(sv.shape(), gs)?);
                }
                if want_grid {
                    accumulate(grads, *grid, Tensor::from_vec(gv.shape(), gg)?);
                }
            }
            Op::MeanSqDiff(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g.item() * S::from_f64_lossy(2.0) / S::from_usize(av.len()).unwrap();
                let diff: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * scale).collect();
                if self.rg(*b) {
                    let neg = diff.iter().map(|&v| -v).collect();
                    accumulate(grads, *b, Tensor::from_vec(bv.shape(), neg)?);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::from_vec(av.shape(), diff)?);
                }
            }
            Op::WeightedSum(terms) => {
                for &(id, c) in terms {
                    if self.rg(id) {
                        accumulate(grads, id, Tensor::scalar(g.item() * c));
                    }
                }
            }
            Op::NegLog { p, eps, complement } => {
                let pv = self.value(*p);
                let n = S::from_usize(pv.len().max(1)).unwrap();
                let up = g.item() / n;
                let data = pv
                    .data()
                    .iter()
                    .map(|&v| {
                        if v < *eps || v > S::one() - *eps {
                            S::zero()
                        } else if *complement {
                            up / (S::one() - v)
                        } else {
                            -up / v
                        }
                    })
                    .collect();
                accumulate(grads, *p, Tensor::from_vec(pv.shape(), data)?);
            }
            Op::PointLoss { theta, target, points } => {
                let tv = self.value(*theta);
                let n = tv.shape()[0];
                let scale = g.item() * S::from_f64_lossy(2.0) / S::from_usize(n * points.len()).unwrap();
                let mut gt = vec![S::zero(); n * 6];
                for b in 0..n {
                    let d: Vec<S> = (0..6).map(|k| tv.data()[b * 6 + k] - target[b * 6 + k]).collect();
                    for p in points {
                        let ex = (d[0] * p[0] + d[1] * p[1] + d[2]) * scale;
                        let ey = (d[3] * p[0] + d[4] * p[1] + d[5]) * scale;
                        let row = &mut gt[b * 6..b * 6 + 6];
                        row[0] += ex * p[0];
                        row[1] += ex * p[1];
                        row[2] += ex;
                        row[3] += ey * p[0];
                        row[4] += ey * p[1];
                        row[5] += ey;
                    }
                }
                accumulate(grads, *theta, Tensor::from_vec(&[n, 6], gt)?);
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn dims2<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        other => Err(shape(format!("expected rank-2 tensor, got {other:?}"))),
    }
}

/// Per-output-index source taps `(lo, hi, frac)` for 2x bilinear upsampling.
fn upsample_taps<S: Scalar>(n: usize) -> Vec<(usize, usize, S)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, S::from_f64_lossy(src - lo as f64))
        })
        .collect()
}

/// Gradients of one backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(u64, usize, NodeId)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient per parameter of `store` (None where the parameter was unused
    /// or frozen).
    pub fn for_store(&self, store: &ParamStore<S>) -> Vec<Option<Tensor<S>>> {
        let mut out: Vec<Option<Tensor<S>>> = (0..store.len()).map(|_| None).collect();
        for &(sid, idx, node) in &self.params {
            if sid != store.id() {
                continue;
            }
            if let Some(g) = &self.grads[node.0] {
                match &mut out[idx] {
                    Some(e) => e.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn conv_out(size: usize, k: usize, geom: ConvGeometry) -> Result<usize> {
    let padded = size + 2 * geom.pad;
    if padded < k || geom.stride == 0 {
        return Err(shape(format!("conv kernel {k} larger than padded input {padded}")));
    }
    Ok((padded - k) / geom.stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: ConvGeometry,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    let hw_o = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw_o..(row + 1) * hw_o];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(S::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        *d = if ix >= 0 && ix < w as isize { srow[ix as usize] } else { S::zero() };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: ConvGeometry,
    ho: usize,
    wo: usize,
    x: &mut [S],
) {
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    let hw_o = ho * wo;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw_o..(row + 1) * hw_o];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, geom: ConvGeometry) -> bool {
    k == 1 && geom.stride == 1 && geom.pad == 0
}

fn conv2d_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>, geom: ConvGeometry) -> Result<Tensor<S>> {
    let (n, c, h, wd) = x.dims4()?;
    let (co, ci, k, k2) = w.dims4()?;
    if ci != c || k != k2 {
        return Err(shape(format!("conv: input {:?} weight {:?}", x.shape(), w.shape())));
    }
    let ho = conv_out(h, k, geom)?;
    let wo = conv_out(wd, k, geom)?;
    let hw_o = ho * wo;
    let ckk = c * k * k;
    let mut out = vec![S::zero(); n * co * hw_o];
    let mut cols = if is_pointwise(k, geom) { Vec::new() } else { vec![S::zero(); ckk * hw_o] };
    for bi in 0..n {
        let xb = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        let ob = &mut out[bi * co * hw_o..(bi + 1) * co * hw_o];
        if let Some(b) = b {
            for (oc, chunk) in ob.chunks_mut(hw_o).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        let src: &[S] = if is_pointwise(k, geom) {
            xb
        } else {
            im2col(xb, c, h, wd, k, geom, ho, wo, &mut cols);
            &cols
        };
        matmul(co, ckk, hw_o, S::one(), w.data(), false, src, false, beta, ob);
    }
    Tensor::from_vec(&[n, co, ho, wo], out)
}

type ConvGrads<S> = (Option<Tensor<S>>, Option<Tensor<S>>, Tensor<S>);

fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &Tensor<S>,
    geom: ConvGeometry,
    want_x: bool,
    want_w: bool,
) -> Result<ConvGrads<S>> {
    let (n, c, h, wd) = x.dims4()?;
    let (co, _, k, _) = w.dims4()?;
    let (_, _, ho, wo) = g.dims4()?;
    let hw_o = ho * wo;
    let ckk = c * k * k;
    let pointwise = is_pointwise(k, geom);
    let mut gx = if want_x { vec![S::zero(); x.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![S::zero(); w.len()] } else { Vec::new() };
    let mut gb = vec![S::zero(); co];
    let mut cols = if pointwise { Vec::new() } else { vec![S::zero(); ckk * hw_o] };
    let mut dcols = if want_x && !pointwise { vec![S::zero(); ckk * hw_o] } else { Vec::new() };
    for bi in 0..n {
        let gb_i = &g.data()[bi * co * hw_o..(bi + 1) * co * hw_o];
        for (oc, chunk) in gb_i.chunks(hw_o).enumerate() {
            gb[oc] += chunk.iter().copied().sum::<S>();
        }
        let xb = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        if want_w {
            let src: &[S] = if pointwise {
                xb
            } else {
                im2col(xb, c, h, wd, k, geom, ho, wo, &mut cols);
                &cols
            };
            matmul(co, hw_o, ckk, S::one(), gb_i, false, src, true, S::one(), &mut gw);
        }
        if want_x {
            let gxb = &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd];
            if pointwise {
                matmul(ckk, co, hw_o, S::one(), w.data(), true, gb_i, false, S::one(), gxb);
            } else {
                matmul(ckk, co, hw_o, S::one(), w.data(), true, gb_i, false, S::zero(), &mut dcols);
                col2im(&dcols, c, h, wd, k, geom, ho, wo, gxb);
            }
        }
    }
    let gx = if want_x { Some(Tensor::from_vec(x.shape(), gx)?) } else { None };
    let gw = if want_w { Some(Tensor::from_vec(w.shape(), gw)?) } else { None };
    Ok((gx, gw, Tensor::from_vec(&[co], gb)?))
}
