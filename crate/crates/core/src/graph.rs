//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough bookkeeping to push gradients back to its inputs. A
//! forward pass builds one graph; [`Graph::backward`] consumes output
//! gradients (supplied by the loss functions) and returns gradients for every
//! node that depends on a parameter.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::kernels::{self, ResizePlan};
use crate::math;
use crate::params::ParamId;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics of a training-mode batch normalisation.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool2(Var),
    Resize {
        x: Var,
        plan: ResizePlan,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        s: Var,
    },
    Concat(Var, Var),
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    L2Normalize {
        x: Var,
        inv_norm: Vec<f64>,
    },
    GlobalContext(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_ref().map(|g| (id, g)))
    }
}

fn same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        bail!(Shape, "{op}: {a} vs {b}");
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Trainable leaf tied to a parameter id.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id), &[])
    }

    /// Same-padded stride-1 convolution; `w` is `cout×cin×k×k` with odd `k`,
    /// `b` is `1×cout×1×1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c || ws.h != ws.w || ws.h % 2 == 0 {
            bail!(Shape, "conv2d: input {xs} incompatible with kernel {ws}");
        }
        if let Some(b) = b {
            same_shape("conv2d bias", self.shape(b), Shape::new(1, ws.n, 1, 1))?;
        }
        let os = xs.with_c(ws.n);
        let mut out = Tensor::zeros(os);
        kernels::conv2d_forward(
            self.value(x).data(),
            xs.n,
            xs.c,
            xs.h,
            xs.w,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            ws.n,
            ws.h,
            out.data_mut(),
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b }, &parents))
    }

    /// Batch normalisation over `(n, h, w)` per channel, using batch
    /// statistics. Returns the statistics for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let s = self.shape(x);
        let m = (s.n * s.plane()) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * s.plane();
                mean[c] += xv[off..off + s.plane()].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * s.plane();
                var[c] += xv[off..off + s.plane()]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let unbiased: Vec<f64> = var
            .iter()
            .map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train: true,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let out = self.bn_apply(x, gamma, beta, mean, &inv_std)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                train: false,
            },
            &[x, gamma, beta],
        ))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> Result<Tensor> {
        let s = self.shape(x);
        let cs = Shape::new(1, s.c, 1, 1);
        same_shape("batch_norm gamma", self.shape(gamma), cs)?;
        same_shape("batch_norm beta", self.shape(beta), cs)?;
        if mean.len() != s.c || inv_std.len() != s.c {
            bail!(Shape, "batch_norm: statistics for {} channels, input has {}", mean.len(), s.c);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = self.value(x).clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * s.plane();
                let (scale, shift) = (g[c] * inv_std[c], b[c] - g[c] * inv_std[c] * mean[c]);
                for v in &mut out.data_mut()[off..off + s.plane()] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// 2×2 stride-2 max pooling. Odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (oh, ow) = (s.h / 2, s.w / 2);
        let os = s.with_hw(oh, ow);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(os);
        let mut argmax = vec![0u32; os.numel()];
        let od = out.data_mut();
        for nc in 0..s.n * s.c {
            let src = &xv[nc * s.plane()..(nc + 1) * s.plane()];
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = 2 * y * s.w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * y + dy) * s.w + 2 * xo + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    let o = nc * os.plane() + y * ow + xo;
                    od[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// 2×2 stride-2 average pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (oh, ow) = (s.h / 2, s.w / 2);
        let os = s.with_hw(oh, ow);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(os);
        let od = out.data_mut();
        for nc in 0..s.n * s.c {
            let src = &xv[nc * s.plane()..(nc + 1) * s.plane()];
            for y in 0..oh {
                for xo in 0..ow {
                    let i = 2 * y * s.w + 2 * xo;
                    od[nc * os.plane() + y * ow + xo] =
                        0.25 * (src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]);
                }
            }
        }
        self.push(out, Op::AvgPool2(x), &[x])
    }

    /// Bilinear resampling to `h×w` (half-pixel centres).
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        if s.h == h && s.w == w {
            return x;
        }
        let plan = ResizePlan::new(s.h, s.w, h, w);
        let os = s.with_hw(h, w);
        let mut out = Tensor::zeros(os);
        let xv = self.value(x).data();
        for nc in 0..s.n * s.c {
            plan.apply(
                &xv[nc * s.plane()..(nc + 1) * s.plane()],
                &mut out.data_mut()[nc * os.plane()..(nc + 1) * os.plane()],
            );
        }
        self.push(out, Op::Resize { x, plan }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product. `b` may have a single channel, in which case it
    /// is broadcast across the channels of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb != sa && sb != sa.with_c(1) {
            bail!(Shape, "mul: {sb} does not broadcast onto {sa}");
        }
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        let plane = sa.plane();
        for n in 0..sa.n {
            for c in 0..sa.c {
                let off = (n * sa.c + c) * plane;
                let boff = if sb.c == 1 { n * plane } else { off };
                for (o, m) in out.data_mut()[off..off + plane]
                    .iter_mut()
                    .zip(&bv[boff..boff + plane])
                {
                    *o *= m;
                }
            }
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiply by a `1×1×1×1` scalar node.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        same_shape("scale factor", self.shape(s), Shape::scalar())?;
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::Scale { x, s }, &[x, s]))
    }

    /// Channel-wise concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            bail!(Shape, "concat: {sa} vs {sb}");
        }
        let os = sa.with_c(sa.c + sb.c);
        let mut data = Vec::with_capacity(os.numel());
        for n in 0..sa.n {
            data.extend_from_slice(self.value(a).batch_slice(n));
            data.extend_from_slice(self.value(b).batch_slice(n));
        }
        let out = Tensor::from_vec(os, data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// Mean over the channel axis, keeping a single channel.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let mut out = Tensor::zeros(s.with_c(1));
        let xv = self.value(x).data();
        let p = s.plane();
        for n in 0..s.n {
            let o = &mut out.data_mut()[n * p..(n + 1) * p];
            for c in 0..s.c {
                let off = (n * s.c + c) * p;
                for (a, v) in o.iter_mut().zip(&xv[off..off + p]) {
                    *a += v;
                }
            }
            o.iter_mut().for_each(|a| *a /= s.c as f64);
        }
        self.push(out, Op::ChannelMean(x), &[x])
    }

    /// Max over the channel axis, keeping a single channel.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let p = s.plane();
        let mut out = Tensor::zeros(s.with_c(1));
        let mut argmax = vec![0u32; s.n * p];
        let xv = self.value(x).data();
        for n in 0..s.n {
            for i in 0..p {
                let mut best = 0;
                let mut bv = xv[n * s.c * p + i];
                for c in 1..s.c {
                    let v = xv[(n * s.c + c) * p + i];
                    if v > bv {
                        bv = v;
                        best = c;
                    }
                }
                out.data_mut()[n * p + i] = bv;
                argmax[n * p + i] = best as u32;
            }
        }
        self.push(out, Op::ChannelMax { x, argmax }, &[x])
    }

    /// Scale each spatial location's channel vector to unit L2 norm; zero
    /// vectors stay zero.
    pub fn l2_normalize_channels(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let p = s.plane();
        let mut out = self.value(x).clone();
        let mut inv_norm = vec![0.0; s.n * p];
        for n in 0..s.n {
            for i in 0..p {
                let mut sq = 0.0;
                for c in 0..s.c {
                    let v = out.data()[(n * s.c + c) * p + i];
                    sq += v * v;
                }
                let inv = if sq > 0.0 { 1.0 / math::sqrt(sq) } else { 0.0 };
                inv_norm[n * p + i] = inv;
                for c in 0..s.c {
                    out.data_mut()[(n * s.c + c) * p + i] *= inv;
                }
            }
        }
        self.push(out, Op::L2Normalize { x, inv_norm }, &[x])
    }

    /// Global context features `G = X·softmax_rows(XᵀX)` per batch element,
    /// with `X` the `C×(h·w)` flattening of `x`.
    pub fn global_context(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            kernels::global_context_forward(
                self.value(x).batch_slice(n),
                s.c,
                s.plane(),
                out.batch_slice_mut(n),
            );
        }
        self.push(out, Op::GlobalContext(x), &[x])
    }

    /// Back-propagate from the given output gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            same_shape("backward seed", g.shape(), self.shape(*v))?;
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        let mut params = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                params.push((id, i));
                continue;
            }
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let take = |grads: &mut [Option<Tensor>], v: Var| -> Tensor {
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let mut dx = self.wants(*x).then(|| take(grads, *x));
                let mut dw = self.wants(*w).then(|| take(grads, *w));
                let mut db = b.filter(|b| self.wants(*b)).map(|b| take(grads, b));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    xs.n,
                    xs.c,
                    xs.h,
                    xs.w,
                    self.value(*w).data(),
                    ws.n,
                    ws.h,
                    dy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dx {
                    grads[x.0] = Some(t);
                }
                if let Some(t) = dw {
                    grads[w.0] = Some(t);
                }
                if let (Some(t), Some(b)) = (db, b) {
                    grads[b.0] = Some(t);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let p = s.plane();
                let m = (s.n * p) as f64;
                let xv = self.value(*x).data();
                let g = self.value(*gamma).data();
                // per-channel Σdy and Σdy·x̂
                let mut sum_dy = vec![0.0; s.c];
                let mut sum_dy_xhat = vec![0.0; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * p;
                        for (&d, &xv) in dy.data()[off..off + p].iter().zip(&xv[off..off + p]) {
                            sum_dy[c] += d;
                            sum_dy_xhat[c] += d * (xv - mean[c]) * inv_std[c];
                        }
                    }
                }
                if self.wants(*gamma) {
                    let mut dg = take(grads, *gamma);
                    dg.add_assign(&Tensor::from_vec(Shape::new(1, s.c, 1, 1), sum_dy_xhat.clone()).unwrap());
                    grads[gamma.0] = Some(dg);
                }
                if self.wants(*beta) {
                    let mut db = take(grads, *beta);
                    db.add_assign(&Tensor::from_vec(Shape::new(1, s.c, 1, 1), sum_dy.clone()).unwrap());
                    grads[beta.0] = Some(db);
                }
                if self.wants(*x) {
                    let mut dx = take(grads, *x);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let off = (n * s.c + c) * p;
                            let k = g[c] * inv_std[c];
                            for j in off..off + p {
                                let d = dy.data()[j];
                                dx.data_mut()[j] += if *train {
                                    let xhat = (xv[j] - mean[c]) * inv_std[c];
                                    k * (d - sum_dy[c] / m - xhat * sum_dy_xhat[c] / m)
                                } else {
                                    k * d
                                };
                            }
                        }
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let mut dx = take(grads, *x);
                    for ((d, &g), &v) in dx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let mut dx = take(grads, *x);
                    for ((d, &g), &v) in dx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *d += g * v * (1.0 - v);
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let os = y.shape();
                    let mut dx = take(grads, *x);
                    for nc in 0..s.n * s.c {
                        for o in 0..os.plane() {
                            let j = nc * os.plane() + o;
                            dx.data_mut()[nc * s.plane() + argmax[j] as usize] += dy.data()[j];
                        }
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::AvgPool2(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let os = y.shape();
                    let mut dx = take(grads, *x);
                    for nc in 0..s.n * s.c {
                        for yy in 0..os.h {
                            for xx in 0..os.w {
                                let g = 0.25 * dy.data()[nc * os.plane() + yy * os.w + xx];
                                let i = nc * s.plane() + 2 * yy * s.w + 2 * xx;
                                let d = dx.data_mut();
                                d[i] += g;
                                d[i + 1] += g;
                                d[i + s.w] += g;
                                d[i + s.w + 1] += g;
                            }
                        }
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::Resize { x, plan } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let os = y.shape();
                    let mut dx = take(grads, *x);
                    for nc in 0..s.n * s.c {
                        plan.apply_adjoint(
                            &dy.data()[nc * os.plane()..(nc + 1) * os.plane()],
                            &mut dx.data_mut()[nc * s.plane()..(nc + 1) * s.plane()],
                        );
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let mut d = take(grads, v);
                        d.add_assign(dy);
                        grads[v.0] = Some(d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let p = sa.plane();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let mut da = take(grads, *a);
                    for n in 0..sa.n {
                        for c in 0..sa.c {
                            let off = (n * sa.c + c) * p;
                            let boff = if sb.c == 1 { n * p } else { off };
                            for j in 0..p {
                                da.data_mut()[off + j] += dy.data()[off + j] * bv[boff + j];
                            }
                        }
                    }
                    grads[a.0] = Some(da);
                }
                if self.wants(*b) {
                    let mut db = take(grads, *b);
                    for n in 0..sa.n {
                        for c in 0..sa.c {
                            let off = (n * sa.c + c) * p;
                            let boff = if sb.c == 1 { n * p } else { off };
                            for j in 0..p {
                                db.data_mut()[boff + j] += dy.data()[off + j] * av[off + j];
                            }
                        }
                    }
                    grads[b.0] = Some(db);
                }
            }
            Op::Scale { x, s } => {
                let k = self.value(*s).item();
                if self.wants(*x) {
                    let mut dx = take(grads, *x);
                    for (d, &g) in dx.data_mut().iter_mut().zip(dy.data()) {
                        *d += k * g;
                    }
                    grads[x.0] = Some(dx);
                }
                if self.wants(*s) {
                    let mut ds = take(grads, *s);
                    let dot: f64 = dy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, v)| g * v)
                        .sum();
                    ds.data_mut()[0] += dot;
                    grads[s.0] = Some(ds);
                }
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
                for (v, off, len) in [(*a, 0, la), (*b, la, lb)] {
                    if self.wants(v) {
                        let mut d = take(grads, v);
                        for n in 0..sa.n {
                            let src = &dy.data()[n * (la + lb) + off..n * (la + lb) + off + len];
                            for (t, g) in d.batch_slice_mut(n).iter_mut().zip(src) {
                                *t += g;
                            }
                        }
                        grads[v.0] = Some(d);
                    }
                }
            }
            Op::ChannelMean(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let p = s.plane();
                    let mut dx = take(grads, *x);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let off = (n * s.c + c) * p;
                            for j in 0..p {
                                dx.data_mut()[off + j] += dy.data()[n * p + j] / s.c as f64;
                            }
                        }
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::ChannelMax { x, argmax } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let p = s.plane();
                    let mut dx = take(grads, *x);
                    for n in 0..s.n {
                        for j in 0..p {
                            let c = argmax[n * p + j] as usize;
                            dx.data_mut()[(n * s.c + c) * p + j] += dy.data()[n * p + j];
                        }
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::L2Normalize { x, inv_norm } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let p = s.plane();
                    let mut dx = take(grads, *x);
                    for n in 0..s.n {
                        for j in 0..p {
                            let inv = inv_norm[n * p + j];
                            if inv == 0.0 {
                                continue;
                            }
                            let idx = |c: usize| (n * s.c + c) * p + j;
                            let dot: f64 = (0..s.c).map(|c| y.data()[idx(c)] * dy.data()[idx(c)]).sum();
                            for c in 0..s.c {
                                dx.data_mut()[idx(c)] += inv * (dy.data()[idx(c)] - y.data()[idx(c)] * dot);
                            }
                        }
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::GlobalContext(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let mut dx = take(grads, *x);
                    for n in 0..s.n {
                        kernels::global_context_backward(
                            self.value(*x).batch_slice(n),
                            s.c,
                            s.plane(),
                            dy.batch_slice(n),
                            dx.batch_slice_mut(n),
                        );
                    }
                    grads[x.0] = Some(dx);
                }
            }
        }
    }
}
