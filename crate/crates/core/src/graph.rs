//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a define-by-run tape: every operation pushes a node and
//! returns a [`Var`] handle. Parameters are read from a [`ParamStore`]
//! without copying; `backward` walks the tape in reverse and accumulates
//! gradients for trainable parameters only. Nodes whose value cannot reach
//! a trainable parameter are pruned from the backward pass.
//!
//! All convolutions and matrix products go through `dgemm`; the batch loop
//! of the convolution is parallelized with deterministic reduction order.

use rayon::prelude::*;
use std::collections::HashMap;

use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

pub type Var = usize;

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// x[b,c,h,w] + t[b,c,1,1]
    AddBcastSpatial(Var, Var),
    /// x[b,c,h,w] * t[b,c,1,1]
    MulBcastSpatial(Var, Var),
    /// x[b,c,h,w] * m[b,1,h,w]
    MulBcastChannel(Var, Var),
    /// gamma[c] * x[b,c,h,w] + beta[c]
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    PadReplicate { x: Var, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, groups: usize, eps: f64 },
    Silu(Var),
    Sigmoid(Var),
    /// softmax over the last axis of [b,n,m]
    Softmax(Var),
    /// [bt,n,k] x [bt,k,m]
    MatmulNN(Var, Var),
    /// [bt,n,k] x [bt,m,k]^T
    MatmulNT(Var, Var),
    Reshape(Var),
    ConcatChannel(Var, Var),
    /// [b,c,h,w] -> [b,c,1,1]
    MeanSpatial(Var),
    UpsampleNearest2x(Var),
    PixelUnshuffle { x: Var, r: usize },
    /// [b,c,h,w] -> [b,h*w,c]
    SpatialToSeq(Var),
    /// [b,n,c] -> [b,c,h,w]
    SeqToSpatial { x: Var, h: usize, w: usize },
    /// mean over all elements -> [1]
    MeanAll(Var),
}

/// Gradients of a scalar loss with respect to trainable parameters.
#[derive(Debug, Default)]
pub struct Grads {
    by_param: HashMap<ParamId, Tensor>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    ops: Vec<Op>,
    vals: Vec<Value>,
    needs_grad: Vec<bool>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            ops: Vec::new(),
            vals: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.vals[v] {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor, needs: bool) -> Var {
        self.ops.push(op);
        self.vals.push(Value::Owned(value));
        self.needs_grad.push(needs);
        self.vals.len() - 1
    }

    fn needs(&self, v: Var) -> bool {
        self.needs_grad[v]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.group(id) == ParamGroup::Trainable;
        self.ops.push(Op::Leaf);
        self.vals.push(Value::Param(id));
        self.needs_grad.push(trainable);
        self.vals.len() - 1
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let v = self.value(a).add(self.value(b)).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let v = self.value(a).sub(self.value(b)).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let v = self.value(a).mul(self.value(b)).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        let needs = self.needs(a);
        self.push(Op::Scale(a, k), v, needs)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let needs = self.needs(a);
        self.push(Op::Silu(a), v, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), v, needs)
    }

    // ---- broadcasts ----

    pub fn add_bcast_spatial(&mut self, x: Var, t: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(t), &[b, c, 1, 1], "add_bcast_spatial");
        let xs = self.value(x).data();
        let ts = self.value(t).data();
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let tv = ts[bi * c + ci];
                for i in 0..h * w {
                    out[base + i] = xs[base + i] + tv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(t);
        self.push(
            Op::AddBcastSpatial(x, t),
            Tensor::new(&[b, c, h, w], out),
            needs,
        )
    }

    pub fn mul_bcast_spatial(&mut self, x: Var, t: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(t), &[b, c, 1, 1], "mul_bcast_spatial");
        let xs = self.value(x).data();
        let ts = self.value(t).data();
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let tv = ts[bi * c + ci];
                for i in 0..h * w {
                    out[base + i] = xs[base + i] * tv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(t);
        self.push(
            Op::MulBcastSpatial(x, t),
            Tensor::new(&[b, c, h, w], out),
            needs,
        )
    }

    pub fn mul_bcast_channel(&mut self, x: Var, m: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(m), &[b, 1, h, w], "mul_bcast_channel");
        let xs = self.value(x).data();
        let ms = self.value(m).data();
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let mbase = bi * h * w;
                for i in 0..h * w {
                    out[base + i] = xs[base + i] * ms[mbase + i];
                }
            }
        }
        let needs = self.needs(x) || self.needs(m);
        self.push(
            Op::MulBcastChannel(x, m),
            Tensor::new(&[b, c, h, w], out),
            needs,
        )
    }

    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(gamma), &[c], "channel_affine gamma");
        assert_eq!(self.shape(beta), &[c], "channel_affine beta");
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let (g, be) = (gs[ci], bs[ci]);
                for i in 0..h * w {
                    out[base + i] = g * xs[base + i] + be;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::ChannelAffine { x, gamma, beta },
            Tensor::new(&[b, c, h, w], out),
            needs,
        )
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv2d { x, w, b, stride, pad }, v, needs)
    }

    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for bc in 0..b * c {
            let src = &xs[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
            for oy in 0..ho {
                let sy = oy.saturating_sub(pad).min(h - 1);
                for ox in 0..wo {
                    let sx = ox.saturating_sub(pad).min(w - 1);
                    dst[oy * wo + ox] = src[sy * w + sx];
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Op::PadReplicate { x, pad },
            Tensor::new(&[b, c, ho, wo], out),
            needs,
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let bs = self.value(b);
        let din = *xs.shape().last().unwrap();
        assert_eq!(ws.shape().len(), 2, "linear weight rank");
        assert_eq!(ws.shape()[1], din, "linear in dim");
        let dout = ws.shape()[0];
        assert_eq!(bs.shape(), &[dout], "linear bias");
        let rows = xs.len() / din;
        let mut out = vec![0.0; rows * dout];
        gemm(rows, din, dout, 1.0, xs.data(), false, ws.data(), true, 0.0, &mut out);
        for r in 0..rows {
            for j in 0..dout {
                out[r * dout + j] += bs.data()[j];
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Linear { x, w, b }, Tensor::new(&shape, out), needs)
    }

    /// Group normalization without a learned affine; pair with
    /// [`Graph::channel_affine`] when one is needed.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert!(groups >= 1 && c % groups == 0, "group_norm: {groups} groups over {c} channels");
        let v = group_norm_forward(self.value(x), groups, eps);
        let needs = self.needs(x);
        let _ = (b, h, w);
        self.push(Op::GroupNorm { x, groups, eps }, v, needs)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let m = *xs.shape().last().unwrap();
        let rows = xs.len() / m;
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs.data()[r * m..(r + 1) * m];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[r * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                out[r * m + j] /= sum;
            }
        }
        let needs = self.needs(x);
        let shape = xs.shape().to_vec();
        self.push(Op::Softmax(x), Tensor::new(&shape, out), needs)
    }

    pub fn matmul_nn(&mut self, a: Var, b: Var) -> Var {
        let (bt, n, k) = self.value(a).dims3();
        let (bt2, k2, m) = self.value(b).dims3();
        assert_eq!((bt, k), (bt2, k2), "matmul_nn shapes");
        let mut out = vec![0.0; bt * n * m];
        for t in 0..bt {
            gemm(
                n,
                k,
                m,
                1.0,
                &self.value(a).data()[t * n * k..(t + 1) * n * k],
                false,
                &self.value(b).data()[t * k * m..(t + 1) * k * m],
                false,
                0.0,
                &mut out[t * n * m..(t + 1) * n * m],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatmulNN(a, b), Tensor::new(&[bt, n, m], out), needs)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (bt, n, k) = self.value(a).dims3();
        let (bt2, m, k2) = self.value(b).dims3();
        assert_eq!((bt, k), (bt2, k2), "matmul_nt shapes");
        let mut out = vec![0.0; bt * n * m];
        for t in 0..bt {
            gemm(
                n,
                k,
                m,
                1.0,
                &self.value(a).data()[t * n * k..(t + 1) * n * k],
                false,
                &self.value(b).data()[t * m * k..(t + 1) * m * k],
                true,
                0.0,
                &mut out[t * n * m..(t + 1) * n * m],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatmulNT(a, b), Tensor::new(&[bt, n, m], out), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let needs = self.needs(x);
        self.push(Op::Reshape(x), v, needs)
    }

    pub fn concat_channel(&mut self, a: Var, b: Var) -> Var {
        let (ba, ca, h, w) = self.value(a).dims4();
        let (bb, cb, h2, w2) = self.value(b).dims4();
        assert_eq!((ba, h, w), (bb, h2, w2), "concat_channel spatial");
        let mut out = vec![0.0; ba * (ca + cb) * h * w];
        let hw = h * w;
        for bi in 0..ba {
            let dst = &mut out[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
            dst[..ca * hw]
                .copy_from_slice(&self.value(a).data()[bi * ca * hw..(bi + 1) * ca * hw]);
            dst[ca * hw..]
                .copy_from_slice(&self.value(b).data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Op::ConcatChannel(a, b),
            Tensor::new(&[ba, ca + cb, h, w], out),
            needs,
        )
    }

    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for bc in 0..b * c {
            out[bc] = xs[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        let needs = self.needs(x);
        self.push(Op::MeanSpatial(x), Tensor::new(&[b, c, 1, 1], out), needs)
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let xs = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * ho * wo];
        for bc in 0..b * c {
            let src = &xs[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
            for y in 0..ho {
                for x2 in 0..wo {
                    dst[y * wo + x2] = src[(y / 2) * w + x2 / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Op::UpsampleNearest2x(x),
            Tensor::new(&[b, c, ho, wo], out),
            needs,
        )
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert!(h % r == 0 && w % r == 0, "pixel_unshuffle: {h}x{w} not divisible by {r}");
        let (ho, wo) = (h / r, w / r);
        let co = c * r * r;
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let oc = ci * r * r + dy * r + dx;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let src = ((bi * c + ci) * h + oy * r + dy) * w + ox * r + dx;
                                let dst = ((bi * co + oc) * ho + oy) * wo + ox;
                                out[dst] = xs[src];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Op::PixelUnshuffle { x, r },
            Tensor::new(&[b, co, ho, wo], out),
            needs,
        )
    }

    pub fn spatial_to_seq(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let xs = self.value(x).data();
        let n = h * w;
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..n {
                    out[(bi * n + i) * c + ci] = xs[(bi * c + ci) * n + i];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::SpatialToSeq(x), Tensor::new(&[b, n, c], out), needs)
    }

    pub fn seq_to_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (b, n, c) = self.value(x).dims3();
        assert_eq!(n, h * w, "seq_to_spatial: {n} tokens vs {h}x{w}");
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..n {
                    out[(bi * c + ci) * n + i] = xs[(bi * n + i) * c + ci];
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Op::SeqToSpatial { x, h, w },
            Tensor::new(&[b, c, h, w], out),
            needs,
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let needs = self.needs(x);
        self.push(Op::MeanAll(x), v, needs)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Var) -> Var {
        let d = self.sub(x, target);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- backward ----

    /// Backpropagates from a scalar loss node and returns gradients for
    /// every trainable parameter that participated in the graph.
    pub fn backward(&mut self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        let mut out = Grads::default();

        for v in (0..self.vals.len()).rev() {
            if !self.needs_grad[v] {
                grads[v] = None;
                continue;
            }
            let g = match grads[v].take() {
                Some(g) => g,
                None => continue,
            };
            match self.ops[v].clone() {
                Op::Leaf => {
                    if let Value::Param(id) = self.vals[v] {
                        if self.store.group(id) == ParamGroup::Trainable {
                            match out.by_param.get_mut(&id) {
                                Some(acc) => acc.axpy(1.0, &g),
                                None => {
                                    out.by_param.insert(id, g);
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, a, &g);
                    self.accum(&mut grads, b, &g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, a, &g);
                    self.accum_scaled(&mut grads, b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let d = g.mul(self.value(b)).unwrap();
                        self.accum(&mut grads, a, &d);
                    }
                    if self.needs(b) {
                        let d = g.mul(self.value(a)).unwrap();
                        self.accum(&mut grads, b, &d);
                    }
                }
                Op::Scale(a, k) => {
                    self.accum_scaled(&mut grads, a, &g, k);
                }
                Op::AddBcastSpatial(x, t) => {
                    self.accum(&mut grads, x, &g);
                    if self.needs(t) {
                        let (b, c, h, w) = self.value(x).dims4();
                        let mut dt = vec![0.0; b * c];
                        for bc in 0..b * c {
                            dt[bc] = g.data()[bc * h * w..(bc + 1) * h * w].iter().sum();
                        }
                        self.accum(&mut grads, t, &Tensor::new(&[b, c, 1, 1], dt));
                    }
                }
                Op::MulBcastSpatial(x, t) => {
                    let (b, c, h, w) = self.value(x).dims4();
                    if self.needs(x) {
                        let ts = self.value(t).data();
                        let mut dx = vec![0.0; g.len()];
                        for bc in 0..b * c {
                            let tv = ts[bc];
                            for i in 0..h * w {
                                dx[bc * h * w + i] = g.data()[bc * h * w + i] * tv;
                            }
                        }
                        self.accum(&mut grads, x, &Tensor::new(&[b, c, h, w], dx));
                    }
                    if self.needs(t) {
                        let xs = self.value(x).data();
                        let mut dt = vec![0.0; b * c];
                        for bc in 0..b * c {
                            let mut s = 0.0;
                            for i in 0..h * w {
                                s += g.data()[bc * h * w + i] * xs[bc * h * w + i];
                            }
                            dt[bc] = s;
                        }
                        self.accum(&mut grads, t, &Tensor::new(&[b, c, 1, 1], dt));
                    }
                }
                Op::MulBcastChannel(x, m) => {
                    let (b, c, h, w) = self.value(x).dims4();
                    let hw = h * w;
                    if self.needs(x) {
                        let ms = self.value(m).data();
                        let mut dx = vec![0.0; g.len()];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                for i in 0..hw {
                                    dx[base + i] = g.data()[base + i] * ms[bi * hw + i];
                                }
                            }
                        }
                        self.accum(&mut grads, x, &Tensor::new(&[b, c, h, w], dx));
                    }
                    if self.needs(m) {
                        let xs = self.value(x).data();
                        let mut dm = vec![0.0; b * hw];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                for i in 0..hw {
                                    dm[bi * hw + i] += g.data()[base + i] * xs[base + i];
                                }
                            }
                        }
                        self.accum(&mut grads, m, &Tensor::new(&[b, 1, h, w], dm));
                    }
                }
                Op::ChannelAffine { x, gamma, beta } => {
                    let (b, c, h, w) = self.value(x).dims4();
                    let hw = h * w;
                    if self.needs(x) {
                        let gs = self.value(gamma).data();
                        let mut dx = vec![0.0; g.len()];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                for i in 0..hw {
                                    dx[base + i] = g.data()[base + i] * gs[ci];
                                }
                            }
                        }
                        self.accum(&mut grads, x, &Tensor::new(&[b, c, h, w], dx));
                    }
                    if self.needs(gamma) {
                        let xs = self.value(x).data();
                        let mut dg = vec![0.0; c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                for i in 0..hw {
                                    dg[ci] += g.data()[base + i] * xs[base + i];
                                }
                            }
                        }
                        self.accum(&mut grads, gamma, &Tensor::new(&[c], dg));
                    }
                    if self.needs(beta) {
                        let mut db = vec![0.0; c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                for i in 0..hw {
                                    db[ci] += g.data()[base + i];
                                }
                            }
                        }
                        self.accum(&mut grads, beta, &Tensor::new(&[c], db));
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = conv2d_backward(
                        self.value(x),
                        self.value(w),
                        stride,
                        pad,
                        &g,
                        self.needs(x),
                        self.needs(w),
                        self.needs(b),
                    );
                    if let Some(dx) = dx {
                        self.accum(&mut grads, x, &dx);
                    }
                    if let Some(dw) = dw {
                        self.accum(&mut grads, w, &dw);
                    }
                    if let Some(db) = db {
                        self.accum(&mut grads, b, &db);
                    }
                }
                Op::PadReplicate { x, pad } => {
                    if self.needs(x) {
                        let (b, c, h, w) = self.value(x).dims4();
                        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
                        let mut dx = vec![0.0; b * c * h * w];
                        for bc in 0..b * c {
                            let gs = &g.data()[bc * ho * wo..(bc + 1) * ho * wo];
                            let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                            for oy in 0..ho {
                                let sy = oy.saturating_sub(pad).min(h - 1);
                                for ox in 0..wo {
                                    let sx = ox.saturating_sub(pad).min(w - 1);
                                    dst[sy * w + sx] += gs[oy * wo + ox];
                                }
                            }
                        }
                        self.accum(&mut grads, x, &Tensor::new(&[b, c, h, w], dx));
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = self.value(x);
                    let ws = self.value(w);
                    let din = ws.shape()[1];
                    let dout = ws.shape()[0];
                    let rows = xs.len() / din;
                    if self.needs(x) {
                        let mut dx = vec![0.0; rows * din];
                        gemm(rows, dout, din, 1.0, g.data(), false, ws.data(), false, 0.0, &mut dx);
                        self.accum(&mut grads, x, &Tensor::new(xs.shape(), dx));
                    }
                    if self.needs(w) {
                        let mut dw = vec![0.0; dout * din];
                        gemm(dout, rows, din, 1.0, g.data(), true, xs.data(), false, 0.0, &mut dw);
                        self.accum(&mut grads, w, &Tensor::new(&[dout, din], dw));
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; dout];
                        for r in 0..rows {
                            for j in 0..dout {
                                db[j] += g.data()[r * dout + j];
                            }
                        }
                        self.accum(&mut grads, b, &Tensor::new(&[dout], db));
                    }
                }
                Op::GroupNorm { x, groups, eps } => {
                    if self.needs(x) {
                        let dx = group_norm_backward(self.value(x), groups, eps, &g);
                        self.accum(&mut grads, x, &dx);
                    }
                }
                Op::Silu(a) => {
                    if self.needs(a) {
                        let xs = self.value(a).data();
                        let mut dx = vec![0.0; g.len()];
                        for i in 0..dx.len() {
                            let s = sigmoid(xs[i]);
                            dx[i] = g.data()[i] * s * (1.0 + xs[i] * (1.0 - s));
                        }
                        let shape = self.value(a).shape().to_vec();
                        self.accum(&mut grads, a, &Tensor::new(&shape, dx));
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(a) {
                        let ys = self.value(v).data();
                        let mut dx = vec![0.0; g.len()];
                        for i in 0..dx.len() {
                            dx[i] = g.data()[i] * ys[i] * (1.0 - ys[i]);
                        }
                        let shape = self.value(a).shape().to_vec();
                        self.accum(&mut grads, a, &Tensor::new(&shape, dx));
                    }
                }
                Op::Softmax(a) => {
                    if self.needs(a) {
                        let ys = self.value(v);
                        let m = *ys.shape().last().unwrap();
                        let rows = ys.len() / m;
                        let mut dx = vec![0.0; g.len()];
                        for r in 0..rows {
                            let y = &ys.data()[r * m..(r + 1) * m];
                            let gr = &g.data()[r * m..(r + 1) * m];
                            let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..m {
                                dx[r * m + j] = y[j] * (gr[j] - dot);
                            }
                        }
                        let shape = ys.shape().to_vec();
                        self.accum(&mut grads, a, &Tensor::new(&shape, dx));
                    }
                }
                Op::MatmulNN(a, b) => {
                    let (bt, n, k) = self.value(a).dims3();
                    let m = self.value(b).shape()[2];
                    if self.needs(a) {
                        let mut da = vec![0.0; bt * n * k];
                        for t in 0..bt {
                            gemm(
                                n,
                                m,
                                k,
                                1.0,
                                &g.data()[t * n * m..(t + 1) * n * m],
                                false,
                                &self.value(b).data()[t * k * m..(t + 1) * k * m],
                                true,
                                0.0,
                                &mut da[t * n * k..(t + 1) * n * k],
                            );
                        }
                        self.accum(&mut grads, a, &Tensor::new(&[bt, n, k], da));
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; bt * k * m];
                        for t in 0..bt {
                            gemm(
                                k,
                                n,
                                m,
                                1.0,
                                &self.value(a).data()[t * n * k..(t + 1) * n * k],
                                true,
                                &g.data()[t * n * m..(t + 1) * n * m],
                                false,
                                0.0,
                                &mut db[t * k * m..(t + 1) * k * m],
                            );
                        }
                        self.accum(&mut grads, b, &Tensor::new(&[bt, k, m], db));
                    }
                }
                Op::MatmulNT(a, b) => {
                    let (bt, n, k) = self.value(a).dims3();
                    let m = self.value(b).shape()[1];
                    if self.needs(a) {
                        let mut da = vec![0.0; bt * n * k];
                        for t in 0..bt {
                            gemm(
                                n,
                                m,
                                k,
                                1.0,
                                &g.data()[t * n * m..(t + 1) * n * m],
                                false,
                                &self.value(b).data()[t * m * k..(t + 1) * m * k],
                                false,
                                0.0,
                                &mut da[t * n * k..(t + 1) * n * k],
                            );
                        }
                        self.accum(&mut grads, a, &Tensor::new(&[bt, n, k], da));
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; bt * m * k];
                        for t in 0..bt {
                            gemm(
                                m,
                                n,
                                k,
                                1.0,
                                &g.data()[t * n * m..(t + 1) * n * m],
                                true,
                                &self.value(a).data()[t * n * k..(t + 1) * n * k],
                                false,
                                0.0,
                                &mut db[t * m * k..(t + 1) * m * k],
                            );
                        }
                        self.accum(&mut grads, b, &Tensor::new(&[bt, m, k], db));
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let d = g.clone().reshape(&shape);
                    self.accum(&mut grads, a, &d);
                }
                Op::ConcatChannel(a, b) => {
                    let (ba, ca, h, w) = self.value(a).dims4();
                    let cb = self.value(b).shape()[1];
                    let hw = h * w;
                    if self.needs(a) {
                        let mut da = vec![0.0; ba * ca * hw];
                        for bi in 0..ba {
                            da[bi * ca * hw..(bi + 1) * ca * hw].copy_from_slice(
                                &g.data()[bi * (ca + cb) * hw..bi * (ca + cb) * hw + ca * hw],
                            );
                        }
                        self.accum(&mut grads, a, &Tensor::new(&[ba, ca, h, w], da));
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; ba * cb * hw];
                        for bi in 0..ba {
                            db[bi * cb * hw..(bi + 1) * cb * hw].copy_from_slice(
                                &g.data()
                                    [bi * (ca + cb) * hw + ca * hw..(bi + 1) * (ca + cb) * hw],
                            );
                        }
                        self.accum(&mut grads, b, &Tensor::new(&[ba, cb, h, w], db));
                    }
                }
                Op::MeanSpatial(a) => {
                    if self.needs(a) {
                        let (b, c, h, w) = self.value(a).dims4();
                        let inv = 1.0 / (h * w) as f64;
                        let mut dx = vec![0.0; b * c * h * w];
                        for bc in 0..b * c {
                            let gv = g.data()[bc] * inv;
                            for i in 0..h * w {
                                dx[bc * h * w + i] = gv;
                            }
                        }
                        self.accum(&mut grads, a, &Tensor::new(&[b, c, h, w], dx));
                    }
                }
                Op::UpsampleNearest2x(a) => {
                    if self.needs(a) {
                        let (b, c, h, w) = self.value(a).dims4();
                        let (ho, wo) = (2 * h, 2 * w);
                        let mut dx = vec![0.0; b * c * h * w];
                        for bc in 0..b * c {
                            let gs = &g.data()[bc * ho * wo..(bc + 1) * ho * wo];
                            let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                            for y in 0..ho {
                                for x2 in 0..wo {
                                    dst[(y / 2) * w + x2 / 2] += gs[y * wo + x2];
                                }
                            }
                        }
                        self.accum(&mut grads, a, &Tensor::new(&[b, c, h, w], dx));
                    }
                }
                Op::PixelUnshuffle { x, r } => {
                    if self.needs(x) {
                        let (b, c, h, w) = self.value(x).dims4();
                        let (ho, wo) = (h / r, w / r);
                        let co = c * r * r;
                        let mut dx = vec![0.0; g.len()];
                        for bi in 0..b {
                            for ci in 0..c {
                                for dy in 0..r {
                                    for dx2 in 0..r {
                                        let oc = ci * r * r + dy * r + dx2;
                                        for oy in 0..ho {
                                            for ox in 0..wo {
                                                let src = ((bi * c + ci) * h + oy * r + dy) * w
                                                    + ox * r
                                                    + dx2;
                                                let dst = ((bi * co + oc) * ho + oy) * wo + ox;
                                                dx[src] = g.data()[dst];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        self.accum(&mut grads, x, &Tensor::new(&[b, c, h, w], dx));
                    }
                }
                Op::SpatialToSeq(a) => {
                    if self.needs(a) {
                        let (b, c, h, w) = self.value(a).dims4();
                        let n = h * w;
                        let mut dx = vec![0.0; g.len()];
                        for bi in 0..b {
                            for ci in 0..c {
                                for i in 0..n {
                                    dx[(bi * c + ci) * n + i] = g.data()[(bi * n + i) * c + ci];
                                }
                            }
                        }
                        self.accum(&mut grads, a, &Tensor::new(&[b, c, h, w], dx));
                    }
                }
                Op::SeqToSpatial { x, h, w } => {
                    if self.needs(x) {
                        let (b, n, c) = self.value(x).dims3();
                        let mut dx = vec![0.0; g.len()];
                        for bi in 0..b {
                            for ci in 0..c {
                                for i in 0..n {
                                    dx[(bi * n + i) * c + ci] = g.data()[(bi * c + ci) * n + i];
                                }
                            }
                        }
                        let _ = (h, w);
                        self.accum(&mut grads, x, &Tensor::new(&[b, n, c], dx));
                    }
                }
                Op::MeanAll(a) => {
                    if self.needs(a) {
                        let len = self.value(a).len();
                        let gv = g.item() / len as f64;
                        let shape = self.value(a).shape().to_vec();
                        self.accum(&mut grads, a, &Tensor::full(&shape, gv));
                    }
                }
            }
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: &Tensor) {
        if !self.needs_grad[v] {
            return;
        }
        match &mut grads[v] {
            Some(acc) => acc.axpy(1.0, delta),
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    fn accum_scaled(&self, grads: &mut [Option<Tensor>], v: Var, delta: &Tensor, k: f64) {
        if !self.needs_grad[v] {
            return;
        }
        match &mut grads[v] {
            Some(acc) => acc.axpy(k, delta),
            slot @ None => *slot = Some(delta.scale(k)),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [f64],
) {
    let (ho, wo) = conv_out_dims(h, w, k, stride, pad);
    let hw_out = ho * wo;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        dst[oy * wo..(oy + 1) * wo].fill(0.0);
                        continue;
                    }
                    let src_row = &x[(ci * h + sy as usize) * w..(ci * h + sy as usize + 1) * w];
                    for ox in 0..wo {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let (ho, wo) = conv_out_dims(h, w, k, stride, pad);
    let hw_out = ho * wo;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[(ci * h + sy as usize) * w + sx as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, cin, h, wdt) = x.dims4();
    let wshape = w.shape();
    assert_eq!(wshape.len(), 4, "conv weight must be [cout,cin,k,k]");
    let (cout, wcin, k) = (wshape[0], wshape[1], wshape[2]);
    assert_eq!(wshape[3], k, "conv kernel must be square");
    assert_eq!(
        wcin, cin,
        "conv2d: input has {cin} channels, weight expects {wcin}"
    );
    assert_eq!(bias.shape(), &[cout], "conv bias");
    let (ho, wo) = conv_out_dims(h, wdt, k, stride, pad);
    let hw_out = ho * wo;
    let ckk = cin * k * k;
    let mut out = vec![0.0; b * cout * hw_out];

    out.par_chunks_mut(cout * hw_out)
        .zip(x.data().par_chunks(cin * h * wdt))
        .for_each(|(out_b, x_b)| {
            let mut col = vec![0.0; ckk * hw_out];
            im2col(x_b, cin, h, wdt, k, stride, pad, &mut col);
            gemm(cout, ckk, hw_out, 1.0, w.data(), false, &col, false, 0.0, out_b);
            for co in 0..cout {
                let bv = bias.data()[co];
                for v in &mut out_b[co * hw_out..(co + 1) * hw_out] {
                    *v += bv;
                }
            }
        });
    Tensor::new(&[b, cout, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    gout: &Tensor,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (b, cin, h, wdt) = x.dims4();
    let wshape = w.shape();
    let (cout, k) = (wshape[0], wshape[2]);
    let (ho, wo) = conv_out_dims(h, wdt, k, stride, pad);
    let hw_out = ho * wo;
    let ckk = cin * k * k;

    let per_item: Vec<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let x_b = &x.data()[bi * cin * h * wdt..(bi + 1) * cin * h * wdt];
            let g_b = &gout.data()[bi * cout * hw_out..(bi + 1) * cout * hw_out];
            let mut col = vec![0.0; ckk * hw_out];
            if need_x || need_w {
                im2col(x_b, cin, h, wdt, k, stride, pad, &mut col);
            }
            let dw = if need_w {
                let mut dw = vec![0.0; cout * ckk];
                gemm(cout, hw_out, ckk, 1.0, g_b, false, &col, true, 0.0, &mut dw);
                Some(dw)
            } else {
                None
            };
            let dx = if need_x {
                let mut dcol = vec![0.0; ckk * hw_out];
                gemm(ckk, cout, hw_out, 1.0, w.data(), true, g_b, false, 0.0, &mut dcol);
                let mut dx_b = vec![0.0; cin * h * wdt];
                col2im(&dcol, cin, h, wdt, k, stride, pad, &mut dx_b);
                Some(dx_b)
            } else {
                None
            };
            let db = if need_b {
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    db[co] = g_b[co * hw_out..(co + 1) * hw_out].iter().sum();
                }
                Some(db)
            } else {
                None
            };
            (dx, dw, db)
        })
        .collect();

    let dx = if need_x {
        let mut dx = vec![0.0; b * cin * h * wdt];
        for (bi, (dxb, _, _)) in per_item.iter().enumerate() {
            dx[bi * cin * h * wdt..(bi + 1) * cin * h * wdt].copy_from_slice(dxb.as_ref().unwrap());
        }
        Some(Tensor::new(&[b, cin, h, wdt], dx))
    } else {
        None
    };
    let dw = if need_w {
        let mut dw = vec![0.0; cout * ckk];
        for (_, dwb, _) in &per_item {
            for (a, &v) in dw.iter_mut().zip(dwb.as_ref().unwrap().iter()) {
                *a += v;
            }
        }
        Some(Tensor::new(&[cout, cin, k, k], dw))
    } else {
        None
    };
    let db = if need_b {
        let mut db = vec![0.0; cout];
        for (_, _, dbb) in &per_item {
            for (a, &v) in db.iter_mut().zip(dbb.as_ref().unwrap().iter()) {
                *a += v;
            }
        }
        Some(Tensor::new(&[cout], db))
    } else {
        None
    };
    (dx, dw, db)
}

fn group_norm_forward(x: &Tensor, groups: usize, eps: f64) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let cs = c / groups;
    let n = cs * h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for gi in 0..groups {
            let base = (bi * c + gi * cs) * h * w;
            let grp = &x.data()[base..base + n];
            let mean = grp.iter().sum::<f64>() / n as f64;
            let var = grp.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..n {
                out[base + i] = (grp[i] - mean) * inv;
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

fn group_norm_backward(x: &Tensor, groups: usize, eps: f64, gout: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let cs = c / groups;
    let n = cs * h * w;
    let mut dx = vec![0.0; x.len()];
    for bi in 0..b {
        for gi in 0..groups {
            let base = (bi * c + gi * cs) * h * w;
            let grp = &x.data()[base..base + n];
            let g = &gout.data()[base..base + n];
            let mean = grp.iter().sum::<f64>() / n as f64;
            let var = grp.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let mut g_mean = 0.0;
            let mut gx_mean = 0.0;
            for i in 0..n {
                let xh = (grp[i] - mean) * inv;
                g_mean += g[i];
                gx_mean += g[i] * xh;
            }
            g_mean /= n as f64;
            gx_mean /= n as f64;
            for i in 0..n {
                let xh = (grp[i] - mean) * inv;
                dx[base + i] = inv * (g[i] - g_mean - xh * gx_mean);
            }
        }
    }
    Tensor::new(&[b, c, h, w], dx)
}
