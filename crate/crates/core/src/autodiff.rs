//! Reverse-mode automatic differentiation over `C×H×W` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! trainable parameter or on an input marked `requires_grad`.

use std::collections::HashMap;
use std::sync::Arc;

use crate::image::Tensor;
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Mean(Var),
    MeanChannels(Var),
    MaskChannels {
        x: Var,
        mask: Arc<Vec<T>>,
    },
    Ncc {
        a: Var,
        b: Var,
        eps: T,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, ParamId), Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.push_arc(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`] when
    /// `requires_grad` is set.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Leaf for a trainable parameter. Repeated requests for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push_arc(store.value_arc(id), Op::Leaf, store.trainable(id));
        self.params.insert(key, v);
        v
    }

    /// 2-D convolution with zero padding `k / 2`. `w` has shape
    /// `(c_out, c_in, k*k)`, `b` shape `(c_out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, k: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(
            wv.height, xv.channels,
            "conv weight expects {} input channels, got {}",
            wv.height, xv.channels
        );
        assert_eq!(wv.width, k * k, "conv weight is not {k}x{k}");
        let mut out = conv_forward(xv, wv, k, stride);
        if let Some(b) = b {
            let bv = self.value(b);
            let n = out.plane_len();
            for c in 0..out.channels {
                let bias = bv.data[c];
                out.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += bias);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b, k, stride }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            channels: av.channels,
            height: av.height,
            width: av.width,
            data,
        }
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        Tensor {
            channels: av.channels,
            height: av.height,
            width: av.width,
            data: av.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.unary(a, |x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.unary(a, sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.tanh());
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.unary(a, |x| if x > T::zero() { x } else { x * slope });
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.abs());
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    /// Per-channel normalization over the spatial extent followed by a
    /// learned per-channel affine map. `gamma`, `beta` are `(C, 1, 1)`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let n = xv.plane_len();
        let nf = T::of(n as f64);
        let mut out = Tensor::zeros(xv.channels, xv.height, xv.width);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.channels);
        for c in 0..xv.channels {
            let plane = xv.plane(c);
            let mean = plane.iter().copied().sum::<T>() / nf;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let (g, b) = (gv.data[c], bv.data[c]);
            for i in 0..n {
                let h = (plane[i] - mean) * is;
                xhat[c * n + i] = h;
                out.data[c * n + i] = g * h + b;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (h, w) = {
            let v = self.value(parts[0]);
            (v.height, v.width)
        };
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(
                (v.height, v.width),
                (h, w),
                "concat spatial mismatch: {}x{} vs {}x{}",
                v.height,
                v.width,
                h,
                w
            );
            data.extend_from_slice(&v.data);
            channels += v.channels;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor {
                channels,
                height: h,
                width: w,
                data,
            },
            Op::Concat(parts.to_vec()),
            ng,
        )
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.channels);
        let n = xv.plane_len();
        let out = Tensor {
            channels: len,
            height: xv.height,
            width: xv.width,
            data: xv.data[start * n..(start + len) * n].to_vec(),
        };
        let ng = self.ng(x);
        self.push(out, Op::Slice { x, start }, ng)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let xv = self.value(x);
        let (c, h, w) = xv.shape();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros(c, ho, wo);
        for ch in 0..c {
            for y in 0..ho {
                let src = &xv.data[ch * h * w + (y / factor) * w..][..w];
                let dst = &mut out.data[ch * ho * wo + y * wo..][..wo];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / factor];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample { x, factor }, ng)
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.shape();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(c, ho, wo);
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ch * h * w + (2 * y + dy) * w + 2 * xo + dx;
                        if xv.data[i] > best {
                            best = xv.data[i];
                            at = i;
                        }
                    }
                    let o = ch * ho * wo + y * wo + xo;
                    out.data[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaxPool2 { x, argmax }, ng)
    }

    /// Mean of every element, as a `1×1×1` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().copied().sum::<T>() / T::of(xv.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Average over channels, producing a single channel.
    pub fn mean_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.plane_len();
        let inv = T::one() / T::of(xv.channels as f64);
        let mut out = Tensor::zeros(1, xv.height, xv.width);
        for c in 0..xv.channels {
            for (o, &v) in out.data.iter_mut().zip(xv.plane(c)) {
                *o += v;
            }
        }
        out.data.iter_mut().for_each(|v| *v *= inv);
        debug_assert_eq!(out.data.len(), n);
        let ng = self.ng(x);
        self.push(out, Op::MeanChannels(x), ng)
    }

    /// Multiplies every channel by the same constant single-plane mask.
    pub fn mask_channels(&mut self, x: Var, mask: Arc<Vec<T>>) -> Var {
        let xv = self.value(x);
        let n = xv.plane_len();
        assert_eq!(mask.len(), n, "mask size does not match tensor plane");
        let mut out = xv.clone();
        for c in 0..out.channels {
            for (v, &m) in out.data[c * n..(c + 1) * n].iter_mut().zip(mask.iter()) {
                *v *= m;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaskChannels { x, mask }, ng)
    }

    /// Zero-mean normalized cross-correlation of two equally shaped tensors,
    /// `cov(a, b) / (σa·σb + eps)`, as a scalar node.
    pub fn ncc(&mut self, a: Var, b: Var, eps: T) -> Var {
        let stats = NccStats::new(&self.value(a).data, &self.value(b).data, eps);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(stats.value()), Op::Ncc { a, b, eps }, ng)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut s = T::zero();
        for &(v, w) in terms {
            let val = self.value(v);
            assert_eq!(val.len(), 1, "weighted_sum expects scalar nodes");
            s += w * val.data[0];
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match (&node.op, grads[i].as_ref()) {
                (Op::Leaf, _) | (_, None) => continue,
                (_, Some(g)) => g.clone(),
            };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, k, stride } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (gx, gw) = conv_backward(
                    xv,
                    wv,
                    g,
                    *k,
                    *stride,
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let n = g.plane_len();
                        let data = (0..g.channels)
                            .map(|c| g.data[c * n..(c + 1) * n].iter().copied().sum())
                            .collect();
                        accumulate(grads, *b, Tensor::from_vec(g.channels, 1, 1, data).unwrap());
                    }
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, map(g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, zip(g, self.value(*b), |gv, bv| gv * bv));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, zip(g, self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, map(g, |v| v * s));
            }
            Op::Sigmoid(a) => {
                accumulate(grads, *a, zip(g, y, |gv, yv| gv * yv * (T::one() - yv)));
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, zip(g, y, |gv, yv| gv * (T::one() - yv * yv)));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let xv = self.value(*a);
                accumulate(
                    grads,
                    *a,
                    zip(g, xv, |gv, xv| if xv > T::zero() { gv } else { gv * slope }),
                );
            }
            Op::Abs(a) => {
                let xv = self.value(*a);
                accumulate(grads, *a, zip(g, xv, |gv, xv| gv * sign(xv)));
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.plane_len();
                let nf = T::of(n as f64);
                let gv = self.value(*gamma);
                let mut dgamma = vec![T::zero(); g.channels];
                let mut dbeta = vec![T::zero(); g.channels];
                let mut dx = Tensor::zeros(g.channels, g.height, g.width);
                for c in 0..g.channels {
                    let gp = &g.data[c * n..(c + 1) * n];
                    let hp = &xhat[c * n..(c + 1) * n];
                    let mut sum_g = T::zero();
                    let mut sum_gh = T::zero();
                    for j in 0..n {
                        sum_g += gp[j];
                        sum_gh += gp[j] * hp[j];
                    }
                    dgamma[c] = sum_gh;
                    dbeta[c] = sum_g;
                    let scale = gv.data[c] * inv_std[c] / nf;
                    for j in 0..n {
                        dx.data[c * n + j] = scale * (nf * gp[j] - sum_g - hp[j] * sum_gh);
                    }
                }
                if self.ng(*x) {
                    accumulate(grads, *x, dx);
                }
                let ch = g.channels;
                if self.ng(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(ch, 1, 1, dgamma).unwrap());
                }
                if self.ng(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(ch, 1, 1, dbeta).unwrap());
                }
            }
            Op::Concat(parts) => {
                let n = g.plane_len();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).channels;
                    if self.ng(p) {
                        let data = g.data[offset * n..(offset + c) * n].to_vec();
                        accumulate(grads, p, Tensor::from_vec(c, g.height, g.width, data).unwrap());
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let n = xv.plane_len();
                let mut dx = Tensor::zeros(xv.channels, xv.height, xv.width);
                dx.data[start * n..start * n + g.len()].copy_from_slice(&g.data);
                accumulate(grads, *x, dx);
            }
            Op::Upsample { x, factor } => {
                let xv = self.value(*x);
                let (c, h, w) = xv.shape();
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = Tensor::zeros(c, h, w);
                for ch in 0..c {
                    for yo in 0..ho {
                        for xo in 0..wo {
                            dx.data[ch * h * w + (yo / factor) * w + xo / factor] +=
                                g.data[ch * ho * wo + yo * wo + xo];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.channels, xv.height, xv.width);
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data[src] += g.data[o];
                }
                accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.data[0] / T::of(xv.len() as f64);
                accumulate(
                    grads,
                    *x,
                    Tensor {
                        channels: xv.channels,
                        height: xv.height,
                        width: xv.width,
                        data: vec![v; xv.len()],
                    },
                );
            }
            Op::MeanChannels(x) => {
                let xv = self.value(*x);
                let inv = T::one() / T::of(xv.channels as f64);
                let mut dx = Tensor::zeros(xv.channels, xv.height, xv.width);
                for c in 0..xv.channels {
                    for (d, &gv) in dx.plane_mut(c).iter_mut().zip(&g.data) {
                        *d = gv * inv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MaskChannels { x, mask } => {
                let n = g.plane_len();
                let mut dx = g.clone();
                for c in 0..dx.channels {
                    for (v, &m) in dx.data[c * n..(c + 1) * n].iter_mut().zip(mask.iter()) {
                        *v *= m;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Ncc { a, b, eps } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let stats = NccStats::new(&av.data, &bv.data, *eps);
                let (da, db) = stats.gradients(&av.data, &bv.data);
                let gs = g.data[0];
                if self.ng(*a) {
                    let data = da.into_iter().map(|v| v * gs).collect();
                    accumulate(grads, *a, Tensor::from_vec(av.channels, av.height, av.width, data).unwrap());
                }
                if self.ng(*b) {
                    let data = db.into_iter().map(|v| v * gs).collect();
                    accumulate(grads, *b, Tensor::from_vec(bv.channels, bv.height, bv.width, data).unwrap());
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.ng(v) {
                        accumulate(grads, v, Tensor::scalar(g.data[0] * w));
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of the parameters of `store` used on `tape`.
    pub fn params(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Vec<(ParamId, Tensor<T>)> {
        let uid = store.uid();
        let mut out: Vec<(ParamId, Tensor<T>)> = tape
            .params
            .iter()
            .filter(|((s, _), _)| *s == uid)
            .filter_map(|(&(_, id), &v)| self.wrt(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            debug_assert_eq!(acc.len(), g.len());
            acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += *b);
        }
        slot @ None => *slot = Some(g),
    }
}

fn map<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        channels: t.channels,
        height: t.height,
        width: t.width,
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        channels: a.channels,
        height: a.height,
        width: a.width,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

#[inline]
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sufficient statistics of a zero-mean normalized cross-correlation.
pub(crate) struct NccStats<T> {
    mean_a: T,
    mean_b: T,
    cov: T,
    sd_a: T,
    sd_b: T,
    eps: T,
    n: T,
}

impl<T: Scalar> NccStats<T> {
    pub(crate) fn new(a: &[T], b: &[T], eps: T) -> Self {
        assert_eq!(a.len(), b.len(), "ncc operands differ in size");
        let n = T::of(a.len() as f64);
        let mean_a = a.iter().copied().sum::<T>() / n;
        let mean_b = b.iter().copied().sum::<T>() / n;
        let (mut cov, mut va, mut vb) = (T::zero(), T::zero(), T::zero());
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x - mean_a, y - mean_b);
            cov += dx * dy;
            va += dx * dx;
            vb += dy * dy;
        }
        Self {
            mean_a,
            mean_b,
            cov: cov / n,
            sd_a: (va / n).sqrt(),
            sd_b: (vb / n).sqrt(),
            eps,
            n,
        }
    }

    pub(crate) fn value(&self) -> T {
        self.cov / (self.sd_a * self.sd_b + self.eps)
    }

    fn gradients(&self, a: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
        let d = self.sd_a * self.sd_b + self.eps;
        let inv_nd = T::one() / (self.n * d);
        // ∂σa/∂aᵢ = (aᵢ − ā)/(n·σa); zero when σa = 0.
        let ka = if self.sd_a > T::zero() {
            self.cov * self.sd_b / (self.n * self.sd_a * d * d)
        } else {
            T::zero()
        };
        let kb = if self.sd_b > T::zero() {
            self.cov * self.sd_a / (self.n * self.sd_b * d * d)
        } else {
            T::zero()
        };
        let mut da = Vec::with_capacity(a.len());
        let mut db = Vec::with_capacity(b.len());
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x - self.mean_a, y - self.mean_b);
            da.push(dy * inv_nd - ka * dx);
            db.push(dx * inv_nd - kb * dy);
        }
        (da, db)
    }
}

/// Unfolds `x` into a `(c_in·k·k) × (h_out·w_out)` patch matrix.
fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, ho: usize, wo: usize) -> Vec<T> {
    let (c, h, w) = x.shape();
    let pad = (k / 2) as isize;
    let n_out = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * n_out];
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        // contiguous span of valid output columns
                        let off = kx as isize - pad;
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + off) as usize;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Tensor<T> {
    let pad = (k / 2) as isize;
    let n_out = ho * wo;
    let mut x = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let plane = &mut x.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_out_dims(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    let pad = k / 2;
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

pub(crate) fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, k: usize, stride: usize) -> Tensor<T> {
    let (c_in, h, wd) = x.shape();
    let c_out = w.channels;
    let (ho, wo) = conv_out_dims(h, wd, k, stride);
    let n_out = ho * wo;
    let mut out = Tensor::zeros(c_out, ho, wo);
    let kk = c_in * k * k;
    if k == 1 && stride == 1 {
        T::gemm(c_out, kk, n_out, T::one(), &w.data, false, &x.data, false, T::zero(), &mut out.data);
    } else {
        let cols = im2col(x, k, stride, ho, wo);
        T::gemm(c_out, kk, n_out, T::one(), &w.data, false, &cols, false, T::zero(), &mut out.data);
    }
    out
}

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    k: usize,
    stride: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (c_in, h, wd) = x.shape();
    let c_out = w.channels;
    let (ho, wo) = (g.height, g.width);
    let n_out = ho * wo;
    let kk = c_in * k * k;
    let direct = k == 1 && stride == 1;
    let cols_owned;
    let cols: &[T] = if direct {
        &x.data
    } else if need_w {
        cols_owned = im2col(x, k, stride, ho, wo);
        &cols_owned
    } else {
        &[]
    };
    let gw = need_w.then(|| {
        let mut gw = Tensor::zeros(c_out, c_in, k * k);
        T::gemm(c_out, n_out, kk, T::one(), &g.data, false, cols, true, T::zero(), &mut gw.data);
        gw
    });
    let gx = need_x.then(|| {
        let mut dcols = vec![T::zero(); kk * n_out];
        T::gemm(kk, c_out, n_out, T::one(), &w.data, true, &g.data, false, T::zero(), &mut dcols);
        if direct {
            Tensor::from_vec(c_in, h, wd, dcols).unwrap()
        } else {
            col2im(&dcols, c_in, h, wd, k, stride, ho, wo)
        }
    });
    (gx, gw)
}
