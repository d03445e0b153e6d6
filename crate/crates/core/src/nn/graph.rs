//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! replays the tape in reverse. Nodes created from constants never receive
//! gradients, and neither does anything computed only from constants.

use crate::nn::conv::{self, ConvGeom};
use crate::nn::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which axis a 2-D softmax normalizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one.
    Rows,
    /// Each column sums to one.
    Cols,
}

/// Reduction applied to a `[N, h*w]` volume whose columns index an `h x w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMax {
    /// `out[n, l] = max_k v[n, k*w + l]` -> `[N, w]`
    OverRows,
    /// `out[n, k] = max_l v[n, k*w + l]` -> `[N, h]`
    OverCols,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct L1Target<T> {
    pub y: usize,
    pub x: usize,
    pub value: [T; 2],
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulMap(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Transpose(Var),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Depthwise { x: Var, kernels: Tensor<T> },
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Upsample2(Var),
    AvgPool2(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var, Axis),
    L2NormCols { x: Var, inv_norm: Vec<T> },
    GridMax { x: Var, argmax: Vec<usize> },
    Warp { src: Var, off: Var, stride: T },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)> },
    Focal { logits: Var, target: Tensor<T>, npos: T },
    MaskedL1 { pred: Var, targets: Vec<L1Target<T>>, norm: T },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to `v`; zeros if `v` did not influence the output.
    pub fn wrt(&self, g: &Graph<T>, v: Var) -> Tensor<T> {
        self.node[v.0].clone().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `[C, H, W] * [1, H, W]` broadcast over channels.
    pub fn mul_map(&mut self, x: Var, map: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.shape(map), &[1, h, w], "map must be [1,H,W]");
        let xv = self.value(x);
        let m = self.value(map).data();
        let hw = h * w;
        let out = Tensor::from_fn(&[c, h, w], |i| xv.data()[i] * m[i % hw]);
        let ng = self.ng(x) || self.ng(map);
        self.push(out, Op::MulMap(x, map), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing dims differ");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let out = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// 2-D convolution (cross-correlation) of `[cin, h, w]` with `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, dilation: usize) -> Var {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [cout,cin,k,k]");
        assert_eq!(ws[1], cin, "conv input channels {cin} != weight {}", ws[1]);
        assert_eq!(ws[2], ws[3]);
        let geom = ConvGeom { cin, h, w: wd, k: ws[2], stride, pad, dilation };
        let (ho, wo) = geom.out_hw();
        let cout = ws[0];
        let npix = ho * wo;
        let cols = if geom.is_pointwise() { Vec::new() } else { conv::im2col(self.value(x).data(), &geom) };
        let colref: &[T] = if geom.is_pointwise() { self.value(x).data() } else { &cols };
        let mut out = vec![T::zero(); cout * npix];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (co, chunk) in out.chunks_mut(npix).enumerate() {
                chunk.fill(bv[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let k = geom.rows();
        T::gemm(
            cout,
            k,
            npix,
            T::one(),
            self.value(w).data(),
            k as isize,
            1,
            colref,
            npix as isize,
            1,
            beta,
            &mut out,
            npix as isize,
            1,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::from_vec(&[cout, ho, wo], out), Op::Conv { x, w, b, geom, cols }, ng)
    }

    /// Fixed filter bank `[m, k, k]` applied to every channel, replicate padding.
    pub fn depthwise_fixed(&mut self, x: Var, kernels: &Tensor<T>) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (m, k) = (kernels.shape()[0], kernels.shape()[1]);
        let out = conv::depthwise_bank(self.value(x).data(), c, h, w, kernels.data(), m, k);
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[m * c, h, w], out), Op::Depthwise { x, kernels: kernels.clone() }, ng)
    }

    /// Per-channel normalization over the spatial extent with affine `gamma`, `beta` (`[C]`).
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::of(1e-5);
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let n = T::of(hw as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); c * hw];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            let s = &xv[ch * hw..(ch + 1) * hw];
            let mean = s.iter().copied().sum::<T>() / n;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in 0..hw {
                let xh = (s[i] - mean) * is;
                xhat[ch * hw + i] = xh;
                out[ch * hw + i] = gv[ch] * xh + bv[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Tensor::from_vec(&[c, h, w], out), Op::Norm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (_, h, w) = self.value(x).chw();
        self.upsample2_to(x, 2 * h, 2 * w)
    }

    /// Nearest-neighbour 2x upsampling cropped to `oh x ow` (at most `2h x 2w`).
    pub fn upsample2_to(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(oh <= 2 * h && ow <= 2 * w, "upsample target larger than 2x");
        let xv = self.value(x);
        let out = Tensor::from_fn(&[c, oh, ow], |i| {
            let ch = i / (oh * ow);
            let rem = i % (oh * ow);
            let (y, xx) = (rem / ow, rem % ow);
            xv.at3(ch, y / 2, xx / 2)
        });
        let ng = self.ng(x);
        self.push(out, Op::Upsample2(x), ng)
    }

    /// 2x2 average pooling; an odd trailing row or column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let q = T::of(0.25);
        let out = Tensor::from_fn(&[c, oh, ow], |i| {
            let ch = i / (oh * ow);
            let (y, xx) = ((i / ow) % oh, i % ow);
            (xv.at3(ch, 2 * y, 2 * xx) + xv.at3(ch, 2 * y + 1, 2 * xx) + xv.at3(ch, 2 * y, 2 * xx + 1) + xv.at3(ch, 2 * y + 1, 2 * xx + 1)) * q
        });
        let ng = self.ng(x);
        self.push(out, Op::AvgPool2(x), ng)
    }

    /// Matrix product of 2-D operands, optionally transposed.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dims {sa:?} x {sb:?}");
        let mut out = vec![T::zero(); m * n];
        let (rsa, csa) = if ta { (1, sa[1] as isize) } else { (sa[1] as isize, 1) };
        let (rsb, csb) = if tb { (1, sb[1] as isize) } else { (sb[1] as isize, 1) };
        T::gemm(m, k, n, T::one(), self.value(a).data(), rsa, csa, self.value(b).data(), rsb, csb, T::zero(), &mut out, n as isize, 1);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let out = softmax2d(self.value(x), axis);
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x, axis), ng)
    }

    /// Scales each column of a `[C, N]` matrix to unit Euclidean length.
    pub fn l2_normalize_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, n) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let eps = T::of(1e-12);
        let inv_norm: Vec<T> = (0..n)
            .map(|j| T::one() / ((0..c).map(|i| d[i * n + j] * d[i * n + j]).sum::<T>() + eps).sqrt())
            .collect();
        let out = Tensor::from_fn(&[c, n], |i| d[i] * inv_norm[i % n]);
        let ng = self.ng(x);
        self.push(out, Op::L2NormCols { x, inv_norm }, ng)
    }

    /// Max-reduces a `[N, h*w]` volume along one axis of its `h x w` grid.
    pub fn grid_max(&mut self, x: Var, h: usize, w: usize, mode: GridMax) -> Var {
        let t = self.value(x);
        let n = t.shape()[0];
        assert_eq!(t.shape()[1], h * w, "grid_max expects [N, h*w]");
        let d = t.data();
        let hw = h * w;
        let (outer, inner) = match mode {
            GridMax::OverRows => (w, h),
            GridMax::OverCols => (h, w),
        };
        let mut out = vec![T::zero(); n * outer];
        let mut argmax = vec![0usize; n * outer];
        for r in 0..n {
            let row = &d[r * hw..(r + 1) * hw];
            for o in 0..outer {
                let idx = |i: usize| match mode {
                    GridMax::OverRows => i * w + o,
                    GridMax::OverCols => o * w + i,
                };
                let mut best = idx(0);
                for i in 1..inner {
                    let j = idx(i);
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out[r * outer + o] = row[best];
                argmax[r * outer + o] = r * hw + best;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[n, outer], out), Op::GridMax { x, argmax }, ng)
    }

    /// Bilinearly samples `src` (`[C, h, w]`) at `(i + oy/stride, j + ox/stride)`
    /// for every cell, reading zeros outside the grid. `off` is `[2, h, w]`
    /// holding `(ox, oy)` in pixels.
    pub fn warp(&mut self, src: Var, off: Var, stride: T) -> Var {
        let (c, h, w) = self.value(src).chw();
        assert_eq!(self.shape(off), &[2, h, w], "offset field must be [2,h,w]");
        let sv = self.value(src);
        let ov = self.value(off);
        let mut out = Tensor::zeros(&[c, h, w]);
        for i in 0..h {
            for j in 0..w {
                let sy = T::of(i as f64) + ov.at3(1, i, j) / stride;
                let sx = T::of(j as f64) + ov.at3(0, i, j) / stride;
                for (yy, xx, wt) in bilinear_taps(sy, sx) {
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    for ch in 0..c {
                        *out.at3_mut(ch, i, j) += wt * sv.at3(ch, yy as usize, xx as usize);
                    }
                }
            }
        }
        let ng = self.ng(src) || self.ng(off);
        self.push(out, Op::Warp { src, off, stride }, ng)
    }

    /// Summed softmax cross-entropy of selected rows of `[R, C]` logits
    /// against `(row, class)` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let t = self.value(logits);
        let c = t.shape()[1];
        let d = t.data();
        let mut loss = T::zero();
        for &(r, cls) in targets {
            assert!(cls < c && r < t.shape()[0], "cross-entropy target out of range");
            let row = &d[r * c..(r + 1) * c];
            loss += log_sum_exp(row) - row[cls];
        }
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec() }, ng)
    }

    /// Penalty-reduced focal loss on heatmap logits against a Gaussian-splat
    /// target; normalized by the number of positive (exactly 1) target cells.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor<T>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), target.shape());
        let npos = T::of(target.data().iter().filter(|&&y| y == T::one()).count().max(1) as f64);
        let mut loss = T::zero();
        for (&xi, &yi) in x.data().iter().zip(target.data()) {
            let p = clamp_prob(sigmoid(xi));
            if yi == T::one() {
                loss -= (T::one() - p).powi(2) * p.ln();
            } else {
                loss -= (T::one() - yi).powi(4) * p.powi(2) * (T::one() - p).ln();
            }
        }
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss / npos), Op::Focal { logits, target: target.clone(), npos }, ng)
    }

    /// L1 regression of a `[2, H, W]` map at listed cells, divided by the count.
    pub fn masked_l1(&mut self, pred: Var, targets: &[L1Target<T>]) -> Var {
        let p = self.value(pred);
        let norm = T::of(targets.len().max(1) as f64);
        let mut loss = T::zero();
        for t in targets {
            for ch in 0..2 {
                loss += (p.at3(ch, t.y, t.x) - t.value[ch]).abs();
            }
        }
        let ng = self.ng(pred);
        self.push(Tensor::scalar(loss / norm), Op::MaskedL1 { pred, targets: targets.to_vec(), norm }, ng)
    }

    /// Fingerprint of every piecewise choice made while evaluating the graph:
    /// rectifier signs, max-reduction winners, bilinear cells and focal-loss
    /// clamping. Two evaluations with equal fingerprints lie on the same
    /// smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in self.value(*a).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::GridMax { argmax, .. } => argmax.hash(&mut h),
                Op::Warp { off, stride, .. } => {
                    for &v in self.value(*off).data() {
                        (v / *stride).floor().to_i64().hash(&mut h);
                    }
                }
                Op::Focal { logits, .. } => {
                    let lo = T::of(1e-4);
                    for &v in self.value(*logits).data() {
                        let p = sigmoid(v);
                        (p <= lo, p >= T::one() - lo).hash(&mut h);
                    }
                }
                Op::MaskedL1 { pred, targets, .. } => {
                    let p = self.value(*pred);
                    for t in targets {
                        for ch in 0..2 {
                            (p.at3(ch, t.y, t.x) > t.value[ch]).hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Grads { node: grads }
    }

    /// Collects gradients of every parameter node into a store-aligned accumulator.
    pub fn param_grads(&self, grads: &Grads<T>, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::new(store.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.node[i]) {
                out.accumulate(*id, g);
            }
        }
        out
    }

    fn backprop_node(&self, idx: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let g = gout.data();
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
            }
            f(slot.as_mut().unwrap().data_mut());
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(grads, *a, &|d| add_into(d, g));
                acc(grads, *b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|d| add_into(d, g));
                acc(grads, *b, &|d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(grads, *b, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulMap(x, m) => {
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                let hw = mv.len();
                acc(grads, *x, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * mv[i % hw];
                    }
                });
                acc(grads, *m, &|d| {
                    for i in 0..g.len() {
                        d[i % hw] += g[i] * xv[i];
                    }
                });
            }
            Op::Scale(a, s) => acc(grads, *a, &|d| {
                for (x, &y) in d.iter_mut().zip(g) {
                    *x += y * *s;
                }
            }),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(grads, *a, &|d| {
                    for i in 0..d.len() {
                        if av[i] > T::zero() {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, *a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Sum(a) => acc(grads, *a, &|d| {
                for x in d.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Reshape(a) => acc(grads, *a, &|d| add_into(d, g)),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(grads, p, &|d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                acc(grads, *a, &|d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv { x, w, b, geom, cols } => {
                let (ho, wo) = geom.out_hw();
                let npix = ho * wo;
                let cout = node.value.shape()[0];
                let k = geom.rows();
                let colref: &[T] = if geom.is_pointwise() { self.value(*x).data() } else { cols };
                acc(grads, *w, &|d| {
                    T::gemm(cout, npix, k, T::one(), g, npix as isize, 1, colref, 1, npix as isize, T::one(), d, k as isize, 1);
                });
                if let Some(b) = b {
                    acc(grads, *b, &|d| {
                        for co in 0..cout {
                            d[co] += g[co * npix..(co + 1) * npix].iter().copied().sum::<T>();
                        }
                    });
                }
                let wv = self.value(*w).data();
                acc(grads, *x, &|d| {
                    if geom.is_pointwise() {
                        T::gemm(k, cout, npix, T::one(), wv, 1, k as isize, g, npix as isize, 1, T::one(), d, npix as isize, 1);
                    } else {
                        let mut dcols = vec![T::zero(); k * npix];
                        T::gemm(k, cout, npix, T::one(), wv, 1, k as isize, g, npix as isize, 1, T::zero(), &mut dcols, npix as isize, 1);
                        conv::col2im(&dcols, geom, d);
                    }
                });
            }
            Op::Depthwise { x, kernels } => {
                let (c, h, w) = self.value(*x).chw();
                let (m, k) = (kernels.shape()[0], kernels.shape()[1]);
                acc(grads, *x, &|d| conv::depthwise_bank_backward(g, c, h, w, kernels.data(), m, k, d));
            }
            Op::Norm { x, gamma, beta, xhat, inv_std } => {
                let (c, h, w) = self.value(*x).chw();
                let hw = h * w;
                let n = T::of(hw as f64);
                let gv = self.value(*gamma).data();
                acc(grads, *gamma, &|d| {
                    for ch in 0..c {
                        d[ch] += (0..hw).map(|i| g[ch * hw + i] * xhat[ch * hw + i]).sum::<T>();
                    }
                });
                acc(grads, *beta, &|d| {
                    for ch in 0..c {
                        d[ch] += g[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
                    }
                });
                acc(grads, *x, &|d| {
                    for ch in 0..c {
                        let gs = &g[ch * hw..(ch + 1) * hw];
                        let xs = &xhat[ch * hw..(ch + 1) * hw];
                        let mean_g = gs.iter().copied().sum::<T>() / n;
                        let mean_gx = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>() / n;
                        let k = gv[ch] * inv_std[ch];
                        for i in 0..hw {
                            d[ch * hw + i] += k * (gs[i] - mean_g - xs[i] * mean_gx);
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, oh, ow) = node.value.chw();
                acc(grads, *x, &|d| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                d[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, oh, ow) = node.value.chw();
                let q = T::of(0.25);
                acc(grads, *x, &|d| {
                    for ch in 0..c {
                        for y in 0..oh * 2 {
                            for xx in 0..ow * 2 {
                                d[(ch * h + y) * w + xx] += g[(ch * oh + y / 2) * ow + xx / 2] * q;
                            }
                        }
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // Strides of op(A) (m x k) and op(B) (k x n) inside their storage.
                let (rsa, csa) = if *ta { (1, sa[1] as isize) } else { (sa[1] as isize, 1) };
                let (rsb, csb) = if *tb { (1, sb[1] as isize) } else { (sb[1] as isize, 1) };
                // dA_op = G * op(B)^T, written through A's storage strides.
                acc(grads, *a, &|d| {
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, csb, rsb, T::one(), d, rsa, csa);
                });
                // dB_op = op(A)^T * G
                acc(grads, *b, &|d| {
                    T::gemm(k, m, n, T::one(), av, csa, rsa, g, n as isize, 1, T::one(), d, rsb, csb);
                });
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let yd = y.data();
                acc(grads, *x, &|d| match axis {
                    Axis::Rows => {
                        for i in 0..r {
                            let dot: T = (0..c).map(|j| g[i * c + j] * yd[i * c + j]).sum();
                            for j in 0..c {
                                d[i * c + j] += yd[i * c + j] * (g[i * c + j] - dot);
                            }
                        }
                    }
                    Axis::Cols => {
                        for j in 0..c {
                            let dot: T = (0..r).map(|i| g[i * c + j] * yd[i * c + j]).sum();
                            for i in 0..r {
                                d[i * c + j] += yd[i * c + j] * (g[i * c + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::L2NormCols { x, inv_norm } => {
                let y = &node.value;
                let (c, n) = (y.shape()[0], y.shape()[1]);
                let yd = y.data();
                acc(grads, *x, &|d| {
                    for j in 0..n {
                        let dot: T = (0..c).map(|i| g[i * n + j] * yd[i * n + j]).sum();
                        for i in 0..c {
                            d[i * n + j] += (g[i * n + j] - yd[i * n + j] * dot) * inv_norm[j];
                        }
                    }
                });
            }
            Op::GridMax { x, argmax } => acc(grads, *x, &|d| {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            }),
            Op::Warp { src, off, stride } => {
                let (c, h, w) = self.value(*src).chw();
                let sv = self.value(*src);
                let ov = self.value(*off);
                let inb = |yy: isize, xx: isize| yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
                acc(grads, *src, &|d| {
                    for i in 0..h {
                        for j in 0..w {
                            let sy = T::of(i as f64) + ov.at3(1, i, j) / *stride;
                            let sx = T::of(j as f64) + ov.at3(0, i, j) / *stride;
                            for (yy, xx, wt) in bilinear_taps(sy, sx) {
                                if !inb(yy, xx) {
                                    continue;
                                }
                                for ch in 0..c {
                                    d[(ch * h + yy as usize) * w + xx as usize] += wt * g[(ch * h + i) * w + j];
                                }
                            }
                        }
                    }
                });
                acc(grads, *off, &|d| {
                    let read = |ch: usize, yy: isize, xx: isize| {
                        if inb(yy, xx) {
                            sv.at3(ch, yy as usize, xx as usize)
                        } else {
                            T::zero()
                        }
                    };
                    for i in 0..h {
                        for j in 0..w {
                            let sy = T::of(i as f64) + ov.at3(1, i, j) / *stride;
                            let sx = T::of(j as f64) + ov.at3(0, i, j) / *stride;
                            let (y0, x0) = (sy.floor(), sx.floor());
                            let (fy, fx) = (sy - y0, sx - x0);
                            let (y0, x0) = (y0.to_isize().unwrap_or(isize::MIN / 2), x0.to_isize().unwrap_or(isize::MIN / 2));
                            let (mut gx, mut gy) = (T::zero(), T::zero());
                            for ch in 0..c {
                                let go = g[(ch * h + i) * w + j];
                                if go == T::zero() {
                                    continue;
                                }
                                let v00 = read(ch, y0, x0);
                                let v01 = read(ch, y0, x0 + 1);
                                let v10 = read(ch, y0 + 1, x0);
                                let v11 = read(ch, y0 + 1, x0 + 1);
                                gx += go * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                                gy += go * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                            d[i * w + j] += gx / *stride;
                            d[h * w + i * w + j] += gy / *stride;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let t = self.value(*logits);
                let c = t.shape()[1];
                let ld = t.data();
                acc(grads, *logits, &|d| {
                    for &(r, cls) in targets {
                        let row = &ld[r * c..(r + 1) * c];
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            d[r * c + j] += g[0] * (row[j] - lse).exp();
                        }
                        d[r * c + cls] -= g[0];
                    }
                });
            }
            Op::Focal { logits, target, npos } => {
                let xd = self.value(*logits).data();
                let yd = target.data();
                let lo = T::of(1e-4);
                let hi = T::one() - lo;
                acc(grads, *logits, &|d| {
                    for i in 0..d.len() {
                        let s = sigmoid(xd[i]);
                        if s <= lo || s >= hi {
                            continue;
                        }
                        let p = s;
                        let q = T::one() - p;
                        let dl_dp = if yd[i] == T::one() {
                            T::of(2.0) * q * p.ln() - q * q / p
                        } else {
                            let wgt = (T::one() - yd[i]).powi(4);
                            -wgt * (T::of(2.0) * p * q.ln() - p * p / q)
                        };
                        d[i] += g[0] * dl_dp * p * q / *npos;
                    }
                });
            }
            Op::MaskedL1 { pred, targets, norm } => {
                let p = self.value(*pred);
                let (_, h, w) = p.chw();
                acc(grads, *pred, &|d| {
                    for t in targets {
                        for ch in 0..2 {
                            let diff = p.at3(ch, t.y, t.x) - t.value[ch];
                            let s = if diff > T::zero() {
                                T::one()
                            } else if diff < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            d[(ch * h + t.y) * w + t.x] += g[0] * s / *norm;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (x, &y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::of(1e-4);
    p.max(lo).min(T::one() - lo)
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Four bilinear taps `(y, x, weight)` around a real-valued position.
pub(crate) fn bilinear_taps<T: Scalar>(sy: T, sx: T) -> [(isize, isize, T); 4] {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let y0 = y0.to_isize().unwrap_or(isize::MIN / 2);
    let x0 = x0.to_isize().unwrap_or(isize::MIN / 2);
    let one = T::one();
    [
        (y0, x0, (one - fy) * (one - fx)),
        (y0, x0 + 1, (one - fy) * fx),
        (y0 + 1, x0, fy * (one - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ]
}

/// Softmax of a 2-D tensor along rows or columns.
pub fn softmax2d<T: Scalar>(x: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let mut out = vec![T::zero(); r * c];
    match axis {
        Axis::Rows => {
            for i in 0..r {
                let row = &d[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    s += e;
                }
                for j in 0..c {
                    out[i * c + j] /= s;
                }
            }
        }
        Axis::Cols => {
            for j in 0..c {
                let m = (0..r).map(|i| d[i * c + j]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for i in 0..r {
                    let e = (d[i * c + j] - m).exp();
                    out[i * c + j] = e;
                    s += e;
                }
                for i in 0..r {
                    out[i * c + j] /= s;
                }
            }
        }
    }
    Tensor::from_vec(&[r, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_grad, rand_tensor};

    #[test]
    fn conv_grad_matches_finite_differences() {
        let x0 = rand_tensor(&[2, 5, 6], 1);
        let w0 = rand_tensor(&[3, 2, 3, 3], 2);
        let b0 = rand_tensor(&[3], 3);
        for &(stride, pad, dil) in &[(1, 1, 1), (2, 2, 2), (1, 0, 1)] {
            let f = |g: &mut Graph<f64>, xs: &[Var]| {
                let y = g.conv2d(xs[0], xs[1], Some(xs[2]), stride, pad, dil);
                let y2 = g.mul(y, y);
                g.sum(y2)
            };
            check_input_grad(&[x0.clone(), w0.clone(), b0.clone()], f, 1e-5);
        }
    }

    #[test]
    fn pointwise_conv_grad() {
        let x0 = rand_tensor(&[4, 3, 5], 4);
        let w0 = rand_tensor(&[2, 4, 1, 1], 5);
        check_input_grad(
            &[x0, w0],
            |g, xs| {
                let y = g.conv2d(xs[0], xs[1], None, 1, 0, 1);
                let y2 = g.mul(y, y);
                g.sum(y2)
            },
            1e-5,
        );
    }

    #[test]
    fn norm_softmax_matmul_grads() {
        let x0 = rand_tensor(&[3, 4, 5], 6);
        let gm = rand_tensor(&[3], 7);
        let bt = rand_tensor(&[3], 8);
        check_input_grad(
            &[x0, gm, bt],
            |g, xs| {
                let y = g.norm(xs[0], xs[1], xs[2]);
                let r = g.reshape(y, &[3, 20]);
                let s = g.softmax(r, Axis::Cols);
                let t = g.softmax(r, Axis::Rows);
                let m = g.matmul(s, t, false, true);
                let m2 = g.mul(m, m);
                g.sum(m2)
            },
            1e-5,
        );
    }

    #[test]
    fn matmul_transposed_grads() {
        let a = rand_tensor(&[4, 3], 9);
        let b = rand_tensor(&[5, 4], 10);
        check_input_grad(
            &[a, b],
            |g, xs| {
                let m = g.matmul(xs[0], xs[1], true, true);
                let t = g.transpose(m);
                let sq = g.mul(t, t);
                g.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn depthwise_upsample_mulmap_grads() {
        let x = rand_tensor(&[2, 5, 4], 11);
        let m = rand_tensor(&[1, 10, 8], 12);
        let k = rand_tensor::<f64>(&[2, 3, 3], 13);
        check_input_grad(
            &[x, m],
            |g, xs| {
                let y = g.depthwise_fixed(xs[0], &k);
                let u = g.upsample2(y);
                let c = g.concat(&[u, u]);
                let mm = g.mul_map(c, xs[1]);
                let sq = g.mul(mm, mm);
                g.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn avg_pool_values_and_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 5], |i| i as f64));
        let p = g.avg_pool2(x);
        assert_eq!(g.value(p).data(), &[3.0, 5.0]);
        check_input_grad(
            &[rand_tensor(&[2, 5, 7], 15)],
            |g, xs| {
                let p = g.avg_pool2(xs[0]);
                let sq = g.mul(p, p);
                g.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn l2norm_gridmax_crossentropy_grads() {
        let x = rand_tensor(&[3, 6], 14);
        check_input_grad(
            &[x],
            |g, xs| {
                let e = g.l2_normalize_cols(xs[0]);
                let s = g.matmul(e, e, true, false);
                let mx = g.grid_max(s, 2, 3, GridMax::OverRows);
                let my = g.grid_max(s, 2, 3, GridMax::OverCols);
                let a = g.cross_entropy(mx, &[(0, 1), (4, 2)]);
                let b = g.cross_entropy(my, &[(3, 0)]);
                g.add(a, b)
            },
            1e-5,
        );
    }

    #[test]
    fn warp_grads_at_fractional_positions() {
        let src = rand_tensor(&[2, 4, 6], 15);
        let off = Tensor::from_fn(&[2, 4, 6], |i| 3.3 * ((i as f64 * 0.71).sin()) + 0.37);
        check_input_grad(
            &[src, off],
            |g, xs| {
                let y = g.warp(xs[0], xs[1], 8.0);
                let sq = g.mul(y, y);
                g.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn focal_and_l1_grads() {
        let x = rand_tensor(&[2, 4, 4], 16);
        let target = Tensor::from_fn(&[2, 4, 4], |i| if i == 5 { 1.0 } else { (i as f64 * 0.05) % 0.9 });
        let p = rand_tensor(&[2, 4, 4], 17);
        let tg = vec![L1Target { y: 1, x: 1, value: [0.7, -0.2] }, L1Target { y: 2, x: 3, value: [3.0, 1.0] }];
        check_input_grad(
            &[x, p],
            |g, xs| {
                let f = g.focal_loss(xs[0], &target);
                let l = g.masked_l1(xs[1], &tg);
                g.add(f, l)
            },
            1e-5,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(3.0));
        let c = g.mul(a, b);
        let gr = g.backward(c);
        assert_eq!(gr.wrt(&g, b).data(), &[2.0]);
        assert_eq!(gr.wrt(&g, a).data(), &[0.0]);
    }
}
