//! Attention-enhanced temporal association.
//!
//! Consecutive stride-4 features are refined and cross-attended at stride 8
//! ([`Tsca`]), embedded and compared into a 4-D cosine similarity volume
//! ([`SimilarityHead`]), and the volume is decoded into per-cell backward
//! displacements by soft-argmax over pooled similarities
//! ([`offsets_from_similarity`]).

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{ChannelNorm, Conv2d, ConvNormRelu, ConvSpec};
use crate::nn::{Axis, Graph, GridMax, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Efficient cross-attention `softmax_row(Q) (softmax_col(K)^T V)`.
///
/// `q`, `k` are `[n, d]`, `v` is `[n, dv]`; the `d x dv` context is formed
/// first so no `n x n` matrix is ever built.
pub fn cross_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Var {
    let pq = g.softmax(q, Axis::Rows);
    let pk = g.softmax(k, Axis::Cols);
    let ctx = g.matmul(pk, v, true, false);
    g.matmul(pq, ctx, false, false)
}

/// Query normalization: each row sums to one.
pub fn normalize_query<T: Scalar>(q: &Tensor<T>) -> Tensor<T> {
    crate::nn::graph::softmax2d(q, Axis::Rows)
}

/// Key normalization: each column sums to one.
pub fn normalize_key<T: Scalar>(k: &Tensor<T>) -> Tensor<T> {
    crate::nn::graph::softmax2d(k, Axis::Cols)
}

/// [`cross_attention`] on plain matrices.
pub fn cross_attention_values<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
        return Err(Error::Shape("cross-attention operands must be 2-D".into()));
    }
    if sq != sk || sv[0] != sq[0] || sq[0] == 0 || sq[1] == 0 {
        return Err(Error::Shape(format!("cross-attention shapes Q{sq:?} K{sk:?} V{sv:?}")));
    }
    if !(q.all_finite() && k.all_finite() && v.all_finite()) {
        return Err(Error::Numeric("cross-attention input contains non-finite values".into()));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = cross_attention(&mut g, qv, kv, vv);
    Ok(g.value(out).clone())
}

/// Stride-8 feature refined for association.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedFeatureMap<T: Scalar> {
    /// `[C, h/8, w/8]`
    pub data: Tensor<T>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtaConfig {
    pub in_channels: usize,
    /// Width of the stride-8 refined features.
    pub channels: usize,
    /// Query/key width of the cross-attention.
    pub attn_dim: usize,
    /// Width of the similarity embedding.
    pub embed_dim: usize,
}

impl Default for AtaConfig {
    fn default() -> Self {
        Self { in_channels: 64, channels: 32, attn_dim: 16, embed_dim: 32 }
    }
}

/// 1x1 convolution + normalization.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: ChannelNorm,
}

impl ConvBlock {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        Self { conv: Conv2d::new(store, rng, &format!("{name}.conv"), ConvSpec::new(cin, cout, 1).no_bias()), norm: ChannelNorm::new(store, &format!("{name}.norm"), cout) }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        self.norm.forward(g, store, y)
    }
}

/// Two-stage cross-attention.
///
/// Stage one refines each frame on its own: the previous frame through a
/// channel projection and conv block with a residual, the current frame
/// through linear self-attention between a 3x3 conv branch and a projection
/// branch. Stage two cross-attends (queries from the previous frame, keys and
/// values from the current one) and adds the result back onto the current
/// frame.
#[derive(Clone, Debug)]
pub struct Tsca {
    pub config: AtaConfig,
    down: ConvNormRelu,
    prev_cp: Conv2d,
    prev_cb: ConvBlock,
    cur_conv: Conv2d,
    cur_cp: Conv2d,
    cur_cb: ConvBlock,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    out_cb: ConvBlock,
}

fn as_rows<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let (c, h, w) = g.value(x).chw();
    let m = g.reshape(x, &[c, h * w]);
    g.transpose(m)
}

fn from_rows<T: Scalar>(g: &mut Graph<T>, rows: Var, h: usize, w: usize) -> Var {
    let c = g.shape(rows)[1];
    let t = g.transpose(rows);
    g.reshape(t, &[c, h, w])
}

impl Tsca {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: AtaConfig) -> Self {
        let (ci, c, d) = (config.in_channels, config.channels, config.attn_dim);
        Self {
            down: ConvNormRelu::new(store, rng, "ata.down", ConvSpec::new(ci, c, 3).stride(2)),
            prev_cp: Conv2d::new(store, rng, "ata.prev_cp", ConvSpec::new(c, c, 1)),
            prev_cb: ConvBlock::new(store, rng, "ata.prev_cb", c, c),
            cur_conv: Conv2d::new(store, rng, "ata.cur_conv", ConvSpec::new(c, d, 3)),
            cur_cp: Conv2d::new(store, rng, "ata.cur_cp", ConvSpec::new(c, d, 1)),
            cur_cb: ConvBlock::new(store, rng, "ata.cur_cb", c, c),
            q: Conv2d::new(store, rng, "ata.q", ConvSpec::new(c, d, 1)),
            k: Conv2d::new(store, rng, "ata.k", ConvSpec::new(c, d, 1)),
            v: Conv2d::new(store, rng, "ata.v", ConvSpec::new(c, c, 1)),
            out_cb: ConvBlock::new(store, rng, "ata.out_cb", c, c),
            config,
        }
    }

    fn refine_prev<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Var {
        let x = self.down.forward(g, store, f);
        let p = self.prev_cp.forward(g, store, x);
        let p = g.relu(p);
        let p = self.prev_cb.forward(g, store, p);
        g.add(x, p)
    }

    fn refine_cur<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Var {
        let x = self.down.forward(g, store, f);
        let (_, h, w) = g.value(x).chw();
        let a = self.cur_conv.forward(g, store, x);
        let b = self.cur_cp.forward(g, store, x);
        let (qa, kb, vx) = (as_rows(g, a), as_rows(g, b), as_rows(g, x));
        let att = cross_attention(g, qa, kb, vx);
        let att = from_rows(g, att, h, w);
        let att = self.cur_cb.forward(g, store, att);
        g.add(x, att)
    }

    /// Association feature of the current frame given the previous one.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_prev: Var, f_cur: Var) -> Result<Var> {
        if g.shape(f_prev) != g.shape(f_cur) {
            return Err(Error::Shape(format!("tsca inputs differ: {:?} vs {:?}", g.shape(f_prev), g.shape(f_cur))));
        }
        let rp = self.refine_prev(g, store, f_prev);
        let rc = self.refine_cur(g, store, f_cur);
        let (_, h, w) = g.value(rc).chw();
        let q = self.q.forward(g, store, rp);
        let k = self.k.forward(g, store, rc);
        let v = self.v.forward(g, store, rc);
        let (q, k, v) = (as_rows(g, q), as_rows(g, k), as_rows(g, v));
        let ca = cross_attention(g, q, k, v);
        let ca = from_rows(g, ca, h, w);
        let ca = self.out_cb.forward(g, store, ca);
        Ok(g.add(rc, ca))
    }

    /// Refined features `(omega_prev, omega_cur)` for a frame pair.
    ///
    /// `omega_prev` is `cached_prev` when the caller kept the previous step's
    /// output; otherwise it is bootstrapped by pairing the previous frame with
    /// itself.
    pub fn tsca<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        f_prev: &Tensor<T>,
        f_cur: &Tensor<T>,
        cached_prev: Option<&RefinedFeatureMap<T>>,
    ) -> Result<(RefinedFeatureMap<T>, RefinedFeatureMap<T>)> {
        let mut g = Graph::new();
        let (p, c) = (g.constant(f_prev.clone()), g.constant(f_cur.clone()));
        let cur = self.forward(&mut g, store, p, c)?;
        let cur = RefinedFeatureMap { data: g.value(cur).clone(), stride: 8 };
        let prev = match cached_prev {
            Some(prev) => prev.clone(),
            None => {
                let pp = self.forward(&mut g, store, p, p)?;
                RefinedFeatureMap { data: g.value(pp).clone(), stride: 8 }
            }
        };
        Ok((prev, cur))
    }
}

/// Cosine similarities between every current and every previous stride-8 cell.
///
/// Stored as `[h'*w', h'*w']`: row `i*w'+j` is the current cell `(i, j)`,
/// column `k*w'+l` the previous cell `(k, l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityVolume<T: Scalar> {
    pub data: Tensor<T>,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> SimilarityVolume<T> {
    pub fn new(data: Tensor<T>, h: usize, w: usize) -> Result<Self> {
        if data.shape() != [h * w, h * w] {
            return Err(Error::Shape(format!("similarity volume {:?} does not match grid {h}x{w}", data.shape())));
        }
        Ok(Self { data, h, w })
    }

    /// `S(i, j, k, l)`
    pub fn at(&self, i: usize, j: usize, k: usize, l: usize) -> T {
        self.data.data()[(i * self.w + j) * self.h * self.w + k * self.w + l]
    }

    /// The volume as a `[h', w', h', w']` tensor.
    pub fn to_4d(&self) -> Tensor<T> {
        self.data.clone().reshaped(&[self.h, self.w, self.h, self.w])
    }
}

/// Shared embedding block followed by per-cell L2 normalization and the
/// all-pairs inner product.
#[derive(Clone, Debug)]
pub struct SimilarityHead {
    conv: Conv2d,
    proj: Conv2d,
}

impl SimilarityHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: &AtaConfig) -> Self {
        Self {
            conv: Conv2d::new(store, rng, "sim.conv", ConvSpec::new(config.channels, config.channels, 3)),
            proj: Conv2d::new(store, rng, "sim.proj", ConvSpec::new(config.channels, config.embed_dim, 1)),
        }
    }

    /// Unit-norm embedding `[E, h'*w']`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, omega: Var) -> Var {
        let (_, h, w) = g.value(omega).chw();
        let x = self.conv.forward(g, store, omega);
        let x = g.relu(x);
        let e = self.proj.forward(g, store, x);
        let e_dim = g.shape(e)[0];
        let e = g.reshape(e, &[e_dim, h * w]);
        g.l2_normalize_cols(e)
    }

    /// `[N, N]` volume, rows indexing the current frame.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, omega_cur: Var, omega_prev: Var) -> Result<Var> {
        if g.shape(omega_cur) != g.shape(omega_prev) {
            return Err(Error::Shape(format!("similarity inputs differ: {:?} vs {:?}", g.shape(omega_cur), g.shape(omega_prev))));
        }
        let ec = self.embed(g, store, omega_cur);
        let ep = self.embed(g, store, omega_prev);
        Ok(g.matmul(ec, ep, true, false))
    }

    pub fn similarity_volume<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        omega_cur: &RefinedFeatureMap<T>,
        omega_prev: &RefinedFeatureMap<T>,
    ) -> Result<SimilarityVolume<T>> {
        let (_, h, w) = omega_cur.data.chw();
        let mut g = Graph::new();
        let (c, p) = (g.constant(omega_cur.data.clone()), g.constant(omega_prev.data.clone()));
        let s = self.forward(&mut g, store, c, p)?;
        SimilarityVolume::new(g.value(s).clone(), h, w)
    }
}

/// Backward displacement (current -> previous frame) per stride-8 cell, pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T: Scalar> {
    pub ox: Tensor<T>,
    pub oy: Tensor<T>,
}

impl<T: Scalar> OffsetField<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { ox: Tensor::zeros(&[h, w]), oy: Tensor::zeros(&[h, w]) }
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.ox.shape()[0], self.ox.shape()[1])
    }

    /// Stacked `[2, h, w]` as `(ox, oy)`.
    pub fn to_tensor(&self) -> Tensor<T> {
        let (h, w) = self.hw();
        let mut d = self.ox.data().to_vec();
        d.extend_from_slice(self.oy.data());
        Tensor::from_vec(&[2, h, w], d)
    }

    pub fn from_tensor(t: &Tensor<T>) -> Self {
        let (_, h, w) = t.chw();
        Self { ox: t.channels(0, 1).reshaped(&[h, w]), oy: t.channels(1, 2).reshaped(&[h, w]) }
    }

    /// `(ox, oy)` at cell `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> (T, T) {
        let w = self.hw().1;
        (self.ox.data()[i * w + j], self.oy.data()[i * w + j])
    }
}

/// Graph outputs of the soft-argmax decoder.
#[derive(Clone, Copy, Debug)]
pub struct OffsetVars {
    /// `[2, h', w']` offsets in pixels.
    pub offsets: Var,
    /// `[N, w']` temperature-scaled pooled similarities (horizontal).
    pub logits_x: Var,
    /// `[N, h']` (vertical).
    pub logits_y: Var,
}

/// Soft-argmax decoding of a `[N, N]` similarity volume on an `h x w` grid.
///
/// Pooled similarities are divided by `temperature` before the softmax.
pub fn decode_offsets<T: Scalar>(g: &mut Graph<T>, s: Var, h: usize, w: usize, stride: T, temperature: T) -> OffsetVars {
    let inv_t = T::one() / temperature;
    let px = g.grid_max(s, h, w, GridMax::OverRows);
    let py = g.grid_max(s, h, w, GridMax::OverCols);
    let logits_x = g.scale(px, inv_t);
    let logits_y = g.scale(py, inv_t);
    let cx = g.softmax(logits_x, Axis::Rows);
    let cy = g.softmax(logits_y, Axis::Rows);
    // Templates (l - j) * s split into an absolute ramp minus the cell's own position.
    let ramp_x = g.constant(Tensor::from_fn(&[w, 1], |l| T::of(l as f64) * stride));
    let ramp_y = g.constant(Tensor::from_fn(&[h, 1], |k| T::of(k as f64) * stride));
    let own_x = g.constant(Tensor::from_fn(&[h * w, 1], |n| T::of((n % w) as f64) * stride));
    let own_y = g.constant(Tensor::from_fn(&[h * w, 1], |n| T::of((n / w) as f64) * stride));
    let ex = g.matmul(cx, ramp_x, false, false);
    let ey = g.matmul(cy, ramp_y, false, false);
    let ox = g.sub(ex, own_x);
    let oy = g.sub(ey, own_y);
    let ox = g.reshape(ox, &[1, h, w]);
    let oy = g.reshape(oy, &[1, h, w]);
    let offsets = g.concat(&[ox, oy]);
    OffsetVars { offsets, logits_x, logits_y }
}

/// Soft-argmax offsets of a similarity volume (temperature 1 unless given).
pub fn offsets_from_similarity<T: Scalar>(s: &SimilarityVolume<T>, stride: T, temperature: T) -> Result<OffsetField<T>> {
    if stride <= T::zero() || temperature <= T::zero() {
        return Err(Error::config("stride/temperature", "must be positive"));
    }
    let mut g = Graph::new();
    let sv = g.constant(s.data.clone());
    let out = decode_offsets(&mut g, sv, s.h, s.w, stride, temperature);
    Ok(OffsetField::from_tensor(g.value(out.offsets)))
}
