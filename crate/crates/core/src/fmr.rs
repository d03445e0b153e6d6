//! Flow-agnostic movement refinement.
//!
//! A running statistic `lambda` of past offsets separates camera-like common
//! motion from each object's own movement, `Omega = 2 O - lambda`. Previous
//! refined features are gated by the previous center heatmap, carried to the
//! current frame along `Omega` and fused with the current features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::ata::OffsetField;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvSpec};
use crate::nn::{Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MemoryMode {
    #[default]
    Mean,
    Sum,
}

impl FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            _ => Err(Error::config("memory_mode", format!("expected mean or sum, got {s:?}"))),
        }
    }
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

/// Per-cell running statistic of absorbed offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetMemory<T: Scalar> {
    pub mean_ox: Tensor<T>,
    pub mean_oy: Tensor<T>,
    pub count: usize,
    pub mode: MemoryMode,
}

impl<T: Scalar> OffsetMemory<T> {
    pub fn new(h: usize, w: usize, mode: MemoryMode) -> Self {
        Self { mean_ox: Tensor::zeros(&[h, w]), mean_oy: Tensor::zeros(&[h, w]), count: 0, mode }
    }

    pub fn update(&mut self, o: &OffsetField<T>) -> Result<()> {
        if o.ox.shape() != self.mean_ox.shape() || o.oy.shape() != self.mean_oy.shape() {
            return Err(Error::Shape(format!("offset field {:?} does not match memory {:?}", o.ox.shape(), self.mean_ox.shape())));
        }
        let n = T::of(self.count as f64);
        let upd = |m: &Tensor<T>, x: &Tensor<T>| match self.mode {
            MemoryMode::Mean => m.zip_map(x, |m, x| m + (x - m) / (n + T::one())),
            MemoryMode::Sum => m.zip_map(x, |m, x| m + x),
        };
        let (ox, oy) = (upd(&self.mean_ox, &o.ox), upd(&self.mean_oy, &o.oy));
        self.mean_ox = ox;
        self.mean_oy = oy;
        self.count += 1;
        Ok(())
    }

    /// Current `lambda`.
    pub fn value(&self) -> OffsetField<T> {
        OffsetField { ox: self.mean_ox.clone(), oy: self.mean_oy.clone() }
    }

    pub fn reset(&mut self) {
        let (h, w) = (self.mean_ox.shape()[0], self.mean_ox.shape()[1]);
        *self = Self::new(h, w, self.mode);
    }
}

/// `Omega = 2 O - lambda`, elementwise and unclamped.
pub fn flow_agnostic_offset<T: Scalar>(o: &OffsetField<T>, lambda: &OffsetField<T>) -> Result<OffsetField<T>> {
    if o.ox.shape() != lambda.ox.shape() {
        return Err(Error::Shape(format!("offset {:?} vs memory {:?}", o.ox.shape(), lambda.ox.shape())));
    }
    let two = T::of(2.0);
    Ok(OffsetField { ox: o.ox.zip_map(&lambda.ox, |a, b| two * a - b), oy: o.oy.zip_map(&lambda.oy, |a, b| two * a - b) })
}

/// Graph form of [`flow_agnostic_offset`] on `[2, h, w]` fields.
pub fn flow_agnostic_offset_var<T: Scalar>(g: &mut Graph<T>, o: Var, lambda: Var) -> Var {
    let o2 = g.scale(o, T::of(2.0));
    g.sub(o2, lambda)
}

/// `H = omega_prev * P_prev` per channel. `p_prev` is `[h, w]` in `[0, 1]`.
pub fn gate_previous_features<T: Scalar>(omega_prev: &Tensor<T>, p_prev: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = omega_prev.chw();
    if p_prev.shape() != [h, w] {
        return Err(Error::Shape(format!("gate {:?} does not match features {:?}", p_prev.shape(), omega_prev.shape())));
    }
    if p_prev.data().iter().any(|&p| !(T::zero()..=T::one()).contains(&p)) {
        return Err(Error::Data("gating heatmap must lie in [0, 1]".into()));
    }
    let hw = h * w;
    Ok(Tensor::from_fn(&[c, h, w], |i| omega_prev.data()[i] * p_prev.data()[i % hw]))
}

/// 2x2 max-pool of a stride-4 center heatmap down to the stride-8 grid.
pub fn pool_center_heatmap<T: Scalar>(p: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (p.shape()[0], p.shape()[1]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Tensor::from_fn(&[oh, ow], |n| {
        let (i, j) = (n / ow, n % ow);
        let mut m = T::neg_infinity();
        for y in 2 * i..(2 * i + 2).min(h) {
            for x in 2 * j..(2 * j + 2).min(w) {
                m = m.max(p.data()[y * w + x]);
            }
        }
        m
    })
}

/// Offset-guided bilinear warp followed by a learnable 3x3 convolution.
#[derive(Clone, Debug)]
pub struct Propagator {
    conv: Conv2d,
    pub stride: usize,
}

impl Propagator {
    /// With `identity` the convolution starts as a pass-through.
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, c: usize, identity: bool) -> Self {
        let spec = ConvSpec::new(c, c, 3);
        let conv = if identity {
            let w = Tensor::from_fn(&[c, c, 3, 3], |i| if i % 9 == 4 && i / 9 % (c + 1) == 0 { T::one() } else { T::zero() });
            Conv2d::with_weight(store, "fmr.prop", spec, w)
        } else {
            Conv2d::new(store, rng, "fmr.prop", spec)
        };
        Self { conv, stride: 8 }
    }

    /// `h_prev` is `[C, h, w]`, `omega` is `[2, h, w]` holding `(ox, oy)` pixels.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h_prev: Var, omega: Var) -> Var {
        let warped = g.warp(h_prev, omega, T::of(self.stride as f64));
        self.conv.forward(g, store, warped)
    }

    pub fn propagate<T: Scalar>(&self, store: &ParamStore<T>, h_prev: &Tensor<T>, omega: &OffsetField<T>) -> Result<Tensor<T>> {
        let (_, h, w) = h_prev.chw();
        if omega.hw() != (h, w) {
            return Err(Error::Shape(format!("offset grid {:?} vs features {:?}", omega.hw(), h_prev.shape())));
        }
        let mut g = Graph::new();
        let (hv, ov) = (g.constant(h_prev.clone()), g.constant(omega.to_tensor()));
        let out = self.forward(&mut g, store, hv, ov);
        Ok(g.value(out).clone())
    }
}

/// Concatenation with the current features and a 1x1 convolution back to
/// the feature width, initialized to pass the current features through.
#[derive(Clone, Debug)]
pub struct Fuser {
    conv: Conv2d,
    pub feat_channels: usize,
}

impl Fuser {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, feat_channels: usize, prop_channels: usize) -> Self {
        let cin = feat_channels + prop_channels;
        let w = Tensor::from_fn(&[feat_channels, cin, 1, 1], |i| if i % cin == i / cin { T::one() } else { T::zero() });
        Self { conv: Conv2d::with_weight(store, "fmr.fuse", ConvSpec::new(cin, feat_channels, 1), w), feat_channels }
    }

    /// `f` is stride 4, `propagated` stride 8; the latter is upsampled first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var, propagated: Var) -> Var {
        let (_, h, w) = g.value(f).chw();
        let up = g.upsample2_to(propagated, h, w);
        let cat = g.concat(&[f, up]);
        self.conv.forward(g, store, cat)
    }

    pub fn fuse<T: Scalar>(&self, store: &ParamStore<T>, f: &Tensor<T>, propagated: &Tensor<T>) -> Result<Tensor<T>> {
        let ((_, h, w), (_, ph, pw)) = (f.chw(), propagated.chw());
        if ph != h.div_ceil(2) || pw != w.div_ceil(2) {
            return Err(Error::Shape(format!("propagated {:?} does not pair with features {:?}", propagated.shape(), f.shape())));
        }
        let mut g = Graph::new();
        let (fv, pv) = (g.constant(f.clone()), g.constant(propagated.clone()));
        let out = self.forward(&mut g, store, fv, pv);
        Ok(g.value(out).clone())
    }
}
