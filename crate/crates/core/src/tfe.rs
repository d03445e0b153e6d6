//! Texture-enhanced feature extraction.
//!
//! A dilated stem feeds three SIE blocks (learnable convolution wrapped
//! around a fixed SRM residual filter bank), whose output is concatenated
//! with the downsampled raw frame and passed through a small encoder-decoder.
//! The result is a stride-4 appearance feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvNormRelu, ConvSpec};
use crate::nn::{Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which fixed residual kernels the SRM layer applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SrmMode {
    /// Weak-edge, strong-edge and sharpening residuals.
    #[default]
    Residual,
    /// Horizontal edge, vertical edge and sharpening.
    Classic,
}

impl std::str::FromStr for SrmMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "residual" => Ok(SrmMode::Residual),
            "classic" => Ok(SrmMode::Classic),
            other => Err(format!("unknown srm mode {other:?} (expected residual|classic)")),
        }
    }
}

impl std::fmt::Display for SrmMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SrmMode::Residual => "residual",
            SrmMode::Classic => "classic",
        })
    }
}

#[rustfmt::skip]
const RESIDUAL_KERNELS: [[i8; 25]; 3] = [
    [ 0,  0,  0,  0,  0,
      0, -1,  2, -1,  0,
      0,  2, -4,  2,  0,
      0, -1,  2, -1,  0,
      0,  0,  0,  0,  0],
    [-1,  2, -2,  2, -1,
      2, -6,  8, -6,  2,
     -2,  8,-12,  8, -2,
      2, -6,  8, -6,  2,
     -1,  2, -2,  2, -1],
    [-1, -1, -1, -1, -1,
     -1,  0,  0,  0, -1,
     -1,  0,  8,  0, -1,
     -1,  0,  0,  0, -1,
     -1, -1, -1, -1, -1],
];

#[rustfmt::skip]
const CLASSIC_KERNELS: [[i8; 25]; 3] = [
    [-1, -2, -4, -2, -1,
      0,  0,  0,  0,  0,
      0,  0,  0,  0,  0,
      0,  0,  0,  0,  0,
      1,  2,  4,  2,  1],
    [-1,  0,  0,  0,  1,
     -2,  0,  0,  0,  2,
     -4,  0,  0,  0,  4,
     -2,  0,  0,  0,  2,
     -1,  0,  0,  0,  1],
    [ 0,  0, -1,  0,  0,
      0,  0, -1,  0,  0,
     -1, -1,  9, -1, -1,
      0,  0, -1,  0,  0,
      0,  0, -1,  0,  0],
];

/// Three fixed 5x5 residual kernels. Never part of the parameter store, so no
/// optimizer step can touch them.
#[derive(Clone, Debug, PartialEq)]
pub struct SrmKernelBank<T: Scalar> {
    kernels: Tensor<T>,
    mode: SrmMode,
}

impl<T: Scalar> SrmKernelBank<T> {
    pub fn new(mode: SrmMode) -> Self {
        let src = match mode {
            SrmMode::Residual => &RESIDUAL_KERNELS,
            SrmMode::Classic => &CLASSIC_KERNELS,
        };
        let data = src.iter().flat_map(|k| k.iter().map(|&v| T::of(v as f64))).collect();
        Self { kernels: Tensor::from_vec(&[3, 5, 5], data), mode }
    }

    pub fn mode(&self) -> SrmMode {
        self.mode
    }

    /// All kernels as `[3, 5, 5]`.
    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }

    /// Row-major 5x5 entries of kernel `i`.
    pub fn kernel(&self, i: usize) -> &[T] {
        &self.kernels.data()[i * 25..(i + 1) * 25]
    }
}

/// Filters every channel with every kernel (replicate border); `C` channels
/// in, `3C` out, kernel-major.
pub fn srm_filter<T: Scalar>(g: &mut Graph<T>, x: Var, bank: &SrmKernelBank<T>) -> Var {
    g.depthwise_fixed(x, bank.kernels())
}

/// [`srm_filter`] on a plain `[C, H, W]` tensor.
pub fn srm_filter_tensor<T: Scalar>(x: &Tensor<T>, bank: &SrmKernelBank<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = srm_filter(&mut g, v, bank);
    g.value(y).clone()
}

/// Semantic information extraction block: 3x3 conv + norm + rectifier, SRM
/// residuals, 1x1 compression back to the input width, residual add.
#[derive(Clone, Debug)]
pub struct SieBlock {
    pub conv: ConvNormRelu,
    pub compress: Conv2d,
    pub channels: usize,
}

impl SieBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize) -> Self {
        let conv = ConvNormRelu::new(store, rng, &format!("{name}.conv"), ConvSpec::new(c, c, 3));
        // Raw SRM responses are large (kernel 2 has an L1 norm of 100), so
        // the compression starts small.
        let mut w = crate::nn::params::he_uniform::<T, R>(rng, &[c, 3 * c, 1, 1]);
        for v in w.data_mut() {
            *v *= T::of(0.05);
        }
        let compress = Conv2d::with_weight(store, &format!("{name}.compress"), ConvSpec::new(3 * c, c, 1), w);
        Self { conv, compress, channels: c }
    }

    /// Every learnable weight and bias zero.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let conv = ConvNormRelu {
            conv: Conv2d::zeros(store, &format!("{name}.conv.conv"), ConvSpec::new(c, c, 3).no_bias()),
            norm: crate::nn::layers::ChannelNorm::new(store, &format!("{name}.conv.norm"), c),
        };
        let compress = Conv2d::zeros(store, &format!("{name}.compress"), ConvSpec::new(3 * c, c, 1));
        Self { conv, compress, channels: c }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bank: &SrmKernelBank<T>, x: Var) -> Var {
        assert_eq!(g.shape(x)[0], self.channels, "SIE block channel mismatch");
        let h = self.conv.forward(g, store, x);
        let r = srm_filter(g, h, bank);
        let c = self.compress.forward(g, store, r);
        g.add(x, c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TfeConfig {
    /// Encoder widths: SIE/stem width, then strides 4, 8 and 16.
    pub widths: [usize; 4],
    pub feat_channels: usize,
    pub srm_mode: SrmMode,
}

impl Default for TfeConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64, 64], feat_channels: 64, srm_mode: SrmMode::Residual }
    }
}

/// Stride-4 appearance feature of one frame.
#[derive(Clone, Debug)]
pub struct FeatureMap<T: Scalar> {
    /// `[C, h/4, w/4]`
    pub data: Tensor<T>,
    pub stride: usize,
    pub source_frame: usize,
}

#[derive(Clone, Debug)]
pub struct Tfe<T: Scalar> {
    pub config: TfeConfig,
    pub bank: SrmKernelBank<T>,
    stem1: ConvNormRelu,
    stem2: ConvNormRelu,
    sie: Vec<SieBlock>,
    enc1: ConvNormRelu,
    enc2: ConvNormRelu,
    enc3: ConvNormRelu,
    dec3: ConvNormRelu,
    dec2: ConvNormRelu,
}

pub const MIN_FRAME_SIDE: usize = 32;

/// Frame size after padding each side up to a multiple of 8.
pub fn padded_size(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(8) * 8, w.div_ceil(8) * 8)
}

/// Normalizes `[3, H, W]` pixels in `[0, 1]` and pads bottom/right by edge
/// replication to a multiple of 8.
pub fn prepare_frame<T: Scalar>(frame: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = frame.chw();
    if c != 3 {
        return Err(Error::Shape(format!("frame must have 3 channels, got {c}")));
    }
    if h < MIN_FRAME_SIDE || w < MIN_FRAME_SIDE {
        return Err(Error::Shape(format!("frame {h}x{w} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}")));
    }
    let (ph, pw) = padded_size(h, w);
    let (mean, inv) = (T::of(0.5), T::of(4.0));
    Ok(Tensor::from_fn(&[3, ph, pw], |i| {
        let ch = i / (ph * pw);
        let y = ((i / pw) % ph).min(h - 1);
        let x = (i % pw).min(w - 1);
        (frame.at3(ch, y, x) - mean) * inv
    }))
}

impl<T: Scalar> Tfe<T> {
    pub fn new<R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: TfeConfig) -> Self {
        let [w0, w1, w2, w3] = config.widths;
        let fc = config.feat_channels;
        let stem1 = ConvNormRelu::new(store, rng, "tfe.stem1", ConvSpec::new(3, w0, 3).stride(2).dilation(2));
        let stem2 = ConvNormRelu::new(store, rng, "tfe.stem2", ConvSpec::new(w0, w0, 3).dilation(2));
        let sie = (0..3).map(|i| SieBlock::new(store, rng, &format!("tfe.sie{i}"), w0)).collect();
        let enc1 = ConvNormRelu::new(store, rng, "tfe.enc1", ConvSpec::new(w0 + 3, w1, 3).stride(2));
        let enc2 = ConvNormRelu::new(store, rng, "tfe.enc2", ConvSpec::new(w1, w2, 3).stride(2));
        let enc3 = ConvNormRelu::new(store, rng, "tfe.enc3", ConvSpec::new(w2, w3, 3).stride(2));
        let dec3 = ConvNormRelu::new(store, rng, "tfe.dec3", ConvSpec::new(w3 + w2, fc, 3));
        let dec2 = ConvNormRelu::new(store, rng, "tfe.dec2", ConvSpec::new(fc + w1, fc, 3));
        Self { bank: SrmKernelBank::new(config.srm_mode), config, stem1, stem2, sie, enc1, enc2, enc3, dec3, dec2 }
    }

    pub fn sie_blocks(&self) -> &[SieBlock] {
        &self.sie
    }

    /// Graph-level feature extraction on a prepared (normalized, padded) frame.
    pub fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, prepared: Var) -> Var {
        let raw_half = g.avg_pool2(prepared);
        let mut x = self.stem1.forward(g, store, prepared);
        x = self.stem2.forward(g, store, x);
        for block in &self.sie {
            x = block.forward(g, store, &self.bank, x);
        }
        let x = g.concat(&[x, raw_half]);
        let e1 = self.enc1.forward(g, store, x);
        let e2 = self.enc2.forward(g, store, e1);
        let e3 = self.enc3.forward(g, store, e2);
        let (_, h8, w8) = g.value(e2).chw();
        let u3 = g.upsample2_to(e3, h8, w8);
        let d3 = g.concat(&[u3, e2]);
        let d3 = self.dec3.forward(g, store, d3);
        let (_, h4, w4) = g.value(e1).chw();
        let u2 = g.upsample2_to(d3, h4, w4);
        let d2 = g.concat(&[u2, e1]);
        self.dec2.forward(g, store, d2)
    }

    /// Appearance feature of a `[3, H, W]` frame with pixels in `[0, 1]`.
    pub fn extract_features(&self, store: &ParamStore<T>, frame: &Tensor<T>, index: usize) -> Result<FeatureMap<T>> {
        let prepared = prepare_frame(frame)?;
        let mut g = Graph::new();
        let x = g.constant(prepared);
        let f = self.forward(&mut g, store, x);
        Ok(FeatureMap { data: g.value(f).clone(), stride: 4, source_frame: index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{param_grad_report, rand_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn interior<T: Scalar>(t: &Tensor<T>, margin: usize) -> Vec<T> {
        let (c, h, w) = t.chw();
        let mut v = Vec::new();
        for ch in 0..c {
            for y in margin..h - margin {
                for x in margin..w - margin {
                    v.push(t.at3(ch, y, x));
                }
            }
        }
        v
    }

    #[test]
    fn kernel_sums() {
        let bank = SrmKernelBank::<f64>::new(SrmMode::Residual);
        let sums: Vec<f64> = (0..3).map(|i| bank.kernel(i).iter().sum()).collect();
        assert_eq!(sums, vec![0.0, 0.0, -8.0]);
        assert_eq!(bank.kernel(1)[12], -12.0);
        let classic = SrmKernelBank::<f64>::new(SrmMode::Classic);
        assert_eq!(classic.kernel(2)[12], 9.0);
        assert_eq!(classic.kernel(0)[2], -4.0);
    }

    #[test]
    fn constant_image_responses() {
        let bank = SrmKernelBank::<f64>::new(SrmMode::Residual);
        for c in [1.0, 0.5, 3.0, -2.25] {
            let img = Tensor::full(&[1, 12, 12], c);
            let out = srm_filter_tensor(&img, &bank);
            assert_eq!(out.shape(), &[3, 12, 12]);
            assert!(interior(&out.channels(0, 1), 2).iter().all(|&v| v == 0.0));
            assert!(interior(&out.channels(1, 2), 2).iter().all(|&v| v == 0.0));
            assert!(interior(&out.channels(2, 3), 2).iter().all(|&v| v == -8.0 * c));
        }
        // Non-dyadic constants cancel up to rounding.
        let out = srm_filter_tensor(&Tensor::full(&[1, 12, 12], 0.7), &bank);
        assert!(interior(&out.channels(1, 2), 2).iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_center_response() {
        let bank = SrmKernelBank::<f64>::new(SrmMode::Residual);
        let mut img = Tensor::zeros(&[1, 9, 9]);
        *img.at3_mut(0, 4, 4) = 1.0;
        let out = srm_filter_tensor(&img, &bank);
        assert_eq!(out.at3(1, 4, 4), -12.0);
        // Correlation of a symmetric kernel reproduces the kernel around the impulse.
        for dy in 0..5 {
            for dx in 0..5 {
                assert_eq!(out.at3(1, 2 + dy, 2 + dx), bank.kernel(1)[(4 - dy) * 5 + (4 - dx)]);
            }
        }
    }

    #[test]
    fn rgb_triples_channel_count() {
        let bank = SrmKernelBank::<f32>::new(SrmMode::Classic);
        let img = rand_tensor::<f32>(&[3, 10, 11], 3);
        assert_eq!(srm_filter_tensor(&img, &bank).shape(), &[9, 10, 11]);
    }

    #[test]
    fn zero_block_maps_zero_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let block = SieBlock::zeros(&mut store, "b", 16);
        let bank = SrmKernelBank::new(SrmMode::Residual);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[16, 32, 48]));
        let y = block.forward(&mut g, &store, &bank, x);
        assert_eq!(g.shape(y), &[16, 32, 48]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_equals_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let block = SieBlock::new(&mut store, &mut rng, "b", 4);
        let bank = SrmKernelBank::new(SrmMode::Residual);
        let input = rand_tensor::<f64>(&[4, 9, 7], 2);

        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = block.forward(&mut g, &store, &bank, x);

        // Reference: explicit loops for conv/norm/relu, SRM, 1x1 and residual.
        let w = store.get(block.conv.conv.weight);
        let (c, h, wd) = input.chw();
        let mut conv = Tensor::<f64>::zeros(&[c, h, wd]);
        for co in 0..c {
            for y0 in 0..h {
                for x0 in 0..wd {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (yy, xx) = (y0 as isize + ky as isize - 1, x0 as isize + kx as isize - 1);
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                    acc += w.data()[((co * c + ci) * 3 + ky) * 3 + kx] * input.at3(ci, yy as usize, xx as usize);
                                }
                            }
                        }
                    }
                    *conv.at3_mut(co, y0, x0) = acc;
                }
            }
        }
        let gamma = store.get(block.conv.norm.gamma);
        let beta = store.get(block.conv.norm.beta);
        let mut act = conv.clone();
        for ch in 0..c {
            let plane = conv.channels(ch, ch + 1);
            let n = (h * wd) as f64;
            let mean = plane.sum() / n;
            let var = plane.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            for y0 in 0..h {
                for x0 in 0..wd {
                    let v = gamma.data()[ch] * (conv.at3(ch, y0, x0) - mean) / (var + 1e-5).sqrt() + beta.data()[ch];
                    *act.at3_mut(ch, y0, x0) = v.max(0.0);
                }
            }
        }
        let res = srm_filter_tensor(&act, &bank);
        let cw = store.get(block.compress.weight);
        let cb = store.get(block.compress.bias.unwrap());
        let want = Tensor::from_fn(&[c, h, wd], |i| {
            let co = i / (h * wd);
            let p = i % (h * wd);
            let mut acc = cb.data()[co];
            for ci in 0..3 * c {
                acc += cw.data()[co * 3 * c + ci] * res.data()[ci * h * wd + p];
            }
            input.data()[i] + acc
        });
        assert!(g.value(y).max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn feature_map_shape_and_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let tfe = Tfe::new(&mut store, &mut rng, TfeConfig::default());
        let frame = rand_tensor::<f32>(&[3, 128, 192], 9).map(|v| (v + 1.0) * 0.5);
        let a = tfe.extract_features(&store, &frame, 0).unwrap();
        assert_eq!(a.data.shape(), &[64, 32, 48]);
        assert!(a.data.all_finite());
        let b = tfe.extract_features(&store, &frame, 0).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn odd_sizes_are_padded_to_multiple_of_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let tfe = Tfe::new(&mut store, &mut rng, TfeConfig::default());
        let frame = Tensor::full(&[3, 37, 41], 0.3f32);
        let f = tfe.extract_features(&store, &frame, 0).unwrap();
        assert_eq!(f.data.shape(), &[64, 10, 12]);
    }

    #[test]
    fn tiny_frames_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let tfe = Tfe::new(&mut store, &mut rng, TfeConfig::default());
        let err = tfe.extract_features(&store, &Tensor::zeros(&[3, 31, 64]), 0).unwrap_err();
        assert!(err.to_string().contains("smaller than 32x32"));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let tfe = Tfe::new(&mut store, &mut rng, TfeConfig::default());
        let frame = rand_tensor::<f64>(&[3, 32, 32], 12).map(|v| (v + 1.0) * 0.5);
        let prepared = prepare_frame(&frame).unwrap();
        let readout = rand_tensor::<f64>(&[64, 8, 8], 13);
        let report = param_grad_report(
            &store,
            |g, s| {
                let x = g.constant(prepared.clone());
                let f = tfe.forward(g, s, x);
                let r = g.constant(readout.clone());
                let p = g.mul(f, r);
                g.sum(p)
            },
            4,
            1e-3,
            7,
        );
        eprintln!("{report:?}");
        assert!(report.passed(), "{report:?}");
        assert!(report.checked >= 4 * store.len() / 2, "{report:?}");
    }
}
