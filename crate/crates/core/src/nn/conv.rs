//! Convolution kernels: im2col lowering for learnable convolutions and a
//! direct replicate-padded depthwise filter bank for fixed kernels.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let span = self.dilation * (self.k - 1) + 1;
        let ho = (self.h + 2 * self.pad).saturating_sub(span) / self.stride + 1;
        let wo = (self.w + 2 * self.pad).saturating_sub(span) / self.stride + 1;
        (ho, wo)
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize, wo: usize) -> (usize, usize) {
        let off = kx * self.dilation;
        let lo = self.pad.saturating_sub(off).div_ceil(self.stride);
        let hi = (self.w + self.pad).saturating_sub(off).div_ceil(self.stride).min(wo);
        (lo.min(hi), hi)
    }

    /// 1x1, stride 1, unpadded: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Lowers `[cin, h, w]` to a `[cin*k*k, ho*wo]` column matrix (zero padding).
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let npix = ho * wo;
    let mut cols = vec![T::zero(); g.rows() * npix];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_cols(kx, wo);
                    let row = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let ix0 = lo + kx * g.dilation - g.pad;
                        row[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            row[ox] = src[ox * g.stride + kx * g.dilation - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let npix = ho * wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    let (lo, hi) = g.valid_cols(kx, wo);
                    let row = &src[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        plane[base + ox * g.stride + kx * g.dilation - g.pad] += row[ox];
                    }
                }
            }
        }
    }
}

/// Replicate-pads a plane by `r` on every side.
fn pad_replicate<T: Scalar>(plane: &[T], h: usize, w: usize, r: usize, out: &mut [T]) {
    let pw = w + 2 * r;
    for py in 0..h + 2 * r {
        let sy = py.saturating_sub(r).min(h - 1);
        let src = &plane[sy * w..(sy + 1) * w];
        let dst = &mut out[py * pw..(py + 1) * pw];
        dst[..r].fill(src[0]);
        dst[r..r + w].copy_from_slice(src);
        dst[r + w..].fill(src[w - 1]);
    }
}

/// Nonzero taps of a `k x k` kernel as `(dy, dx, coef)`.
fn taps<T: Scalar>(kern: &[T], k: usize) -> Vec<(usize, usize, T)> {
    (0..k * k).filter(|&i| kern[i] != T::zero()).map(|i| (i / k, i % k, kern[i])).collect()
}

/// Cross-correlates every kernel with every channel using replicate padding.
///
/// `kernels` is `[m, k, k]`; output is kernel-major `[m * c, h, w]`, i.e. all
/// channels filtered by kernel 0, then all channels by kernel 1, and so on.
pub fn depthwise_bank<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, kernels: &[T], m: usize, k: usize) -> Vec<T> {
    let r = k / 2;
    let (hw, pw) = (h * w, w + 2 * r);
    let mut out = vec![T::zero(); m * c * hw];
    let mut padded = vec![T::zero(); (h + 2 * r) * pw];
    let banks: Vec<_> = (0..m).map(|ki| taps(&kernels[ki * k * k..(ki + 1) * k * k], k)).collect();
    for ch in 0..c {
        pad_replicate(&x[ch * hw..(ch + 1) * hw], h, w, r, &mut padded);
        for (ki, bank) in banks.iter().enumerate() {
            let dst = &mut out[(ki * c + ch) * hw..(ki * c + ch + 1) * hw];
            for &(dy, dx, coef) in bank {
                for y in 0..h {
                    let src = &padded[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                    for (d, &s) in dst[y * w..(y + 1) * w].iter_mut().zip(src) {
                        *d += coef * s;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`depthwise_bank`] with respect to its input.
pub fn depthwise_bank_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernels: &[T],
    m: usize,
    k: usize,
    dx: &mut [T],
) {
    let r = k / 2;
    let (hw, ph, pw) = (h * w, h + 2 * r, w + 2 * r);
    let mut padded = vec![T::zero(); ph * pw];
    let banks: Vec<_> = (0..m).map(|ki| taps(&kernels[ki * k * k..(ki + 1) * k * k], k)).collect();
    for ch in 0..c {
        padded.fill(T::zero());
        for (ki, bank) in banks.iter().enumerate() {
            let g = &dy[(ki * c + ch) * hw..(ki * c + ch + 1) * hw];
            for &(ddy, ddx, coef) in bank {
                for y in 0..h {
                    let dst = &mut padded[(y + ddy) * pw + ddx..(y + ddy) * pw + ddx + w];
                    for (d, &s) in dst.iter_mut().zip(&g[y * w..(y + 1) * w]) {
                        *d += coef * s;
                    }
                }
            }
        }
        // Fold the padding ring back onto the edge pixels it replicated.
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for py in 0..ph {
            let sy = py.saturating_sub(r).min(h - 1);
            for px in 0..pw {
                let sx = px.saturating_sub(r).min(w - 1);
                plane[sy * w + sx] += padded[py * pw + px];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_accounts_for_dilation_and_stride() {
        let g = ConvGeom { cin: 1, h: 96, w: 160, k: 3, stride: 2, pad: 2, dilation: 2 };
        assert_eq!(g.out_hw(), (48, 80));
        let g = ConvGeom { cin: 1, h: 12, w: 20, k: 3, stride: 1, pad: 1, dilation: 1 };
        assert_eq!(g.out_hw(), (12, 20));
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (k, stride, pad, dilation) in [(3, 1, 1, 1), (3, 2, 1, 1), (3, 2, 2, 2), (3, 1, 2, 2), (1, 1, 0, 1), (5, 3, 0, 1)] {
            let g = ConvGeom { cin: 2, h: 6, w: 9, k, stride, pad, dilation };
            let x: Vec<f64> = (0..2 * 6 * 9).map(|i| i as f64 + 1.0).collect();
            let cols = im2col(&x, &g);
            let (ho, wo) = g.out_hw();
            for c in 0..2 {
                for ky in 0..k {
                    for kx in 0..k {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                let inside = (0..6).contains(&iy) && (0..9).contains(&ix);
                                let want = if inside { x[c * 54 + iy as usize * 9 + ix as usize] } else { 0.0 };
                                assert_eq!(cols[((c * k + ky) * k + kx) * ho * wo + oy * wo + ox], want);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { cin: 2, h: 5, w: 7, k: 3, stride: 2, pad: 2, dilation: 2 };
        let x: Vec<f64> = (0..2 * 5 * 7).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    fn depthwise_naive(x: &[f64], c: usize, h: usize, w: usize, kern: &[f64], m: usize, k: usize) -> Vec<f64> {
        let r = (k / 2) as isize;
        let at = |ch: usize, y: isize, xx: isize| x[ch * h * w + y.clamp(0, h as isize - 1) as usize * w + xx.clamp(0, w as isize - 1) as usize];
        let mut out = vec![0.0; m * c * h * w];
        for ki in 0..m {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += kern[ki * k * k + dy * k + dx] * at(ch, y as isize + dy as isize - r, xx as isize + dx as isize - r);
                            }
                        }
                        out[((ki * c + ch) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn depthwise_matches_direct_loop() {
        let (c, h, w, m, k) = (3, 5, 7, 3, 5);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let kern: Vec<f64> = (0..m * k * k).map(|i| ((i * 19) % 7) as f64 - 3.0).collect();
        assert_eq!(depthwise_bank(&x, c, h, w, &kern, m, k), depthwise_naive(&x, c, h, w, &kern, m, k));
    }

    #[test]
    fn depthwise_backward_is_adjoint() {
        let (c, h, w, m, k) = (2, 4, 6, 2, 5);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 31) % 7) as f64 - 3.0).collect();
        let kern: Vec<f64> = (0..m * k * k).map(|i| ((i * 17) % 5) as f64 - 2.0).collect();
        let out = depthwise_bank(&x, c, h, w, &kern, m, k);
        let y: Vec<f64> = (0..out.len()).map(|i| ((i * 13) % 9) as f64 - 4.0).collect();
        let lhs: f64 = out.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        depthwise_bank_backward(&y, c, h, w, &kern, m, k, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
