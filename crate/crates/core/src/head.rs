//! Center-point detection head: per-class heatmaps, box size and sub-cell
//! offset at stride 4, peak decoding and the training objectives.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mot::MotRow;
use crate::nn::layers::{Conv2d, ConvSpec};
use crate::nn::{Graph, L1Target, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Heatmap output stride.
pub const STRIDE: usize = 4;

/// Initial heatmap bias, `-ln((1 - 0.1) / 0.1)`: every cell starts near 0.1.
const HEATMAP_PRIOR: f64 = -2.19;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub feat_channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { feat_channels: 64, hidden: 16, num_classes: 6 }
    }
}

#[derive(Clone, Debug)]
struct Branch {
    conv: Conv2d,
    out: Conv2d,
}

impl Branch {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: &HeadConfig, cout: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), ConvSpec::new(cfg.feat_channels, cfg.hidden, 3)),
            out: Conv2d::new(store, rng, &format!("{name}.out"), ConvSpec::new(cfg.hidden, cout, 1)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = g.relu(y);
        self.out.forward(g, store, y)
    }
}

/// Raw head outputs on the graph.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[K, h, w]` pre-sigmoid.
    pub heatmap_logits: Var,
    /// `[2, h, w]` box `(width, height)` in pixels.
    pub size: Var,
    /// `[2, h, w]` sub-cell `(dx, dy)` in cells.
    pub offset: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T: Scalar> {
    /// `[K, h, w]` in `[0, 1]`.
    pub class_heatmap: Tensor<T>,
    /// `[h, w]` maximum over classes.
    pub center_heatmap: Tensor<T>,
    pub size: Tensor<T>,
    pub offset: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub config: HeadConfig,
    heatmap: Branch,
    size: Branch,
    offset: Branch,
}

impl Head {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: HeadConfig) -> Self {
        let heatmap = Branch::new(store, rng, "head.hm", &config, config.num_classes);
        if let Some(b) = heatmap.out.bias {
            store.get_mut(b).data_mut().fill(T::of(HEATMAP_PRIOR));
        }
        Self {
            size: Branch::new(store, rng, "head.size", &config, 2),
            offset: Branch::new(store, rng, "head.off", &config, 2),
            heatmap,
            config,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: Var) -> HeadVars {
        HeadVars {
            heatmap_logits: self.heatmap.forward(g, store, fused),
            size: self.size.forward(g, store, fused),
            offset: self.offset.forward(g, store, fused),
        }
    }

    pub fn head_forward<T: Scalar>(&self, store: &ParamStore<T>, fused: &Tensor<T>) -> Result<HeadOutput<T>> {
        if fused.shape().len() != 3 || fused.shape()[0] != self.config.feat_channels {
            return Err(Error::Shape(format!("head expects {} channels, got {:?}", self.config.feat_channels, fused.shape())));
        }
        let mut g = Graph::new();
        let x = g.constant(fused.clone());
        let v = self.forward(&mut g, store, x);
        Ok(HeadOutput::from_vars(&g, &v))
    }
}

impl<T: Scalar> HeadOutput<T> {
    pub fn from_vars(g: &Graph<T>, v: &HeadVars) -> Self {
        let class_heatmap = g.value(v.heatmap_logits).map(|x| T::one() / (T::one() + (-x).exp()));
        Self {
            center_heatmap: center_heatmap(&class_heatmap),
            class_heatmap,
            size: g.value(v.size).clone(),
            offset: g.value(v.offset).clone(),
        }
    }
}

/// Per-pixel maximum over class channels.
pub fn center_heatmap<T: Scalar>(class_heatmap: &Tensor<T>) -> Tensor<T> {
    let (k, h, w) = class_heatmap.chw();
    Tensor::from_fn(&[h, w], |n| (0..k).map(|c| class_heatmap.data()[c * h * w + n]).fold(T::neg_infinity(), T::max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// `(left, top, width, height)` in pixels, clipped to the image.
    pub bbox: [f64; 4],
    pub score: f64,
    pub class_id: usize,
    /// Unclipped center in pixels.
    pub center: (f64, f64),
}

/// Local maxima of the center heatmap (ties with a neighbour still count)
/// scoring at least `threshold`, in `(row, column)` order. Boxes are clipped
/// to an `image_w x image_h` frame.
pub fn decode<T: Scalar>(out: &HeadOutput<T>, threshold: f64, image_w: usize, image_h: usize) -> Result<Vec<Detection>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config("score_threshold", "must lie in (0, 1)"));
    }
    let (k, h, w) = out.class_heatmap.chw();
    let p = out.center_heatmap.data();
    let s = STRIDE as f64;
    let mut dets = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let v = p[i * w + j];
            if v.as_f64() < threshold {
                continue;
            }
            let is_peak = (i.saturating_sub(1)..(i + 2).min(h)).all(|y| (j.saturating_sub(1)..(j + 2).min(w)).all(|x| p[y * w + x] <= v));
            if !is_peak {
                continue;
            }
            let mut class_id = 0;
            for c in 1..k {
                if out.class_heatmap.at3(c, i, j) > out.class_heatmap.at3(class_id, i, j) {
                    class_id = c;
                }
            }
            let cx = (j as f64 + out.offset.at3(0, i, j).as_f64()) * s;
            let cy = (i as f64 + out.offset.at3(1, i, j).as_f64()) * s;
            // At least one pixel, so rows survive two-decimal serialization.
            let bw = out.size.at3(0, i, j).as_f64().max(1.0);
            let bh = out.size.at3(1, i, j).as_f64().max(1.0);
            let x0 = (cx - bw / 2.0).clamp(0.0, image_w as f64);
            let y0 = (cy - bh / 2.0).clamp(0.0, image_h as f64);
            let x1 = (cx + bw / 2.0).clamp(0.0, image_w as f64);
            let y1 = (cy + bh / 2.0).clamp(0.0, image_h as f64);
            if x1 - x0 < 0.5 || y1 - y0 < 0.5 {
                continue;
            }
            dets.push(Detection { bbox: [x0, y0, x1 - x0, y1 - y0], score: v.as_f64(), class_id, center: (cx, cy) });
        }
    }
    Ok(dets)
}

/// Size-adaptive splat radius: the largest corner shift that keeps IoU with
/// the true box above 0.7, for a box of `h x w` heatmap cells.
pub fn gaussian_radius(h: f64, w: f64) -> f64 {
    let min_overlap = 0.7;
    let (b1, c1) = (h + w, w * h * (1.0 - min_overlap) / (1.0 + min_overlap));
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let (b2, c2) = (2.0 * (h + w), (1.0 - min_overlap) * w * h);
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let (a3, b3, c3) = (4.0 * min_overlap, -2.0 * min_overlap * (h + w), (min_overlap - 1.0) * w * h);
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Draws a peak-1 Gaussian of integer `radius` at `(cy, cx)`, keeping the
/// elementwise maximum with what is already there.
pub fn draw_gaussian<T: Scalar>(map: &mut [T], h: usize, w: usize, cy: usize, cx: usize, radius: usize) {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (cy as isize + dy, cx as isize + dx);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            if v < f64::EPSILON {
                continue;
            }
            let cell = &mut map[y as usize * w + x as usize];
            *cell = cell.max(T::of(v));
        }
    }
}

/// Supervision for one frame on an `h x w` stride-4 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets<T: Scalar> {
    /// `[K, h, w]` Gaussian splats, exactly 1 at object centers.
    pub heatmap: Tensor<T>,
    /// Box `(width, height)` in pixels at center cells.
    pub size: Vec<L1Target<T>>,
    /// Sub-cell remainder of the center at center cells.
    pub offset: Vec<L1Target<T>>,
}

/// Integer cell holding a box center on a `stride` grid, if inside `h x w`.
pub fn center_cell(row: &MotRow, stride: usize, h: usize, w: usize) -> Option<(usize, usize)> {
    let (cx, cy) = row.center();
    let (x, y) = ((cx / stride as f64).floor(), (cy / stride as f64).floor());
    (x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h).then_some((y as usize, x as usize))
}

pub fn render_targets<'a, T: Scalar>(
    rows: impl IntoIterator<Item = &'a MotRow>,
    num_classes: usize,
    h: usize,
    w: usize,
) -> Result<DetTargets<T>> {
    let mut heatmap = Tensor::zeros(&[num_classes, h, w]);
    let (mut size, mut offset) = (Vec::new(), Vec::new());
    let s = STRIDE as f64;
    for r in rows {
        if r.class < 0 || r.class as usize >= num_classes {
            return Err(Error::Data(format!("frame {} id {}: class {} outside 0..{num_classes}", r.frame, r.id, r.class)));
        }
        let Some((i, j)) = center_cell(r, STRIDE, h, w) else { continue };
        let (cx, cy) = r.center();
        let radius = gaussian_radius(r.height / s, r.width / s).max(0.0) as usize;
        let c = r.class as usize;
        draw_gaussian(&mut heatmap.data_mut()[c * h * w..(c + 1) * h * w], h, w, i, j, radius);
        size.push(L1Target { y: i, x: j, value: [T::of(r.width), T::of(r.height)] });
        offset.push(L1Target { y: i, x: j, value: [T::of(cx / s - j as f64), T::of(cy / s - i as f64)] });
    }
    Ok(DetTargets { heatmap, size, offset })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetLossWeights {
    pub size: f64,
    pub offset: f64,
}

impl Default for DetLossWeights {
    fn default() -> Self {
        Self { size: 0.1, offset: 1.0 }
    }
}

/// Individual terms of the detection loss, kept apart for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct DetLoss {
    pub focal: Var,
    pub size: Var,
    pub offset: Var,
    pub total: Var,
}

pub fn det_loss<T: Scalar>(g: &mut Graph<T>, out: &HeadVars, targets: &DetTargets<T>, weights: DetLossWeights) -> DetLoss {
    let focal = g.focal_loss(out.heatmap_logits, &targets.heatmap);
    let size = g.masked_l1(out.size, &targets.size);
    let offset = g.masked_l1(out.offset, &targets.offset);
    let ws = g.scale(size, T::of(weights.size));
    let wo = g.scale(offset, T::of(weights.offset));
    let t = g.add(focal, ws);
    let total = g.add(t, wo);
    DetLoss { focal, size, offset, total }
}

/// A ground-truth object's stride-8 cell in the current and previous frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Correspondence {
    pub cur: (usize, usize),
    pub prev: (usize, usize),
}

/// Cross-entropy of the horizontal and vertical correspondence likelihoods
/// against each object's previous column and row, summed over objects.
/// `logits_x` is `[h*w, w]`, `logits_y` is `[h*w, h]`.
pub fn cva_loss<T: Scalar>(g: &mut Graph<T>, logits_x: Var, logits_y: Var, h: usize, w: usize, gt: &[Correspondence]) -> Result<Var> {
    if g.shape(logits_x) != [h * w, w] || g.shape(logits_y) != [h * w, h] {
        return Err(Error::Shape(format!("likelihoods {:?}/{:?} do not match grid {h}x{w}", g.shape(logits_x), g.shape(logits_y))));
    }
    let mut tx = Vec::with_capacity(gt.len());
    let mut ty = Vec::with_capacity(gt.len());
    for c in gt {
        if c.cur.0 >= h || c.cur.1 >= w || c.prev.0 >= h || c.prev.1 >= w {
            return Err(Error::Data(format!("correspondence {c:?} outside the {h}x{w} grid")));
        }
        let row = c.cur.0 * w + c.cur.1;
        tx.push((row, c.prev.1));
        ty.push((row, c.prev.0));
    }
    let lx = g.cross_entropy(logits_x, &tx);
    let ly = g.cross_entropy(logits_y, &ty);
    Ok(g.add(lx, ly))
}
