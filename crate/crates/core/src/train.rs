//! Training on frame triplets `(t-2, t-1, t)`.
//!
//! The association branch is supervised by the ground-truth correspondences
//! between `t-1` and `t`; the detection branch sees frame `t` fused with the
//! features propagated from `t-1`, gated by the ground-truth center heatmap
//! of `t-1`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ata::decode_offsets;
use crate::error::{Error, Result};
use crate::fmr::{flow_agnostic_offset_var, pool_center_heatmap};
use crate::head::{center_cell, center_heatmap, cva_loss, det_loss, render_targets, Correspondence, DetLoss, DetLossWeights};
use crate::model::{Model, ASSOC_STRIDE};
use crate::mot::MotRow;
use crate::nn::checkpoint;
use crate::nn::{Adam, Graph, ParamGrads, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tfe::prepare_frame;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (1-based) at whose start the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Weight `w` of the association loss.
    pub cva_weight: f64,
    pub det_weights: DetLossWeights,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Triplets drawn per epoch; 0 uses every triplet.
    pub samples_per_epoch: usize,
    pub flip_prob: f64,
    pub affine_prob: f64,
    /// Gate previous features with the ground-truth heatmap of `t-1` instead
    /// of the model's own (detached) prediction.
    pub teacher_forcing: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 5,
            lr: 2.5e-4,
            decay_epochs: vec![40, 50],
            decay_factor: 0.1,
            cva_weight: 1.0,
            det_weights: DetLossWeights::default(),
            grad_clip: 0.0,
            samples_per_epoch: 0,
            flip_prob: 0.5,
            affine_prob: 0.3,
            teacher_forcing: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::config("lr_decay", "must be positive and finite"));
        }
        if !(self.cva_weight.is_finite() && self.cva_weight >= 0.0) {
            return Err(Error::config("cva_weight", "must be non-negative"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be non-negative"));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("affine_prob", self.affine_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(n as i32)
    }
}

/// Frames and per-frame ground truth of one training sequence.
#[derive(Clone, Debug)]
pub struct TrainSequence<T: Scalar> {
    pub frames: Vec<Tensor<T>>,
    /// `gt[i]` holds the rows of frame `i + 1`.
    pub gt: Vec<Vec<MotRow>>,
}

impl<T: Scalar> TrainSequence<T> {
    pub fn new(frames: Vec<Tensor<T>>, rows: &[MotRow]) -> Result<Self> {
        let mut gt = vec![Vec::new(); frames.len()];
        for r in rows {
            let i = r.frame as usize;
            if i == 0 || i > frames.len() {
                return Err(Error::Data(format!("gt row for frame {} but the sequence has {} frames", r.frame, frames.len())));
            }
            gt[i - 1].push(*r);
        }
        Ok(Self { frames, gt })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One training example: up to three consecutive frames ending at `t`.
#[derive(Clone, Debug)]
pub struct Triplet<T: Scalar> {
    pub before_prev: Option<Tensor<T>>,
    pub prev: Tensor<T>,
    pub cur: Tensor<T>,
    pub gt_prev: Vec<MotRow>,
    pub gt_cur: Vec<MotRow>,
}

impl<T: Scalar> Triplet<T> {
    /// Triplet ending at 0-based frame index `t >= 1`.
    pub fn from_sequence(seq: &TrainSequence<T>, t: usize) -> Self {
        Self {
            before_prev: (t >= 2).then(|| seq.frames[t - 2].clone()),
            prev: seq.frames[t - 1].clone(),
            cur: seq.frames[t].clone(),
            gt_prev: seq.gt[t - 1].clone(),
            gt_cur: seq.gt[t].clone(),
        }
    }
}

/// Affine map `x' = s (x - c) + c + t` shared by every frame of a triplet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub flip: bool,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Augment {
    pub const IDENTITY: Self = Self { flip: false, scale: 1.0, tx: 0.0, ty: 0.0 };

    pub fn sample<R: Rng>(rng: &mut R, cfg: &TrainConfig, w: usize, h: usize) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        if rng.random::<f64>() < cfg.affine_prob {
            Self {
                flip,
                scale: rng.random_range(0.85..1.15),
                tx: rng.random_range(-0.1..0.1) * w as f64,
                ty: rng.random_range(-0.1..0.1) * h as f64,
            }
        } else {
            Self { flip, ..Self::IDENTITY }
        }
    }

    fn forward_x(&self, x: f64, w: f64) -> f64 {
        let x = if self.flip { w - x } else { x };
        self.scale * (x - w / 2.0) + w / 2.0 + self.tx
    }

    fn forward_y(&self, y: f64, h: f64) -> f64 {
        self.scale * (y - h / 2.0) + h / 2.0 + self.ty
    }

    pub fn apply_frame<T: Scalar>(&self, frame: &Tensor<T>) -> Tensor<T> {
        if *self == Self::IDENTITY {
            return frame.clone();
        }
        let (c, h, w) = frame.chw();
        let (wf, hf) = (w as f64, h as f64);
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let (y, x) = ((i / w) % h, i % w);
            // Inverse map of the pixel center, then bilinear with edge clamping.
            let sx = (x as f64 + 0.5 - wf / 2.0 - self.tx) / self.scale + wf / 2.0;
            let sx = if self.flip { wf - sx } else { sx } - 0.5;
            let sy = (y as f64 + 0.5 - hf / 2.0 - self.ty) / self.scale + hf / 2.0 - 0.5;
            let sx = sx.clamp(0.0, wf - 1.0);
            let sy = sy.clamp(0.0, hf - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
            let p = |yy: usize, xx: usize| frame.at3(ch, yy, xx).to_f64().unwrap_or(0.0);
            let v = (1.0 - ay) * ((1.0 - ax) * p(y0, x0) + ax * p(y0, x1)) + ay * ((1.0 - ax) * p(y1, x0) + ax * p(y1, x1));
            T::of(v)
        })
    }

    /// Transformed and clipped boxes; objects left with under a third of their
    /// area or under 2 px on a side are dropped.
    pub fn apply_rows(&self, rows: &[MotRow], w: usize, h: usize) -> Vec<MotRow> {
        if *self == Self::IDENTITY {
            return rows.to_vec();
        }
        let (wf, hf) = (w as f64, h as f64);
        rows.iter()
            .filter_map(|r| {
                let xa = self.forward_x(r.left, wf);
                let xb = self.forward_x(r.left + r.width, wf);
                let (x0, x1) = (xa.min(xb), xa.max(xb));
                let y0 = self.forward_y(r.top, hf);
                let y1 = self.forward_y(r.top + r.height, hf);
                let full = (x1 - x0) * (y1 - y0);
                let (cx0, cx1, cy0, cy1) = (x0.max(0.0), x1.min(wf), y0.max(0.0), y1.min(hf));
                let (cw, ch) = (cx1 - cx0, cy1 - cy0);
                (cw >= 2.0 && ch >= 2.0 && cw * ch >= full / 3.0).then(|| MotRow { left: cx0, top: cy0, width: cw, height: ch, ..*r })
            })
            .collect()
    }

    pub fn apply<T: Scalar>(&self, t: &Triplet<T>) -> Triplet<T> {
        let (_, h, w) = t.cur.chw();
        Triplet {
            before_prev: t.before_prev.as_ref().map(|f| self.apply_frame(f)),
            prev: self.apply_frame(&t.prev),
            cur: self.apply_frame(&t.cur),
            gt_prev: self.apply_rows(&t.gt_prev, w, h),
            gt_cur: self.apply_rows(&t.gt_cur, w, h),
        }
    }
}

/// Loss nodes of one triplet.
#[derive(Clone, Copy, Debug)]
pub struct TripletLoss {
    pub det: DetLoss,
    pub cva: Var,
    pub total: Var,
}

/// Stride-8 cells of objects present in both frames.
pub fn correspondences(gt_prev: &[MotRow], gt_cur: &[MotRow], h8: usize, w8: usize) -> Vec<Correspondence> {
    gt_cur
        .iter()
        .filter_map(|c| {
            let p = gt_prev.iter().find(|p| p.id == c.id)?;
            Some(Correspondence { cur: center_cell(c, ASSOC_STRIDE, h8, w8)?, prev: center_cell(p, ASSOC_STRIDE, h8, w8)? })
        })
        .collect()
}

/// Loss settings of a triplet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub cva_weight: f64,
    pub det_weights: DetLossWeights,
    pub teacher_forcing: bool,
}

impl From<&TrainConfig> for LossConfig {
    fn from(c: &TrainConfig) -> Self {
        Self { cva_weight: c.cva_weight, det_weights: c.det_weights, teacher_forcing: c.teacher_forcing }
    }
}

/// Builds the full training graph for one triplet.
pub fn triplet_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    sample: &Triplet<T>,
    cfg: &LossConfig,
) -> Result<TripletLoss> {
    let store = &model.store;
    let xb = g.constant(prepare_frame(&sample.prev)?);
    let xc = g.constant(prepare_frame(&sample.cur)?);
    let fb = model.tfe.forward(g, store, xb);
    let fc = model.tfe.forward(g, store, xc);
    let fa = match &sample.before_prev {
        Some(a) => {
            let xa = g.constant(prepare_frame(a)?);
            let fa = model.tfe.forward(g, store, xa);
            g.detach(fa)
        }
        None => fb,
    };
    let omega_b = model.tsca.forward(g, store, fa, fb)?;
    let omega_c = model.tsca.forward(g, store, fb, fc)?;
    let (_, h4, w4) = g.value(fc).chw();
    let (h8, w8) = (h4.div_ceil(2), w4.div_ceil(2));
    let s = model.sim.forward(g, store, omega_c, omega_b)?;
    let dec = decode_offsets(g, s, h8, w8, T::of(ASSOC_STRIDE as f64), model.temperature());
    let corr = correspondences(&sample.gt_prev, &sample.gt_cur, h8, w8);
    let cva = cva_loss(g, dec.logits_x, dec.logits_y, h8, w8, &corr)?;

    let lambda = g.detach(dec.offsets);
    let big_omega = flow_agnostic_offset_var(g, dec.offsets, lambda);
    let k = model.config.head.num_classes;
    let p4 = if cfg.teacher_forcing {
        center_heatmap(&render_targets::<T>(&sample.gt_prev, k, h4, w4)?.heatmap)
    } else {
        // What the head would report for t-1 without propagated context.
        let zeros = Tensor::zeros(&[model.config.ata.channels, h8, w8]);
        let fused = model.fuser.fuse(store, g.value(fb), &zeros)?;
        model.head.head_forward(store, &fused)?.center_heatmap
    };
    let p8 = pool_center_heatmap(&p4).reshaped(&[1, h8, w8]);
    let p8 = g.constant(p8);
    let gated = g.mul_map(omega_b, p8);
    let propagated = model.propagator.forward(g, store, gated, big_omega);
    let fused = model.fuser.forward(g, store, fc, propagated);
    let hv = model.head.forward(g, store, fused);
    let targets = render_targets::<T>(&sample.gt_cur, k, h4, w4)?;
    let det = det_loss(g, &hv, &targets, cfg.det_weights);
    let wc = g.scale(cva, T::of(cfg.cva_weight));
    let total = g.add(det.total, wc);
    Ok(TripletLoss { det, cva, total })
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub det: f64,
    pub cva: f64,
    pub total: f64,
}

impl EpochLoss {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.epoch, self.det, self.cva, self.total)
    }
}

pub const LOSS_CSV_HEADER: &str = "epoch,det,cva,total";

/// Output locations of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

impl TrainOutputs {
    /// `model.ckpt`, `best.ckpt` and `loss.csv` in `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self { checkpoint: dir.join("model.ckpt"), best_checkpoint: dir.join("best.ckpt"), loss_csv: dir.join("loss.csv") }
    }
}

/// Runs one epoch over `samples` and returns the mean losses.
fn run_epoch<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    cfg: &TrainConfig,
    sequences: &[TrainSequence<T>],
    samples: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochLoss> {
    let (mut det_sum, mut cva_sum, mut total_sum) = (0.0, 0.0, 0.0);
    for batch in samples.chunks(cfg.batch_size) {
        let mut grads = ParamGrads::new(model.store.len());
        for &(s, t) in batch {
            let seq = &sequences[s];
            let (_, h, w) = seq.frames[t].chw();
            let aug = Augment::sample(rng, cfg, w, h);
            let sample = aug.apply(&Triplet::from_sequence(seq, t));
            let mut g = Graph::new();
            let loss = triplet_loss(model, &mut g, &sample, &LossConfig::from(cfg))?;
            let terms = [
                ("det.focal", loss.det.focal),
                ("det.size", loss.det.size),
                ("det.offset", loss.det.offset),
                ("cva", loss.cva),
                ("total", loss.total),
            ];
            for (name, v) in terms {
                let x = scalar_of(&g, v);
                if !x.is_finite() {
                    return Err(Error::Numeric(format!("non-finite {name} loss ({x}) in epoch {epoch}, sequence {s}, frame {}", t + 1)));
                }
            }
            det_sum += scalar_of(&g, loss.det.total);
            cva_sum += scalar_of(&g, loss.cva);
            total_sum += scalar_of(&g, loss.total);
            let back = g.backward(loss.total);
            grads.merge(&g.param_grads(&back, &model.store));
        }
        grads.scale(T::of(1.0 / batch.len() as f64));
        if !grads.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in epoch {epoch}")));
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.global_norm().to_f64().unwrap_or(f64::INFINITY);
            if norm > cfg.grad_clip {
                grads.scale(T::of(cfg.grad_clip / norm));
            }
        }
        opt.step(&mut model.store, &grads);
    }
    let n = samples.len() as f64;
    Ok(EpochLoss { epoch, det: det_sum / n, cva: cva_sum / n, total: total_sum / n })
}

/// Trains `model` in place, writing the loss CSV after every epoch, the
/// lowest-loss checkpoint as it improves and the final checkpoint at the end.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    sequences: &[TrainSequence<T>],
    outputs: &TrainOutputs,
) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        all.extend((1..seq.len()).map(|t| (s, t)));
    }
    if all.is_empty() {
        return Err(Error::Data("training needs at least one sequence with two or more frames".into()));
    }
    for p in [&outputs.checkpoint, &outputs.best_checkpoint, &outputs.loss_csv] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    let mut csv = fs::File::create(&outputs.loss_csv)?;
    writeln!(csv, "{LOSS_CSV_HEADER}")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.store, T::of(cfg.lr));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        opt.lr = T::of(cfg.lr_at(epoch));
        let mut order = all.clone();
        order.shuffle(&mut rng);
        if cfg.samples_per_epoch > 0 {
            order.truncate(cfg.samples_per_epoch);
        }
        let loss = run_epoch(model, &mut opt, cfg, sequences, &order, &mut rng, epoch)?;
        writeln!(csv, "{}", loss.csv_row())?;
        csv.flush()?;
        if loss.total < best {
            best = loss.total;
            checkpoint::save(&model.store, &outputs.best_checkpoint)?;
        }
        log::info!(
            "epoch {epoch}/{}: det {:.4} cva {:.4} total {:.4} ({:.1}s)",
            cfg.epochs,
            loss.det,
            loss.cva,
            loss.total,
            started.elapsed().as_secs_f64()
        );
        history.push(loss);
    }
    checkpoint::save(&model.store, &outputs.checkpoint)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ata::AtaConfig;
    use crate::head::HeadConfig;
    use crate::model::ModelConfig;
    use crate::nn::gradcheck::rand_tensor;
    use crate::tfe::TfeConfig;

    fn row(frame: u32, id: u32, left: f64, top: f64) -> MotRow {
        MotRow { frame, id, left, top, width: 10.0, height: 8.0, conf: 1.0, class: 0, visibility: 1.0 }
    }

    fn tiny_model() -> Model<f32> {
        Model::new(ModelConfig {
            tfe: TfeConfig { widths: [4, 8, 8, 8], feat_channels: 8, ..TfeConfig::default() },
            ata: AtaConfig { channels: 8, attn_dim: 4, embed_dim: 8, ..AtaConfig::default() },
            head: HeadConfig { hidden: 4, num_classes: 1, ..HeadConfig::default() },
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn lr_schedule_steps_at_decay_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 2.5e-4);
        assert!((cfg.lr_at(40) - 2.5e-5).abs() < 1e-12);
        assert!((cfg.lr_at(55) - 2.5e-6).abs() < 1e-12);
    }

    #[test]
    fn flip_maps_boxes_and_pixels_consistently() {
        let frame = Tensor::<f64>::from_fn(&[3, 4, 8], |i| (i % 8) as f64);
        let aug = Augment { flip: true, ..Augment::IDENTITY };
        let out = aug.apply_frame(&frame);
        for x in 0..8 {
            assert_eq!(out.at3(1, 2, x), (7 - x) as f64);
        }
        let rows = aug.apply_rows(&[row(1, 1, 1.0, 0.0)], 40, 20);
        assert_eq!((rows[0].left, rows[0].width), (29.0, 10.0));
    }

    #[test]
    fn affine_moves_box_with_content() {
        let aug = Augment { flip: false, scale: 1.1, tx: 3.0, ty: -2.0 };
        let r = aug.apply_rows(&[row(1, 1, 30.0, 20.0)], 80, 60)[0];
        assert!((r.left - (1.1 * (30.0 - 40.0) + 43.0)).abs() < 1e-9);
        assert!((r.width - 11.0).abs() < 1e-9);
        assert!((r.top - (1.1 * (20.0 - 30.0) + 28.0)).abs() < 1e-9);
        // An object pushed off the image is dropped.
        let gone = Augment { flip: false, scale: 1.0, tx: 75.0, ty: 0.0 };
        assert!(gone.apply_rows(&[row(1, 1, 30.0, 20.0)], 80, 60).is_empty());
    }

    #[test]
    fn correspondences_join_on_identity() {
        let prev = [row(1, 1, 8.0, 8.0), row(1, 2, 40.0, 8.0)];
        let cur = [row(2, 2, 36.0, 8.0), row(2, 3, 8.0, 20.0)];
        let c = correspondences(&prev, &cur, 6, 8);
        assert_eq!(c, vec![Correspondence { cur: (1, 5), prev: (1, 5) }]);
    }

    #[test]
    fn triplet_loss_is_finite_and_backpropagates() {
        let model = tiny_model();
        let frame = |s| rand_tensor::<f32>(&[3, 40, 48], s).map(|v| (v + 1.0) / 2.0);
        let sample = Triplet {
            before_prev: Some(frame(1)),
            prev: frame(2),
            cur: frame(3),
            gt_prev: vec![row(1, 1, 10.0, 10.0)],
            gt_cur: vec![row(2, 1, 14.0, 10.0)],
        };
        for teacher_forcing in [false, true] {
            let cfg = LossConfig { cva_weight: 1.0, det_weights: DetLossWeights::default(), teacher_forcing };
            let mut g = Graph::new();
            let loss = triplet_loss(&model, &mut g, &sample, &cfg).unwrap();
            assert!(scalar_of(&g, loss.total).is_finite());
            assert!(scalar_of(&g, loss.cva) > 0.0);
            let grads = g.param_grads(&g.backward(loss.total), &model.store);
            assert!(grads.all_finite());
            assert!(grads.global_norm() > 0.0);
        }
    }

    #[test]
    fn training_writes_csv_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model();
        let frames: Vec<_> = (0..4).map(|s| rand_tensor::<f32>(&[3, 32, 32], s).map(|v| (v + 1.0) / 2.0)).collect();
        let rows: Vec<_> = (1..=4).map(|f| row(f, 1, 4.0 + f as f64, 10.0)).collect();
        let seq = TrainSequence::new(frames, &rows).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, lr: 1e-3, ..TrainConfig::default() };
        let out = TrainOutputs::in_dir(dir.path());
        let hist = train(&mut model, &cfg, &[seq], &out).unwrap();
        assert_eq!(hist.len(), 2);
        let csv = fs::read_to_string(&out.loss_csv).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], LOSS_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(out.checkpoint.is_file() && out.best_checkpoint.is_file());
    }
}
