//! Synthetic flowing-pipe microscopy sequences with MOT ground truth, and the
//! four image corruptions used to build difficulty tiers.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::mot::MotRow;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceConfig {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub num_classes: usize,
    /// Expected number of objects entering per frame.
    pub spawn_rate: f64,
    /// Common horizontal drift, pixels per frame.
    pub flow_velocity: f64,
    /// Per-object, per-frame velocity noise, pixels.
    pub jitter_sigma: f64,
    /// Object base size range, pixels.
    pub size_range: (f64, f64),
    /// Expected number of unlabeled distractor specks in view.
    pub impurity_density: f64,
    pub seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 96,
            num_frames: 150,
            num_classes: 6,
            spawn_rate: 0.07,
            flow_velocity: 3.0,
            jitter_sigma: 0.3,
            size_range: (8.0, 16.0),
            impurity_density: 4.0,
            seed: 0,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 {
            return Err(Error::config("width", "must be at least 32"));
        }
        if self.height < 32 {
            return Err(Error::config("height", "must be at least 32"));
        }
        if self.num_frames < 2 {
            return Err(Error::config("num_frames", "must be at least 2"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if !(self.spawn_rate.is_finite() && self.spawn_rate >= 0.0) {
            return Err(Error::config("spawn_rate", "must be finite and non-negative"));
        }
        if !self.flow_velocity.is_finite() {
            return Err(Error::config("flow_velocity", "must be finite"));
        }
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return Err(Error::config("jitter_sigma", "must be finite and non-negative"));
        }
        let (lo, hi) = self.size_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 2.0 && lo <= hi && hi < self.width.min(self.height) as f64) {
            return Err(Error::config("size_range", "needs 2 <= min <= max < frame side"));
        }
        if !(self.impurity_density.is_finite() && self.impurity_density >= 0.0) {
            return Err(Error::config("impurity_density", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Mean box diagonal implied by the size range.
    pub fn mean_object_diagonal(&self) -> f64 {
        0.5 * (self.size_range.0 + self.size_range.1) * std::f64::consts::SQRT_2
    }
}

/// One object to place in a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spawn {
    /// 1-based frame of first appearance.
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<RgbImage>,
    pub gt: Vec<MotRow>,
}

/// Width/height ratio of each sprite family.
fn class_aspect(class: usize) -> f64 {
    [1.0, 2.5, 3.0, 1.0, 1.5, 1.2][class % 6]
}

fn class_color(class: usize) -> [f64; 3] {
    const C: [[f64; 3]; 6] = [[0.30, 0.44, 0.26], [0.46, 0.33, 0.22], [0.26, 0.36, 0.52], [0.50, 0.44, 0.24], [0.36, 0.28, 0.46], [0.22, 0.30, 0.30]];
    C[class % 6]
}

/// Coverage and shading of a sprite at box-normalized `(u, v)` in `[-1, 1]`.
fn sprite(class: usize, u: f64, v: f64) -> Option<f64> {
    let r2 = u * u + v * v;
    match class % 6 {
        0 => (r2 <= 1.0).then(|| 1.0 - 0.25 * r2),
        1 => (r2 <= 1.0).then(|| if v.abs() < 0.3 { 0.7 } else { 1.0 }),
        2 => {
            let du = [(u + 2.0 / 3.0) * 3.0, u * 3.0, (u - 2.0 / 3.0) * 3.0];
            du.iter().any(|d| d * d + v * v <= 1.0).then_some(0.95)
        }
        3 => (r2 <= 1.0 && r2 >= 0.2).then_some(1.0),
        4 => (r2 <= 1.0).then(|| 0.75 + 0.25 * (7.0 * u).sin()),
        _ => (u.abs() + v.abs() <= 1.0).then(|| 1.0 - 0.3 * v.abs()),
    }
}

struct Body {
    id: u32,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    class: usize,
    alive: bool,
}

struct Speck {
    x: f64,
    y: f64,
    r: f64,
    speed: f64,
}

/// Random arrivals for a configuration: objects already in view at frame 1
/// plus edge arrivals afterwards.
pub fn plan_spawns(cfg: &SequenceConfig, rng: &mut ChaCha8Rng) -> Vec<Spawn> {
    let mut plan = Vec::new();
    if cfg.spawn_rate == 0.0 {
        return plan;
    }
    let (lo, hi) = cfg.size_range;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let shape = |rng: &mut ChaCha8Rng| {
        let class = rng.random_range(0..cfg.num_classes);
        let s = rng.random_range(lo..=hi);
        let a = class_aspect(class).sqrt();
        (class, (s * a).min(w - 1.0), (s / a).clamp(3.0, h - 1.0))
    };
    let dwell = (w + 0.5 * (lo + hi)) / cfg.flow_velocity.abs().max(0.5);
    let initial = Poisson::new(cfg.spawn_rate * dwell).map(|p| p.sample(rng) as usize).unwrap_or(0);
    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
    let overlaps = |placed: &[(f64, f64, f64, f64)], b: (f64, f64, f64, f64)| {
        placed.iter().any(|p| b.0 < p.0 + p.2 + 2.0 && p.0 < b.0 + b.2 + 2.0 && b.1 < p.1 + p.3 + 2.0 && p.1 < b.1 + b.3 + 2.0)
    };
    for _ in 0..initial {
        let (class, bw, bh) = shape(rng);
        for _ in 0..8 {
            let b = (rng.random_range(0.0..w - bw), rng.random_range(0.0..h - bh), bw, bh);
            if !overlaps(&placed, b) {
                placed.push(b);
                plan.push(Spawn { frame: 1, x: b.0, y: b.1, width: bw, height: bh, class });
                break;
            }
        }
    }
    let arrivals = Poisson::new(cfg.spawn_rate).expect("validated rate");
    // Entry-side occupancy: recent arrivals still near the edge.
    let mut recent: Vec<(usize, f64, f64)> = Vec::new();
    for frame in 2..=cfg.num_frames {
        let n = arrivals.sample(rng) as usize;
        for _ in 0..n {
            let (class, bw, bh) = shape(rng);
            let clearance = (hi * 1.5 / cfg.flow_velocity.abs().max(0.5)).ceil() as usize;
            recent.retain(|&(f, _, _)| frame - f <= clearance);
            for _ in 0..8 {
                let y = rng.random_range(0.0..h - bh);
                if recent.iter().all(|&(_, ry, rh)| y + bh + 2.0 < ry || ry + rh + 2.0 < y) {
                    let x = if cfg.flow_velocity >= 0.0 { 1.0 - bw } else { w - 1.0 };
                    plan.push(Spawn { frame, x, y, width: bw, height: bh, class });
                    recent.push((frame, y, bh));
                    break;
                }
            }
        }
    }
    plan
}

/// Renders a sequence from an explicit arrival plan.
/// Narrowest visible part, in pixels, that still gets a ground-truth row.
pub const MIN_VISIBLE_WIDTH: f64 = 1.0;

pub fn render_sequence(cfg: &SequenceConfig, plan: &[Spawn], rng: &mut ChaCha8Rng) -> Result<Sequence> {
    cfg.validate()?;
    let (wd, ht) = (cfg.width, cfg.height);
    let (w, h) = (wd as f64, ht as f64);
    // Static background: pipe shading, a tint and low-frequency texture.
    let tint = [rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)];
    let waves: Vec<(f64, f64, f64, f64)> =
        (0..4).map(|_| (rng.random_range(0.02..0.12), rng.random_range(0.02..0.12), rng.random_range(0.0..6.3), rng.random_range(0.01..0.025))).collect();
    let mut background = vec![0.0f64; 3 * wd * ht];
    for y in 0..ht {
        let d = (y as f64 + 0.5 - h / 2.0) / (h / 2.0);
        let shade = 1.0 - 0.18 * d * d;
        for x in 0..wd {
            let tex: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            for (c, base) in [0.64, 0.68, 0.66].into_iter().enumerate() {
                background[(c * ht + y) * wd + x] = (base + tint[c]) * shade + tex;
            }
        }
    }
    let sensor = Normal::new(0.0, 0.012).expect("valid sigma");
    let jitter = Normal::new(0.0, cfg.jitter_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut specks: Vec<Speck> = (0..cfg.impurity_density.round() as usize)
        .map(|_| Speck { x: rng.random_range(0.0..w), y: rng.random_range(0.0..h), r: rng.random_range(0.8..1.8), speed: rng.random_range(0.8..1.2) })
        .collect();

    let mut plan: Vec<Spawn> = plan.to_vec();
    plan.sort_by_key(|s| s.frame);
    let mut next_spawn = 0;
    let mut bodies: Vec<Body> = Vec::new();
    let mut next_id = 1;
    let mut frames = Vec::with_capacity(cfg.num_frames);
    let mut gt = Vec::new();
    for frame in 1..=cfg.num_frames {
        if frame > 1 {
            for b in bodies.iter_mut().filter(|b| b.alive) {
                let (dx, dy) = if cfg.jitter_sigma > 0.0 { (jitter.sample(rng), jitter.sample(rng)) } else { (0.0, 0.0) };
                b.x += cfg.flow_velocity + dx;
                b.y = (b.y + dy).clamp(0.0, h - b.h);
            }
            for s in specks.iter_mut() {
                s.x += cfg.flow_velocity * s.speed;
                if s.x > w + 2.0 || s.x < -2.0 {
                    s.x = if cfg.flow_velocity >= 0.0 { -1.0 } else { w + 1.0 };
                    s.y = rng.random_range(0.0..h);
                }
            }
        }
        while next_spawn < plan.len() && plan[next_spawn].frame <= frame {
            let s = plan[next_spawn];
            if s.class >= cfg.num_classes {
                return Err(Error::config("spawn.class", format!("class {} outside 0..{}", s.class, cfg.num_classes)));
            }
            if s.frame == frame {
                bodies.push(Body { id: next_id, x: s.x, y: s.y, w: s.width, h: s.height, class: s.class, alive: true });
                next_id += 1;
            }
            next_spawn += 1;
        }
        let mut px = background.clone();
        for v in px.iter_mut() {
            *v += sensor.sample(rng);
        }
        for s in &specks {
            let (x0, x1) = ((s.x - s.r).floor().max(0.0) as usize, ((s.x + s.r).ceil().max(0.0) as usize).min(wd));
            let (y0, y1) = ((s.y - s.r).floor().max(0.0) as usize, ((s.y + s.r).ceil().max(0.0) as usize).min(ht));
            for y in y0..y1 {
                for x in x0..x1 {
                    let d2 = (x as f64 + 0.5 - s.x).powi(2) + (y as f64 + 0.5 - s.y).powi(2);
                    if d2 <= s.r * s.r {
                        for c in 0..3 {
                            px[(c * ht + y) * wd + x] *= 0.7;
                        }
                    }
                }
            }
        }
        for b in bodies.iter_mut().filter(|b| b.alive) {
            let left = b.x.max(0.0);
            let right = (b.x + b.w).min(w);
            if right - left <= 0.0 {
                // Left the view (or never entered it): the track ends here.
                b.alive = false;
                continue;
            }
            let color = class_color(b.class);
            let (x0, x1) = (left.floor() as usize, (right.ceil() as usize).min(wd));
            let (y0, y1) = (b.y.floor().max(0.0) as usize, ((b.y + b.h).ceil() as usize).min(ht));
            for y in y0..y1 {
                for x in x0..x1 {
                    // 2x2 supersampled coverage.
                    let (mut cov, mut shade) = (0.0, 0.0);
                    for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                        let u = (x as f64 + ox - b.x) / (b.w / 2.0) - 1.0;
                        let v = (y as f64 + oy - b.y) / (b.h / 2.0) - 1.0;
                        if let Some(s) = sprite(b.class, u, v) {
                            cov += 0.25;
                            shade += 0.25 * s;
                        }
                    }
                    if cov == 0.0 {
                        continue;
                    }
                    let s = shade / cov;
                    for c in 0..3 {
                        let p = &mut px[(c * ht + y) * wd + x];
                        *p = *p * (1.0 - 0.85 * cov) + 0.85 * cov * color[c] * s;
                    }
                }
            }
            if right - left < MIN_VISIBLE_WIDTH {
                // A sliver at the border is drawn but not annotated.
                continue;
            }
            gt.push(MotRow {
                frame: frame as u32,
                id: b.id,
                left,
                top: b.y,
                width: right - left,
                height: b.h,
                conf: 1.0,
                class: b.class as i32,
                visibility: (right - left) / b.w,
            });
        }
        let img = RgbImage::from_fn(wd as u32, ht as u32, |x, y| {
            let q = |c: usize| (px[(c * ht + y as usize) * wd + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(0), q(1), q(2)])
        });
        frames.push(img);
    }
    gt.sort_by_key(|r| (r.frame, r.id));
    Ok(Sequence { frames, gt })
}

/// Deterministic sequence for a configuration and its seed.
pub fn synth_sequence(cfg: &SequenceConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = plan_spawns(cfg, &mut rng);
    render_sequence(cfg, &plan, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseLevel {
    Medium,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    None,
    /// `count` opaque rectangles covering at most `max_area` of the frame in total.
    Occlusion { count: usize, max_area: f64 },
    Gray,
    Blur { sigma: f64 },
    SaltPepper { p: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: NoiseLevel,
}

impl NoiseSpec {
    /// Default parameters of a named corruption at a level.
    pub fn preset(kind: &str, level: NoiseLevel) -> Result<Self> {
        let hard = level == NoiseLevel::Hard;
        let kind = match kind {
            "none" => NoiseKind::None,
            "occlusion" => {
                if hard {
                    NoiseKind::Occlusion { count: 5, max_area: 0.20 }
                } else {
                    NoiseKind::Occlusion { count: 2, max_area: 0.10 }
                }
            }
            "gray" if hard => NoiseKind::Gray,
            "gray" => return Err(Error::config("noise", "gray processing exists only at the hard level")),
            "blur" => NoiseKind::Blur { sigma: if hard { 2.5 } else { 1.0 } },
            "salt_pepper" => NoiseKind::SaltPepper { p: if hard { 0.10 } else { 0.02 } },
            other => return Err(Error::config("noise", format!("unknown kind {other:?}"))),
        };
        Ok(Self { kind, level })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            NoiseKind::None => "none",
            NoiseKind::Occlusion { .. } => "occlusion",
            NoiseKind::Gray => "gray",
            NoiseKind::Blur { .. } => "blur",
            NoiseKind::SaltPepper { .. } => "salt_pepper",
        }
    }

    /// Occluders stay put for a whole sequence; other corruptions vary per frame.
    pub fn is_static(&self) -> bool {
        matches!(self.kind, NoiseKind::Occlusion { .. })
    }
}

impl FromStr for NoiseLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(Self::Medium),
            "hard" => Ok(Self::Hard),
            _ => Err(Error::config("noise level", format!("expected medium or hard, got {s:?}"))),
        }
    }
}

impl fmt::Display for NoiseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if *self == Self::Medium { "medium" } else { "hard" })
    }
}

/// `kind:level`, e.g. `blur:hard`.
impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, level) = s.split_once(':').ok_or_else(|| Error::config("noise", format!("expected kind:level, got {s:?}")))?;
        Self::preset(kind.trim(), level.trim().parse()?)
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name(), self.level)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn noise(&self) -> Vec<NoiseSpec> {
        let kinds: &[&str] = match self {
            Tier::Easy => &[],
            Tier::Medium => &["occlusion", "blur", "salt_pepper"],
            Tier::Hard => &["occlusion", "gray", "blur", "salt_pepper"],
        };
        let level = if *self == Tier::Hard { NoiseLevel::Hard } else { NoiseLevel::Medium };
        kinds.iter().map(|k| NoiseSpec::preset(k, level).expect("valid preset")).collect()
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Self::Easy),
            "medium" => Ok(Self::Medium),
            "hard" => Ok(Self::Hard),
            _ => Err(Error::config("tiers", format!("unknown tier {s:?}"))),
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        })
    }
}

fn luminance(p: &Rgb<u8>) -> u8 {
    (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round().clamp(0.0, 255.0) as u8
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut tmp = vec![[0.0f64; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, t) in taps.iter().enumerate() {
                let xx = (x + k as isize - r).clamp(0, w - 1);
                let p = img.get_pixel(xx as u32, y as u32);
                for c in 0..3 {
                    acc[c] += t * p[c] as f64;
                }
            }
            tmp[(y * w + x) as usize] = acc.map(|v| v / norm);
        }
    }
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut acc = [0.0; 3];
        for (k, t) in taps.iter().enumerate() {
            let yy = (y as isize + k as isize - r).clamp(0, h - 1);
            let p = tmp[(yy * w + x as isize) as usize];
            for c in 0..3 {
                acc[c] += t * p[c];
            }
        }
        Rgb(acc.map(|v| (v / norm).round().clamp(0.0, 255.0) as u8))
    })
}

/// Applies one corruption.
pub fn apply_noise<R: Rng>(frame: &RgbImage, spec: &NoiseSpec, rng: &mut R) -> Result<RgbImage> {
    if frame.width() == 0 || frame.height() == 0 {
        return Err(Error::Data("cannot corrupt an empty frame".into()));
    }
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    Ok(match spec.kind {
        NoiseKind::None => frame.clone(),
        NoiseKind::Gray => {
            let mut out = frame.clone();
            for p in out.pixels_mut() {
                let l = luminance(p);
                *p = Rgb([l, l, l]);
            }
            out
        }
        NoiseKind::Blur { sigma } => {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::config("blur sigma", "must be positive"));
            }
            gaussian_blur(frame, sigma)
        }
        NoiseKind::SaltPepper { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("salt_pepper p", "must lie in [0, 1]"));
            }
            let mut out = frame.clone();
            for px in out.pixels_mut() {
                if rng.random::<f64>() < p {
                    let v = if rng.random::<bool>() { 255 } else { 0 };
                    *px = Rgb([v, v, v]);
                }
            }
            out
        }
        NoiseKind::Occlusion { count, max_area } => {
            if count == 0 || !(max_area > 0.0 && max_area <= 1.0) {
                return Err(Error::config("occlusion", "needs at least one rectangle and an area fraction in (0, 1]"));
            }
            let mut out = frame.clone();
            let each = max_area * w * h / count as f64;
            for _ in 0..count {
                let area = each * rng.random_range(0.5..=1.0);
                let aspect: f64 = rng.random_range(0.5..2.0);
                let rw = (area * aspect).sqrt().min(w).max(1.0);
                let rh = (area / rw).min(h).max(1.0);
                let x0 = rng.random_range(0.0..=(w - rw));
                let y0 = rng.random_range(0.0..=(h - rh));
                let shade = rng.random_range(175..215u8);
                for y in y0 as u32..((y0 + rh) as u32).min(frame.height()) {
                    for x in x0 as u32..((x0 + rw) as u32).min(frame.width()) {
                        out.put_pixel(x, y, Rgb([shade, shade, shade]));
                    }
                }
            }
            out
        }
    })
}

/// Corrupts a whole sequence. Static corruptions replay the same random
/// draws on every frame.
pub fn corrupt_frames(frames: &[RgbImage], specs: &[NoiseSpec], seed: u64) -> Result<Vec<RgbImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let statics: Vec<u64> = specs.iter().map(|_| rng.random()).collect();
    frames
        .iter()
        .map(|f| {
            let mut out = f.clone();
            for (spec, &s) in specs.iter().zip(&statics) {
                out = if spec.is_static() { apply_noise(&out, spec, &mut ChaCha8Rng::seed_from_u64(s))? } else { apply_noise(&out, spec, &mut rng)? };
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SequenceConfig {
        SequenceConfig { num_frames: 12, seed: 7, ..SequenceConfig::default() }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: [(SequenceConfig, &str); 4] = [
            (SequenceConfig { width: 16, ..small() }, "width"),
            (SequenceConfig { num_frames: 1, ..small() }, "num_frames"),
            (SequenceConfig { flow_velocity: f64::NAN, ..small() }, "flow_velocity"),
            (SequenceConfig { size_range: (9.0, 4.0), ..small() }, "size_range"),
        ];
        for (cfg, field) in cases {
            match synth_sequence(&cfg) {
                Err(Error::InvalidConfig { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn no_spawns_means_empty_scene() {
        let seq = synth_sequence(&SequenceConfig { spawn_rate: 0.0, ..small() }).unwrap();
        assert!(seq.gt.is_empty());
        assert_eq!(seq.frames.len(), 12);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_sequence(&small()).unwrap();
        let b = synth_sequence(&small()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames[0], synth_sequence(&SequenceConfig { seed: 8, ..small() }).unwrap().frames[0]);
    }

    #[test]
    fn closed_form_kinematics() {
        let cfg = SequenceConfig { jitter_sigma: 0.0, num_frames: 60, ..small() };
        let spawn = Spawn { frame: 1, x: 10.0, y: 40.0, width: 12.0, height: 8.0, class: 0 };
        let seq = render_sequence(&cfg, &[spawn], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rows: Vec<_> = seq.gt.iter().filter(|r| r.id == 1).collect();
        // Visible until the left edge passes the right border.
        assert_eq!(rows.len(), 50);
        for r in &rows {
            assert_eq!(r.left, 10.0 + 3.0 * (r.frame as f64 - 1.0));
            assert_eq!(r.top, 40.0);
        }
    }

    #[test]
    fn ground_truth_invariants() {
        for seed in 0..6 {
            ground_truth_invariants_for(seed);
        }
    }

    fn ground_truth_invariants_for(seed: u64) {
        let seq = synth_sequence(&SequenceConfig { num_frames: 150, seed, ..SequenceConfig::default() }).unwrap();
        assert!(!seq.gt.is_empty());
        let (back, warnings) = crate::mot::parse_mot(&crate::mot::format_rows(&seq.gt), std::path::Path::new("gt.txt")).unwrap();
        assert!(warnings.is_empty() && back.len() == seq.gt.len());
        let mut by_id: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
        let mut seen = std::collections::HashSet::new();
        for r in &seq.gt {
            assert!(seen.insert((r.frame, r.id)));
            assert!(r.width >= MIN_VISIBLE_WIDTH && r.height > 0.0);
            assert!(r.left >= 0.0 && r.top >= 0.0 && r.left + r.width <= 160.0 && r.top + r.height <= 96.0);
            by_id.entry(r.id).or_default().push(r.frame);
        }
        for frames in by_id.values() {
            assert!(frames.windows(2).all(|w| w[1] == w[0] + 1), "non-contiguous track {frames:?}");
        }
        let mean = seq.gt.len() as f64 / 150.0;
        assert!((2.0..7.0).contains(&mean), "mean concurrency {mean}");
    }

    #[test]
    fn noise_presets_are_monotone() {
        let m = |k| NoiseSpec::preset(k, NoiseLevel::Medium).unwrap().kind;
        let h = |k| NoiseSpec::preset(k, NoiseLevel::Hard).unwrap().kind;
        match (m("occlusion"), h("occlusion")) {
            (NoiseKind::Occlusion { count: a, max_area: x }, NoiseKind::Occlusion { count: b, max_area: y }) => assert!(b > a && y > x),
            _ => unreachable!(),
        }
        match (m("blur"), h("blur"), m("salt_pepper"), h("salt_pepper")) {
            (NoiseKind::Blur { sigma: a }, NoiseKind::Blur { sigma: b }, NoiseKind::SaltPepper { p: c }, NoiseKind::SaltPepper { p: d }) => {
                assert!(b > a && d > c)
            }
            _ => unreachable!(),
        }
        assert!(NoiseSpec::preset("gray", NoiseLevel::Medium).is_err());
        assert!(NoiseSpec::preset("fog", NoiseLevel::Hard).is_err());
        assert_eq!("blur:hard".parse::<NoiseSpec>().unwrap().to_string(), "blur:hard");
    }

    #[test]
    fn tiers_have_expected_corruptions() {
        assert!(Tier::Easy.noise().is_empty());
        let med: Vec<_> = Tier::Medium.noise().iter().map(|s| s.name()).collect();
        assert_eq!(med, ["occlusion", "blur", "salt_pepper"]);
        let hard = Tier::Hard.noise();
        assert_eq!(hard.len(), 4);
        assert!(hard.iter().any(|s| s.kind == NoiseKind::Gray));
    }

    #[test]
    fn noise_examples() {
        let frame = synth_sequence(&small()).unwrap().frames.remove(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sp = |p| NoiseSpec { kind: NoiseKind::SaltPepper { p }, level: NoiseLevel::Medium };
        assert_eq!(apply_noise(&frame, &sp(0.0), &mut rng).unwrap(), frame);
        let full = apply_noise(&frame, &sp(1.0), &mut rng).unwrap();
        assert!(full.pixels().all(|p| p.0 == [0; 3] || p.0 == [255; 3]));
        let gray = NoiseSpec::preset("gray", NoiseLevel::Hard).unwrap();
        let g1 = apply_noise(&frame, &gray, &mut rng).unwrap();
        assert_eq!(apply_noise(&g1, &gray, &mut rng).unwrap(), g1);
        let none = NoiseSpec { kind: NoiseKind::None, level: NoiseLevel::Medium };
        assert_eq!(apply_noise(&frame, &none, &mut rng).unwrap(), frame);
        let blurred = apply_noise(&frame, &NoiseSpec::preset("blur", NoiseLevel::Hard).unwrap(), &mut rng).unwrap();
        assert_ne!(blurred, frame);
    }

    #[test]
    fn occluders_are_static_within_a_sequence() {
        let seq = synth_sequence(&small()).unwrap();
        let occ = NoiseSpec::preset("occlusion", NoiseLevel::Hard).unwrap();
        let out = corrupt_frames(&seq.frames, &[occ], 3).unwrap();
        let mask = |a: &RgbImage, b: &RgbImage| a.pixels().zip(b.pixels()).map(|(p, q)| p != q).collect::<Vec<_>>();
        let m0 = mask(&seq.frames[0], &out[0]);
        let covered = m0.iter().filter(|&&c| c).count() as f64 / m0.len() as f64;
        assert!(covered > 0.02 && covered <= 0.20, "covered {covered}");
        // Occluded pixels are identical across frames.
        for ((a, b), &occluded) in out[0].pixels().zip(out[5].pixels()).zip(&m0) {
            if occluded {
                assert_eq!(a, b);
            }
        }
    }
}
