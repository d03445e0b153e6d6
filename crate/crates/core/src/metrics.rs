//! CLEAR-MOT accuracy and identity F1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mot::MotRow;

pub const IOU_THRESHOLD: f64 = 0.5;

/// Maximum-weight assignment on a dense `rows x cols` matrix (row-major).
/// Returns, for every row, the assigned column if any. Every row is assigned
/// when `rows <= cols`; callers discard pairs they consider invalid.
pub fn max_weight_assignment(weights: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    // Square minimization with potentials (Kuhn-Munkres, O(n^3)).
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| if i < rows && j < cols { -weights[i * cols + j] } else { 0.0 };
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        if p[j] >= 1 && p[j] <= rows && j <= cols {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Additive counts; sequences are combined by summing these.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub num_gt: usize,
    pub num_hyp: usize,
    pub matches: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub idtp: usize,
}

impl std::ops::AddAssign for EvalCounts {
    fn add_assign(&mut self, o: Self) {
        self.num_gt += o.num_gt;
        self.num_hyp += o.num_hyp;
        self.matches += o.matches;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.ids += o.ids;
        self.idtp += o.idtp;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub num_gt: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub mota: f64,
    pub idf1: f64,
}

impl EvalCounts {
    pub fn report(&self) -> Result<EvalReport> {
        if self.num_gt == 0 {
            return Err(Error::NoGroundTruth);
        }
        let errors = (self.fp + self.fn_ + self.ids) as i64;
        let mota = 1.0 - errors as f64 / self.num_gt as f64;
        let idf1 = 2.0 * self.idtp as f64 / (self.num_gt + self.num_hyp) as f64;
        Ok(EvalReport { num_gt: self.num_gt, fp: self.fp, fn_: self.fn_, ids: self.ids, mota, idf1 })
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_gt={}", self.num_gt);
        let _ = writeln!(s, "fp={}", self.fp);
        let _ = writeln!(s, "fn={}", self.fn_);
        let _ = writeln!(s, "ids={}", self.ids);
        let _ = writeln!(s, "mota={:.6}", self.mota);
        let _ = writeln!(s, "idf1={:.6}", self.idf1);
        s
    }
}

fn by_frame(rows: &[MotRow]) -> BTreeMap<u32, Vec<&MotRow>> {
    let mut m: BTreeMap<u32, Vec<&MotRow>> = BTreeMap::new();
    for r in rows {
        m.entry(r.frame).or_default().push(r);
    }
    for v in m.values_mut() {
        v.sort_by_key(|r| r.id);
    }
    m
}

/// Frame-level matching step shared with the brute-force oracle in tests:
/// carries over still-valid previous matches, then solves the remainder.
fn frame_matches(
    gt: &[&MotRow],
    hyp: &[&MotRow],
    last: &HashMap<u32, u32>,
    thr: f64,
    solve: impl Fn(&[f64], usize, usize) -> Vec<Option<usize>>,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut gt_used = vec![false; gt.len()];
    let mut hyp_used = vec![false; hyp.len()];
    for (gi, g) in gt.iter().enumerate() {
        let Some(&hid) = last.get(&g.id) else { continue };
        if let Some(hi) = hyp.iter().position(|h| h.id == hid) {
            if !hyp_used[hi] && g.iou(hyp[hi]) >= thr {
                gt_used[gi] = true;
                hyp_used[hi] = true;
                pairs.push((gi, hi));
            }
        }
    }
    let gfree: Vec<usize> = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    let hfree: Vec<usize> = (0..hyp.len()).filter(|&i| !hyp_used[i]).collect();
    let mut w = vec![0.0; gfree.len() * hfree.len()];
    for (a, &gi) in gfree.iter().enumerate() {
        for (b, &hi) in hfree.iter().enumerate() {
            let iou = gt[gi].iou(hyp[hi]);
            if iou >= thr {
                w[a * hfree.len() + b] = iou;
            }
        }
    }
    for (a, m) in solve(&w, gfree.len(), hfree.len()).into_iter().enumerate() {
        if let Some(b) = m {
            if w[a * hfree.len() + b] > 0.0 {
                pairs.push((gfree[a], hfree[b]));
            }
        }
    }
    pairs
}

fn evaluate_with(gt: &[MotRow], hyp: &[MotRow], thr: f64, solve: impl Fn(&[f64], usize, usize) -> Vec<Option<usize>>) -> EvalCounts {
    let (gf, hf) = (by_frame(gt), by_frame(hyp));
    let frames: BTreeSet<u32> = gf.keys().chain(hf.keys()).copied().collect();
    let mut c = EvalCounts { num_gt: gt.len(), num_hyp: hyp.len(), ..Default::default() };
    let mut last: HashMap<u32, u32> = HashMap::new();
    // Identity overlap counts for the global matching.
    let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
    let empty = Vec::new();
    for f in frames {
        let g = gf.get(&f).unwrap_or(&empty);
        let h = hf.get(&f).unwrap_or(&empty);
        let pairs = frame_matches(g, h, &last, thr, &solve);
        for &(gi, hi) in &pairs {
            let (gid, hid) = (g[gi].id, h[hi].id);
            if last.get(&gid).is_some_and(|&p| p != hid) {
                c.ids += 1;
            }
            last.insert(gid, hid);
        }
        c.matches += pairs.len();
        c.fp += h.len() - pairs.len();
        c.fn_ += g.len() - pairs.len();
        for a in g {
            for b in h {
                if a.iou(b) >= thr {
                    *overlap.entry((a.id, b.id)).or_default() += 1;
                }
            }
        }
    }
    let gids: Vec<u32> = gt.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let hids: Vec<u32> = hyp.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let mut w = vec![0.0; gids.len() * hids.len()];
    for (a, gid) in gids.iter().enumerate() {
        for (b, hid) in hids.iter().enumerate() {
            w[a * hids.len() + b] = overlap.get(&(*gid, *hid)).copied().unwrap_or(0) as f64;
        }
    }
    c.idtp = solve(&w, gids.len(), hids.len()).into_iter().enumerate().filter_map(|(a, m)| m.map(|b| w[a * hids.len() + b] as usize)).sum();
    c
}

/// Counts for one sequence.
pub fn evaluate_counts(gt: &[MotRow], hyp: &[MotRow], iou_threshold: f64) -> EvalCounts {
    evaluate_with(gt, hyp, iou_threshold, max_weight_assignment)
}

pub fn evaluate(gt: &[MotRow], hyp: &[MotRow], iou_threshold: f64) -> Result<EvalReport> {
    evaluate_counts(gt, hyp, iou_threshold).report()
}
