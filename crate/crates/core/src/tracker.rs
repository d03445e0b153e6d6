//! Online tracking loop: detection, offset-guided greedy association and
//! track lifecycle.

use crate::ata::OffsetField;
use crate::data_synth::SequenceConfig;
use crate::error::{Error, Result};
use crate::head::{decode, Detection};
use crate::model::{Model, StreamState, ASSOC_STRIDE};
use crate::mot::MotRow;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub score_threshold: f64,
    /// Largest distance, pixels, between a detection's predicted previous
    /// position and a track's last center.
    pub gate_radius: f64,
    /// Consecutive misses after which a track is retired.
    pub max_age: usize,
    /// Matches needed before a track is reported.
    pub min_hits: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { score_threshold: 0.4, gate_radius: 2.5 * SequenceConfig::default().mean_object_diagonal(), max_age: 5, min_hits: 2 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::config("score_threshold", "must lie in (0, 1)"));
        }
        if !(self.gate_radius > 0.0 && self.gate_radius.is_finite()) {
            return Err(Error::config("gate_radius", "must be positive"));
        }
        if self.max_age == 0 {
            return Err(Error::config("max_age", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub track_id: u32,
    pub last_box: [f64; 4],
    pub last_center: (f64, f64),
    pub class_votes: Vec<usize>,
    pub miss_count: usize,
    pub hits: usize,
    /// `(frame, box, score)`
    pub history: Vec<(usize, [f64; 4], f64)>,
}

impl TrackState {
    /// Most voted class; ties go to the lower id.
    pub fn class_id(&self) -> usize {
        let mut best = 0;
        for (c, &v) in self.class_votes.iter().enumerate() {
            if v > self.class_votes[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Association {
    /// `(detection, track)` index pairs in the order they were taken.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

/// Where a detection was one frame earlier according to the offsets.
pub fn predicted_previous<T: Scalar>(center: (f64, f64), offsets: Option<&OffsetField<T>>) -> (f64, f64) {
    let Some(o) = offsets else { return center };
    let (h, w) = o.hw();
    let s = ASSOC_STRIDE as f64;
    let i = ((center.1 / s).floor().max(0.0) as usize).min(h - 1);
    let j = ((center.0 / s).floor().max(0.0) as usize).min(w - 1);
    let (ox, oy) = o.at(i, j);
    (center.0 + ox.as_f64(), center.1 + oy.as_f64())
}

/// Greedy matching by ascending distance between offset-predicted previous
/// positions and track centers, within `gate_radius`.
pub fn associate<T: Scalar>(dets: &[Detection], tracks: &[TrackState], offsets: Option<&OffsetField<T>>, gate_radius: f64) -> Association {
    let mut pairs = Vec::new();
    for (d, det) in dets.iter().enumerate() {
        let p = predicted_previous(det.center, offsets);
        for (t, tr) in tracks.iter().enumerate() {
            let dist = ((p.0 - tr.last_center.0).powi(2) + (p.1 - tr.last_center.1).powi(2)).sqrt();
            if dist <= gate_radius {
                pairs.push((dist, d, t));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; dets.len()];
    let mut track_used = vec![false; tracks.len()];
    let mut out = Association::default();
    for (_, d, t) in pairs {
        if !det_used[d] && !track_used[t] {
            det_used[d] = true;
            track_used[t] = true;
            out.matches.push((d, t));
        }
    }
    out.unmatched_dets = (0..dets.len()).filter(|&d| !det_used[d]).collect();
    out.unmatched_tracks = (0..tracks.len()).filter(|&t| !track_used[t]).collect();
    out
}

/// A confirmed track observed in the current frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportedTrack {
    pub frame: usize,
    pub track_id: u32,
    pub bbox: [f64; 4],
    pub score: f64,
    pub class_id: usize,
}

impl ReportedTrack {
    pub fn to_row(&self) -> MotRow {
        MotRow {
            frame: self.frame as u32,
            id: self.track_id,
            left: self.bbox[0],
            top: self.bbox[1],
            width: self.bbox[2],
            height: self.bbox[3],
            conf: self.score,
            class: self.class_id as i32,
            visibility: -1.0,
        }
    }
}

pub struct Tracker<'m, T: Scalar> {
    pub config: TrackerConfig,
    model: &'m Model<T>,
    stream: Option<StreamState<T>>,
    tracks: Vec<TrackState>,
    next_id: u32,
    last_frame: usize,
}

impl<'m, T: Scalar> Tracker<'m, T> {
    pub fn new(model: &'m Model<T>, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, model, stream: None, tracks: Vec::new(), next_id: 1, last_frame: 0 })
    }

    pub fn tracks(&self) -> &[TrackState] {
        &self.tracks
    }

    /// Processes frame `frame_index` (1-based, strictly increasing).
    pub fn step(&mut self, frame_index: usize, frame: &Tensor<T>) -> Result<Vec<ReportedTrack>> {
        if frame_index <= self.last_frame {
            return Err(Error::Data(format!("frame {frame_index} arrived after frame {}", self.last_frame)));
        }
        let (_, h, w) = frame.chw();
        let out = self.model.step(&mut self.stream, frame)?;
        let dets = decode(&out.head, self.config.score_threshold, w, h)?;
        self.last_frame = frame_index;
        Ok(self.update(frame_index, &dets, out.offsets.as_ref()))
    }

    /// Lifecycle update with already-decoded detections.
    pub fn update(&mut self, frame: usize, dets: &[Detection], offsets: Option<&OffsetField<T>>) -> Vec<ReportedTrack> {
        let assoc = associate(dets, &self.tracks, offsets, self.config.gate_radius);
        let num_classes = self.model.config.head.num_classes;
        let mut observed = Vec::new();
        for &(d, t) in &assoc.matches {
            let (det, tr) = (&dets[d], &mut self.tracks[t]);
            tr.last_box = det.bbox;
            tr.last_center = det.center;
            tr.class_votes[det.class_id] += 1;
            tr.miss_count = 0;
            tr.hits += 1;
            tr.history.push((frame, det.bbox, det.score));
            observed.push((t, det.score));
        }
        for &t in &assoc.unmatched_tracks {
            self.tracks[t].miss_count += 1;
        }
        for &d in &assoc.unmatched_dets {
            let det = &dets[d];
            if det.score < self.config.score_threshold {
                continue;
            }
            let mut votes = vec![0; num_classes];
            votes[det.class_id] += 1;
            self.tracks.push(TrackState {
                track_id: self.next_id,
                last_box: det.bbox,
                last_center: det.center,
                class_votes: votes,
                miss_count: 0,
                hits: 1,
                history: vec![(frame, det.bbox, det.score)],
            });
            observed.push((self.tracks.len() - 1, det.score));
            self.next_id += 1;
        }
        let mut reported: Vec<ReportedTrack> = observed
            .into_iter()
            .filter(|&(t, _)| self.tracks[t].hits >= self.config.min_hits)
            .map(|(t, score)| {
                let tr = &self.tracks[t];
                ReportedTrack { frame, track_id: tr.track_id, bbox: tr.last_box, score, class_id: tr.class_id() }
            })
            .collect();
        reported.sort_by_key(|r| r.track_id);
        let max_age = self.config.max_age;
        self.tracks.retain(|t| t.miss_count < max_age);
        reported
    }
}

/// Tracks a whole sequence of `[3, H, W]` frames, returning MOT rows.
pub fn track_frames<T: Scalar>(model: &Model<T>, config: &TrackerConfig, frames: &[Tensor<T>]) -> Result<Vec<MotRow>> {
    let mut tracker = Tracker::new(model, config.clone())?;
    let mut rows = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        rows.extend(tracker.step(i + 1, f)?.iter().map(ReportedTrack::to_row));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ata::AtaConfig;
    use crate::head::HeadConfig;
    use crate::model::ModelConfig;
    use crate::tfe::TfeConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64, y: f64) -> Detection {
        Detection { bbox: [x - 5.0, y - 5.0, 10.0, 10.0], score: 0.9, class_id: 0, center: (x, y) }
    }

    fn track(id: u32, x: f64, y: f64) -> TrackState {
        TrackState { track_id: id, last_box: [x - 5.0, y - 5.0, 10.0, 10.0], last_center: (x, y), class_votes: vec![1], miss_count: 0, hits: 1, history: vec![] }
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
    fn in_gate_and_out_of_gate() {
        let tracks = [track(1, 50.0, 50.0)];
        let mut o = OffsetField::<f64>::zeros(8, 8);
        o.ox.data_mut().fill(-2.0);
        let a = associate(&[det(54.0, 50.0)], &tracks, Some(&o), 30.0);
        assert_eq!(a.matches, vec![(0, 0)]);
        let a = associate(&[det(150.0, 50.0)], &tracks, None::<&OffsetField<f64>>, 30.0);
        assert_eq!((a.matches.len(), a.unmatched_dets.clone(), a.unmatched_tracks.clone()), (0, vec![0], vec![0]));
    }

    #[test]
    fn greedy_takes_the_globally_closest_pair_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let dets: Vec<_> = (0..3).map(|_| det(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0))).collect();
            let tracks: Vec<_> = (0..3).map(|i| track(i + 1, rng.random_range(0.0..40.0), rng.random_range(0.0..40.0))).collect();
            let a = associate(&dets, &tracks, None::<&OffsetField<f64>>, 100.0);
            let dist = |d: usize, t: usize| ((dets[d].center.0 - tracks[t].last_center.0).powi(2) + (dets[d].center.1 - tracks[t].last_center.1).powi(2)).sqrt();
            let mut best = (f64::MAX, 0, 0);
            for d in 0..3 {
                for t in 0..3 {
                    if dist(d, t) < best.0 {
                        best = (dist(d, t), d, t);
                    }
                }
            }
            assert_eq!(a.matches[0], (best.1, best.2));
            assert_eq!(a.matches.len(), 3);
        }
    }

    #[test]
    fn static_object_keeps_its_id() {
        let model = tiny_model();
        let mut tr = Tracker::new(&model, TrackerConfig { min_hits: 1, ..TrackerConfig::default() }).unwrap();
        let o = OffsetField::<f32>::zeros(4, 4);
        let mut ids = Vec::new();
        for f in 1..=3 {
            let rep = tr.update(f, &[det(20.0, 20.0)], if f > 1 { Some(&o) } else { None });
            ids.extend(rep.iter().map(|r| r.track_id));
        }
        assert_eq!(ids, vec![1, 1, 1]);
        assert_eq!(tr.tracks()[0].history.len(), 3);
        assert!(tr.update(4, &[], Some(&o)).is_empty());
    }

    #[test]
    fn lifecycle_hits_and_age() {
        let model = tiny_model();
        let mut tr = Tracker::new(&model, TrackerConfig { max_age: 2, ..TrackerConfig::default() }).unwrap();
        assert!(tr.update(1, &[det(20.0, 20.0)], None::<&OffsetField<f32>>).is_empty());
        assert_eq!(tr.update(2, &[det(21.0, 20.0)], None::<&OffsetField<f32>>)[0].track_id, 1);
        tr.update(3, &[], None::<&OffsetField<f32>>);
        assert_eq!(tr.tracks().len(), 1);
        tr.update(4, &[], None::<&OffsetField<f32>>);
        assert!(tr.tracks().is_empty());
        // A new detection at the same place gets a fresh id.
        tr.update(5, &[det(21.0, 20.0)], None::<&OffsetField<f32>>);
        assert_eq!(tr.tracks()[0].track_id, 2);
    }

    #[test]
    fn frames_must_advance() {
        let model = tiny_model();
        let mut tr = Tracker::new(&model, TrackerConfig::default()).unwrap();
        let frame = Tensor::full(&[3, 32, 32], 0.5f32);
        tr.step(1, &frame).unwrap();
        assert!(tr.step(1, &frame).is_err());
        assert!(Tracker::new(&model, TrackerConfig { score_threshold: 1.0, ..TrackerConfig::default() }).is_err());
    }

    #[test]
    fn majority_vote() {
        let mut t = track(1, 0.0, 0.0);
        t.class_votes = vec![1, 3, 3, 0];
        assert_eq!(t.class_id(), 1);
    }
}
