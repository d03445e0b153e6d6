//! Flat `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment, unknown or repeated keys are
//! errors. [`RunConfig::to_text`] writes every key, so a resolved file
//! reproduces the run exactly.

use std::collections::HashSet;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data_synth::{NoiseSpec, SequenceConfig, Tier};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;

/// Name of the resolved config written beside every output.
pub const RESOLVED_NAME: &str = "config.resolved.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub sequence: SequenceConfig,
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// Difficulty tiers rendered for the test split.
    pub tiers: Vec<Tier>,
    /// Extra single-corruption test variants.
    pub noise: Vec<NoiseSpec>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub seed: u64,
    /// Seed for initialisation and training; defaults to `seed`.
    pub train_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sequence: SequenceConfig::default(),
            train_sequences: 4,
            test_sequences: 2,
            tiers: Tier::ALL.to_vec(),
            noise: Vec::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            seed: 0,
            train_seed: None,
        }
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid number {v:?}"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none").map(|s| s.parse().map_err(|e: T::Err| e.to_string())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    if items.is_empty() {
        "none".into()
    } else {
        items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let s = &mut self.sequence;
        let m = &mut self.model;
        let t = &mut self.train;
        let k = &mut self.tracker;
        match key {
            "width" => s.width = num(v)?,
            "height" => s.height = num(v)?,
            "num_frames" => s.num_frames = num(v)?,
            "num_classes" => s.num_classes = num(v)?,
            "spawn_rate" => s.spawn_rate = num(v)?,
            "flow_velocity" => s.flow_velocity = num(v)?,
            "jitter_sigma" => s.jitter_sigma = num(v)?,
            "size_min" => s.size_range.0 = num(v)?,
            "size_max" => s.size_range.1 = num(v)?,
            "impurity_density" => s.impurity_density = num(v)?,
            "train_sequences" => self.train_sequences = num(v)?,
            "test_sequences" => self.test_sequences = num(v)?,
            "tiers" => self.tiers = list(v)?,
            "noise" => self.noise = list(v)?,
            "widths" => {
                let w: Vec<usize> = list(v)?;
                m.tfe.widths = w.try_into().map_err(|_| "expected four comma-separated widths".to_string())?;
            }
            "feat_channels" => m.tfe.feat_channels = num(v)?,
            "srm_mode" => m.tfe.srm_mode = v.parse()?,
            "ata_channels" => m.ata.channels = num(v)?,
            "attn_dim" => m.ata.attn_dim = num(v)?,
            "embed_dim" => m.ata.embed_dim = num(v)?,
            "head_hidden" => m.head.hidden = num(v)?,
            "memory_mode" => m.memory_mode = v.parse().map_err(|e: Error| e.to_string())?,
            "temperature" => m.temperature = num(v)?,
            "epochs" => t.epochs = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "lr" => t.lr = num(v)?,
            "decay_epochs" => t.decay_epochs = list(v)?,
            "lr_decay" => t.decay_factor = num(v)?,
            "cva_weight" => t.cva_weight = num(v)?,
            "size_weight" => t.det_weights.size = num(v)?,
            "offset_weight" => t.det_weights.offset = num(v)?,
            "grad_clip" => t.grad_clip = num(v)?,
            "samples_per_epoch" => t.samples_per_epoch = num(v)?,
            "flip_prob" => t.flip_prob = num(v)?,
            "affine_prob" => t.affine_prob = num(v)?,
            "teacher_forcing" => t.teacher_forcing = v.parse().map_err(|_| format!("expected true or false, got {v:?}"))?,
            "score_threshold" => k.score_threshold = num(v)?,
            "gate_radius" => k.gate_radius = num(v)?,
            "max_age" => k.max_age = num(v)?,
            "min_hits" => k.min_hits = num(v)?,
            "seed" => self.seed = num(v)?,
            "train_seed" => self.train_seed = if v == "none" { None } else { Some(num(v)?) },
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let (s, m, t, k) = (&self.sequence, &self.model, &self.train, &self.tracker);
        vec![
            ("seed", self.seed.to_string()),
            ("train_seed", self.train_seed.map_or("none".into(), |s| s.to_string())),
            ("width", s.width.to_string()),
            ("height", s.height.to_string()),
            ("num_frames", s.num_frames.to_string()),
            ("num_classes", s.num_classes.to_string()),
            ("spawn_rate", s.spawn_rate.to_string()),
            ("flow_velocity", s.flow_velocity.to_string()),
            ("jitter_sigma", s.jitter_sigma.to_string()),
            ("size_min", s.size_range.0.to_string()),
            ("size_max", s.size_range.1.to_string()),
            ("impurity_density", s.impurity_density.to_string()),
            ("train_sequences", self.train_sequences.to_string()),
            ("test_sequences", self.test_sequences.to_string()),
            ("tiers", join(&self.tiers)),
            ("noise", join(&self.noise)),
            ("widths", join(&m.tfe.widths)),
            ("feat_channels", m.tfe.feat_channels.to_string()),
            ("srm_mode", m.tfe.srm_mode.to_string()),
            ("ata_channels", m.ata.channels.to_string()),
            ("attn_dim", m.ata.attn_dim.to_string()),
            ("embed_dim", m.ata.embed_dim.to_string()),
            ("head_hidden", m.head.hidden.to_string()),
            ("memory_mode", m.memory_mode.to_string()),
            ("temperature", m.temperature.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("decay_epochs", join(&t.decay_epochs)),
            ("lr_decay", t.decay_factor.to_string()),
            ("cva_weight", t.cva_weight.to_string()),
            ("size_weight", t.det_weights.size.to_string()),
            ("offset_weight", t.det_weights.offset.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("samples_per_epoch", t.samples_per_epoch.to_string()),
            ("flip_prob", t.flip_prob.to_string()),
            ("affine_prob", t.affine_prob.to_string()),
            ("teacher_forcing", t.teacher_forcing.to_string()),
            ("score_threshold", k.score_threshold.to_string()),
            ("gate_radius", k.gate_radius.to_string()),
            ("max_age", k.max_age.to_string()),
            ("min_hits", k.min_hits.to_string()),
        ]
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::config(format!("{origin}:{}", n + 1), reason);
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            self.set(key, value).map_err(|reason| err(format!("{key}: {reason}")))?;
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, origin)?;
        cfg.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Propagates shared settings into the component configs and validates.
    pub fn finish(mut self) -> Result<Self> {
        self.model.head.num_classes = self.sequence.num_classes;
        let train_seed = self.train_seed.unwrap_or(self.seed);
        self.model.seed = train_seed;
        self.train.seed = train_seed;
        self.sequence.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.finish()
    }

    pub fn validate(&self) -> Result<()> {
        self.sequence.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved phytrack configuration\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_NAME), self.to_text())?;
        Ok(())
    }

    /// Sequence config for the `index`-th sequence of a split. The split
    /// occupies the high bits so splits never share a sequence.
    pub fn sequence_for(&self, split_seed: u64, index: usize) -> SequenceConfig {
        let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(split_seed << 32).wrapping_add(index as u64);
        SequenceConfig { seed, ..self.sequence.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::NoiseLevel;
    use crate::fmr::MemoryMode;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("noise=occlusion:medium,salt_pepper:hard\nepochs=7\nmemory_mode=sum\nwidths=8,16,32,32\nseed=3", "t").unwrap();
        let cfg = cfg.finish().unwrap();
        let back = RunConfig::parse(&cfg.to_text(), "resolved").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.noise[1], NoiseSpec::preset("salt_pepper", NoiseLevel::Hard).unwrap());
        assert_eq!(back.model.memory_mode, MemoryMode::Sum);
        assert_eq!(back.train.seed, 3);
        let split = RunConfig::parse("seed=3\ntrain_seed=9", "t").unwrap();
        assert_eq!((split.sequence.seed, split.model.seed, split.train.seed), (3, 9, 9));
        assert_eq!(RunConfig::parse(&split.to_text(), "r").unwrap(), split);
    }

    #[test]
    fn splits_never_share_a_sequence() {
        let cfg = RunConfig::default();
        let mut seeds: Vec<u64> = (1..=2).flat_map(|split| (0..100).map(move |i| (split, i))).map(|(s, i)| cfg.sequence_for(s, i).seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 200);
    }

    #[test]
    fn every_written_key_is_accepted() {
        let cfg = RunConfig::default();
        for (k, v) in cfg.entries() {
            let mut c = RunConfig::default();
            c.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn rejects_unknown_duplicate_and_invalid() {
        let e = RunConfig::parse("# c\nepochs=3\nlearning_rate=1", "cfg.txt").unwrap_err().to_string();
        assert!(e.contains("cfg.txt") && e.contains("learning_rate") && e.contains('3'), "{e}");
        assert!(RunConfig::parse("epochs=3\nepochs=4", "x").unwrap_err().to_string().contains("duplicate"));
        assert!(RunConfig::parse("width=10", "x").unwrap_err().to_string().contains("width"));
        assert!(RunConfig::parse("epochs", "x").is_err());
        assert_eq!(RunConfig::parse("decay_epochs=none\ntiers=easy", "x").unwrap().train.decay_epochs, Vec::<usize>::new());
    }
}
