//! The full network and its per-frame online inference step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ata::{decode_offsets, AtaConfig, OffsetField, RefinedFeatureMap, SimilarityHead, Tsca};
use crate::error::{Error, Result};
use crate::fmr::{flow_agnostic_offset, gate_previous_features, pool_center_heatmap, Fuser, MemoryMode, OffsetMemory, Propagator};
use crate::head::{Head, HeadConfig, HeadOutput};
use crate::nn::{Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tfe::{prepare_frame, Tfe, TfeConfig};

/// Association grid stride.
pub const ASSOC_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub tfe: TfeConfig,
    pub ata: AtaConfig,
    pub head: HeadConfig,
    pub memory_mode: MemoryMode,
    /// Divides pooled cosine similarities before the soft-argmax.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tfe: TfeConfig::default(),
            ata: AtaConfig::default(),
            head: HeadConfig::default(),
            memory_mode: MemoryMode::Mean,
            temperature: 0.05,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tfe.widths.contains(&0) || self.tfe.feat_channels == 0 {
            return Err(Error::config("widths", "channel widths must be positive"));
        }
        if self.ata.channels == 0 || self.ata.attn_dim == 0 || self.ata.embed_dim == 0 {
            return Err(Error::config("ata_channels", "association widths must be positive"));
        }
        if self.head.num_classes == 0 || self.head.hidden == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub tfe: Tfe<T>,
    pub tsca: Tsca,
    pub sim: SimilarityHead,
    pub propagator: Propagator,
    pub fuser: Fuser,
    pub head: Head,
}

impl<T: Scalar> Model<T> {
    pub fn new(mut config: ModelConfig) -> Result<Self> {
        config.ata.in_channels = config.tfe.feat_channels;
        config.head.feat_channels = config.tfe.feat_channels;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let tfe = Tfe::new(&mut store, &mut rng, config.tfe.clone());
        let tsca = Tsca::new(&mut store, &mut rng, config.ata.clone());
        let sim = SimilarityHead::new(&mut store, &mut rng, &config.ata);
        let propagator = Propagator::new(&mut store, &mut rng, config.ata.channels, true);
        let fuser = Fuser::new(&mut store, config.tfe.feat_channels, config.ata.channels);
        let head = Head::new(&mut store, &mut rng, config.head.clone());
        Ok(Self { config, store, tfe, tsca, sim, propagator, fuser, head })
    }

    pub fn temperature(&self) -> T {
        T::of(self.config.temperature)
    }
}

/// What the online loop carries from one frame to the next.
#[derive(Clone, Debug)]
pub struct StreamState<T: Scalar> {
    pub frame_index: usize,
    pub feature: Tensor<T>,
    pub omega: RefinedFeatureMap<T>,
    /// Stride-8 class-agnostic center heatmap.
    pub center8: Tensor<T>,
    pub memory: OffsetMemory<T>,
    pub frame_hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct StepOutput<T: Scalar> {
    pub head: HeadOutput<T>,
    /// Backward displacements; `None` on the first frame.
    pub offsets: Option<OffsetField<T>>,
}

impl<T: Scalar> Model<T> {
    /// Processes the next frame (`[3, H, W]`, pixels in `[0, 1]`), updating
    /// `state` in place. Pass `None` state at sequence start.
    pub fn step(&self, state: &mut Option<StreamState<T>>, frame: &Tensor<T>) -> Result<StepOutput<T>> {
        let (_, fh, fw) = frame.chw();
        if let Some(s) = state {
            if s.frame_hw != (fh, fw) {
                return Err(Error::Shape(format!("frame size {fh}x{fw} changed mid-sequence from {:?}", s.frame_hw)));
            }
        }
        let index = state.as_ref().map_or(1, |s| s.frame_index + 1);
        let prepared = prepare_frame(frame)?;
        let mut g = Graph::new();
        let x = g.constant(prepared);
        let f = self.tfe.forward(&mut g, &self.store, x);
        let (_, h4, w4) = g.value(f).chw();
        let (h8, w8) = (h4.div_ceil(2), w4.div_ceil(2));
        let stride = T::of(ASSOC_STRIDE as f64);
        let (omega, offsets, propagated, memory) = match state.take() {
            None => {
                let omega = self.tsca.forward(&mut g, &self.store, f, f)?;
                let zeros = g.constant(Tensor::zeros(&[self.config.ata.channels, h8, w8]));
                let mut memory = OffsetMemory::new(h8, w8, self.config.memory_mode);
                memory.update(&OffsetField::zeros(h8, w8))?;
                (omega, None, zeros, memory)
            }
            Some(prev) => {
                let fp = g.constant(prev.feature);
                let omega = self.tsca.forward(&mut g, &self.store, fp, f)?;
                let op = g.constant(prev.omega.data.clone());
                let s = self.sim.forward(&mut g, &self.store, omega, op)?;
                let dec = decode_offsets(&mut g, s, h8, w8, stride, self.temperature());
                let o = OffsetField::from_tensor(g.value(dec.offsets));
                if !(o.ox.all_finite() && o.oy.all_finite()) {
                    return Err(Error::Numeric("non-finite association offsets".into()));
                }
                let mut memory = prev.memory;
                memory.update(&o)?;
                let big_omega = flow_agnostic_offset(&o, &memory.value())?;
                let gated = gate_previous_features(&prev.omega.data, &prev.center8)?;
                let hv = g.constant(gated);
                let ov = g.constant(big_omega.to_tensor());
                let propagated = self.propagator.forward(&mut g, &self.store, hv, ov);
                (omega, Some(o), propagated, memory)
            }
        };
        let fused = self.fuser.forward(&mut g, &self.store, f, propagated);
        let hv = self.head.forward(&mut g, &self.store, fused);
        let head = HeadOutput::from_vars(&g, &hv);
        if !head.class_heatmap.all_finite() {
            return Err(Error::Numeric("non-finite heatmap".into()));
        }
        *state = Some(StreamState {
            frame_index: index,
            feature: g.value(f).clone(),
            omega: RefinedFeatureMap { data: g.value(omega).clone(), stride: ASSOC_STRIDE },
            center8: pool_center_heatmap(&head.center_heatmap),
            memory,
            frame_hw: (fh, fw),
        });
        Ok(StepOutput { head, offsets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::rand_tensor;

    fn tiny() -> ModelConfig {
        ModelConfig {
            tfe: TfeConfig { widths: [4, 8, 8, 8], feat_channels: 8, ..TfeConfig::default() },
            ata: AtaConfig { channels: 8, attn_dim: 4, embed_dim: 8, ..AtaConfig::default() },
            head: HeadConfig { hidden: 4, num_classes: 2, ..HeadConfig::default() },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn streaming_shapes_and_state() {
        let model = Model::<f32>::new(tiny()).unwrap();
        let mut state = None;
        let frame = rand_tensor::<f32>(&[3, 40, 56], 1).map(|v| (v + 1.0) / 2.0);
        let first = model.step(&mut state, &frame).unwrap();
        assert!(first.offsets.is_none());
        assert_eq!(first.head.class_heatmap.shape(), &[2, 10, 14]);
        assert_eq!(state.as_ref().unwrap().memory.count, 1);
        let second = model.step(&mut state, &frame).unwrap();
        assert_eq!(second.offsets.unwrap().hw(), (5, 7));
        let s = state.as_ref().unwrap();
        assert_eq!((s.frame_index, s.memory.count, s.center8.shape()), (2, 2, &[5usize, 7][..]));
        let other = rand_tensor::<f32>(&[3, 48, 56], 1);
        assert!(model.step(&mut state, &other).is_err());
    }

    #[test]
    fn rejects_bad_temperature() {
        assert!(Model::<f32>::new(ModelConfig { temperature: 0.0, ..tiny() }).is_err());
    }
}
