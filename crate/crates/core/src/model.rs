//! The full dual-branch detector and its per-frame online step.

use candle_core::{DType, Tensor};

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::maskbranch::{MaskBranch, MaskMemoryBank, MaskMemoryEntry, MaskOutput, PointPrompt};
use crate::memory::BankEntry;
use crate::nn::{BilinearResize, VarStore};
use crate::pointbranch::{mean_background_offset, FlowField, Offset, PointBranch, PointMemoryBank, PointMemoryEntry, PointOutput, PointPrediction};
use crate::rng::SeededRng;
use crate::types::{BinaryMask, ImageFrame};

pub const SEGMENTS: [&str; 3] = ["backbone", "maskbranch", "pointbranch"];

/// Which part of the graph a forward pass keeps differentiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Step A: encoder and mask branch live, point outputs constant.
    Mask,
    /// Step B: point branch live, encoder and mask outputs constant.
    Point,
    /// Everything constant; bank entries are cut from the graph each frame.
    Infer,
}

/// Per-clip online state.
#[derive(Debug, Clone)]
pub struct Stream {
    pub mask_bank: MaskMemoryBank,
    pub point_bank: PointMemoryBank,
}

impl Stream {
    pub fn new(capacity: usize) -> Self {
        Self {
            mask_bank: MaskMemoryBank::new(capacity),
            point_bank: PointMemoryBank::new(capacity),
        }
    }

    pub fn reset(&mut self) {
        self.mask_bank.reset();
        self.point_bank.reset();
    }

    pub fn footprint(&self) -> usize {
        self.mask_bank.footprint() + self.point_bank.footprint()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub frame: &'a ImageFrame,
    /// Flow from the previous frame into this one.
    pub flow: Option<&'a FlowField>,
    /// Ground-truth mask used in the offset computation instead of the
    /// prediction (teacher forcing).
    pub forced_mask: Option<&'a BinaryMask>,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub mask: MaskOutput,
    pub point: PointOutput,
    pub prediction: PointPrediction,
    pub offset: Offset,
}

#[derive(Debug, Clone)]
pub struct BleedNet {
    pub config: ModelConfig,
    pub store: VarStore,
    pub backbone: Backbone,
    pub mask: MaskBranch,
    pub point: PointBranch,
    edge_up: BilinearResize,
}

impl BleedNet {
    pub fn new(config: &ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = VarStore::new(dtype, SeededRng::new(config.seed).split("model"));
        let root = store.root();
        let backbone = Backbone::new(&root.pp("backbone"), config)?;
        let mask = MaskBranch::new(&root.pp("maskbranch"), config)?;
        let point = PointBranch::new(&root.pp("pointbranch"), config)?;
        let (r, q) = (config.input_resolution, config.input_resolution / 4);
        let edge_up = BilinearResize::new((q, q), (r, r), dtype, store.device())?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            mask,
            point,
            edge_up,
        })
    }

    /// Edge logits resampled from stride 4 to the input resolution.
    pub fn edge_to_full(&self, edge_logits: &Tensor) -> Result<Tensor> {
        self.edge_up.forward(edge_logits)
    }

    pub fn new_stream(&self) -> Stream {
        Stream::new(self.config.memory_capacity)
    }

    pub fn position_encoding(&self) -> &Tensor {
        self.backbone.position_encoding()
    }

    /// Processes one frame: point branch against the banks of earlier
    /// frames, mask branch prompted by that point, background offset, then
    /// both banks are updated.
    pub fn step(&self, stream: &mut Stream, input: FrameInput<'_>, phase: Phase) -> Result<FrameOutput> {
        let frame = input.frame;
        let feats = self.backbone.encode(frame)?;
        let frozen = feats.detach();
        let pos = self.position_encoding();

        let point_feats = if phase == Phase::Infer { &feats } else { &frozen };
        let point = self.point.forward(point_feats, pos, &stream.point_bank, &stream.mask_bank)?;
        let prediction = point.decoded.prediction(frame.frame_index)?;
        let prompt = PointPrompt {
            coord: prediction.coord,
            score: prediction.score,
        };

        let mask_feats = if phase == Phase::Point { &frozen } else { &feats };
        let mask = self.mask.forward(mask_feats, pos, &stream.mask_bank, Some(prompt))?;

        let offset_mask = input.forced_mask.unwrap_or(&mask.mask);
        let offset = match input.flow {
            Some(flow) => mean_background_offset(flow, offset_mask, self.config.offset_normalization)?,
            None => Offset::zero(frame.frame_index),
        };
        let offset = Offset {
            frame_index: frame.frame_index,
            ..offset
        };

        let mut mask_entry = MaskMemoryEntry {
            memory: mask.memory.clone(),
            mask: mask.mask.clone(),
            frame_index: frame.frame_index,
        };
        let mut point_entry = PointMemoryEntry {
            memory: point.memory.clone(),
            offset,
            frame_index: frame.frame_index,
        };
        match phase {
            Phase::Mask => point_entry = point_entry.detached(),
            Phase::Point => mask_entry = mask_entry.detached(),
            Phase::Infer => {
                mask_entry = mask_entry.detached();
                point_entry = point_entry.detached();
            }
        }
        stream.mask_bank.push(mask_entry)?;
        stream.point_bank.push(point_entry)?;

        Ok(FrameOutput {
            mask,
            point,
            prediction,
            offset,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_clip, MotionProfile, SynthSpec};
    use crate::nn::hash_tensors;
    use crate::pointbranch::FlowSource;
    use crate::train::step::PreparedClip;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_resolution: 32,
            channels: 16,
            channels_f1: 8,
            channels_f2: 8,
            num_heads: 2,
            decoder_depth: 1,
            ..ModelConfig::default()
        }
    }

    fn clip(cfg: &ModelConfig) -> PreparedClip {
        let mut rng = SeededRng::new(8);
        let spec = SynthSpec::from_profile(MotionProfile::Translate, 5, (32, 32), &mut rng);
        let (c, f) = synth_clip(&spec, "m", &mut rng).unwrap();
        PreparedClip::new(&c, cfg, &FlowSource::Injected(f), DType::F32).unwrap()
    }

    fn run(model: &BleedNet, clip: &PreparedClip) -> Vec<(Vec<f32>, [f64; 2], f64)> {
        let mut stream = model.new_stream();
        (0..clip.clip.len())
            .map(|k| {
                let input = FrameInput {
                    frame: &clip.clip.frames[k].0,
                    flow: clip.flow_into(k),
                    forced_mask: None,
                };
                let o = model.step(&mut stream, input, Phase::Infer).unwrap();
                let logits = o.mask.logits.flatten_all().unwrap().to_vec1().unwrap();
                (logits, o.prediction.coord, o.offset.dx)
            })
            .collect()
    }

    #[test]
    fn same_seed_same_weights_and_outputs() {
        let c = cfg();
        let (a, b) = (BleedNet::new(&c, DType::F32).unwrap(), BleedNet::new(&c, DType::F32).unwrap());
        assert_eq!(
            hash_tensors(&a.store.tensors()).unwrap(),
            hash_tensors(&b.store.tensors()).unwrap()
        );
        let p = clip(&c);
        assert_eq!(run(&a, &p), run(&b, &p));
        let other = BleedNet::new(&ModelConfig { seed: 1, ..c }, DType::F32).unwrap();
        assert_ne!(
            hash_tensors(&a.store.tensors()).unwrap(),
            hash_tensors(&other.store.tensors()).unwrap()
        );
    }

    #[test]
    fn first_frame_has_zero_offset_and_shapes_match() {
        let c = cfg();
        let model = BleedNet::new(&c, DType::F32).unwrap();
        let p = clip(&c);
        let out = run(&model, &p);
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].2, 0.0);
        assert!(out.iter().all(|(l, xy, _)| l.len() == 32 * 32 && xy.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn phases_detach_the_other_branch_bank() {
        let c = cfg();
        let model = BleedNet::new(&c, DType::F32).unwrap();
        let p = clip(&c);
        let input = FrameInput {
            frame: &p.clip.frames[0].0,
            flow: None,
            forced_mask: None,
        };
        let mut s = model.new_stream();
        model.step(&mut s, input, Phase::Mask).unwrap();
        let m = s.mask_bank.entries().next().unwrap().memory.clone();
        let q = s.point_bank.entries().next().unwrap().memory.clone();
        let g = m.sum_all().unwrap().backward().unwrap();
        assert!(model.store.vars().iter().any(|(n, v)| n.starts_with("maskbranch.") && g.get(v.as_tensor()).is_some()));
        let g = q.sum_all().unwrap().backward().unwrap();
        assert!(model.store.vars().values().all(|v| g.get(v.as_tensor()).is_none()));
    }
}
