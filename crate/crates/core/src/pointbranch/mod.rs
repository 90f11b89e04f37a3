//! Point branch: camera-motion aware bleeding point localization.

pub mod decoder;
pub mod flow;
pub mod memory;
pub mod offset;

use candle_core::Tensor;

use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::maskbranch::MaskMemoryBank;
use crate::memory::MemoryAttention;
use crate::nn::{LayerNorm, Linear, Vb};

pub use decoder::{PointDecoder, PointDecoderOutput, PointPrediction};
pub use flow::{FlowField, FlowSource};
pub use memory::{build_reference_features, OffsetEmbedding, PointMemoryBank, PointMemoryEntry};
pub use offset::{mean_background_offset, Offset};

#[derive(Debug, Clone)]
pub struct PointOutput {
    pub decoded: PointDecoderOutput,
    /// `M^p_k`.
    pub memory: Tensor,
}

#[derive(Debug, Clone)]
pub struct PointBranch {
    pub attention: MemoryAttention,
    pub offset_embed: OffsetEmbedding,
    pub decoder: PointDecoder,
    memory_proj: Linear,
    memory_norm: LayerNorm,
    use_memory: bool,
}

impl PointBranch {
    pub fn new(vb: &Vb, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            attention: MemoryAttention::new(&vb.pp("memory_attention"), c, cfg.num_heads)?,
            offset_embed: OffsetEmbedding::new(&vb.pp("offset_embed"), c, 16)?,
            decoder: PointDecoder::new(&vb.pp("decoder"), cfg)?,
            memory_proj: Linear::new(&vb.pp("memory_proj"), c, c, true)?,
            memory_norm: LayerNorm::new(&vb.pp("memory_norm"), c)?,
            use_memory: cfg.point_memory,
        })
    }

    /// `F_point` from the current features and both banks.
    pub fn attend(
        &self,
        f: &FeaturePyramid,
        pos: &Tensor,
        point_bank: &PointMemoryBank,
        mask_bank: &MaskMemoryBank,
    ) -> Result<Tensor> {
        let reference = if self.use_memory {
            build_reference_features(point_bank, mask_bank, &self.offset_embed, pos)?
        } else {
            None
        };
        match &reference {
            Some((r, rp)) => self.attention.forward(&f.f, pos, Some((r, rp))),
            None => self.attention.forward(&f.f, pos, None),
        }
    }

    pub fn forward(
        &self,
        f: &FeaturePyramid,
        pos: &Tensor,
        point_bank: &PointMemoryBank,
        mask_bank: &MaskMemoryBank,
    ) -> Result<PointOutput> {
        let f_point = self.attend(f, pos, point_bank, mask_bank)?;
        let decoded = self.decoder.forward(&f_point, pos)?;
        let memory = self.memory_norm.forward(&self.memory_proj.forward(&f_point)?)?;
        Ok(PointOutput { decoded, memory })
    }
}
