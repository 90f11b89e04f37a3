//! Mask branch: memory attention, edge generator, prompt encoding, mask
//! decoding and mask memory encoding.

pub mod decoder;
pub mod edge;
pub mod gabor;
pub mod memory;
pub mod prompt;

use candle_core::{DType, Tensor};
use ndarray::Array2;

use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{self, Vb};
use crate::types::BinaryMask;

pub use decoder::MaskDecoder;
pub use edge::{EdgeGenerator, EdgeOutput};
pub use memory::{MaskMemoryAttention, MaskMemoryBank, MaskMemoryEncoder, MaskMemoryEntry};
pub use prompt::{PointPrompt, PromptEncoder};

#[derive(Debug, Clone)]
pub struct MaskOutput {
    /// `(1, 1, H, W)` logits.
    pub logits: Tensor,
    /// `E_m`, `(1, 1, H/4, W/4)` logits.
    pub edge_logits: Tensor,
    pub mask: BinaryMask,
    /// `M^m_k`.
    pub memory: Tensor,
}

#[derive(Debug, Clone)]
pub struct MaskBranch {
    pub attention: MaskMemoryAttention,
    pub edge: EdgeGenerator,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    pub memory_encoder: MaskMemoryEncoder,
}

impl MaskBranch {
    pub fn new(vb: &Vb, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            attention: MaskMemoryAttention::new(
                &vb.pp("memory_attention"),
                c,
                cfg.num_heads,
                cfg.memory_capacity,
                cfg.temporal_embedding,
            )?,
            edge: EdgeGenerator::new(&vb.pp("edge"), cfg)?,
            prompt: PromptEncoder::new(&vb.pp("prompt"), c, cfg.existence_threshold)?,
            decoder: MaskDecoder::new(&vb.pp("decoder"), cfg)?,
            memory_encoder: MaskMemoryEncoder::new(&vb.pp("memory_encoder"), c)?,
        })
    }

    pub fn forward(
        &self,
        f: &FeaturePyramid,
        pos: &Tensor,
        bank: &MaskMemoryBank,
        point: Option<PointPrompt>,
    ) -> Result<MaskOutput> {
        let f_mask = self.attention.forward(f, pos, bank)?;
        let EdgeOutput { edge_logits, refined } = self.edge.forward(&f_mask, &f.f1, &f.f2)?;
        let e_p = nn::map_to_tokens(&self.prompt.encode_edge(&edge_logits)?)?;
        let p_p = self.prompt.encode_point(point)?;
        let image = ((f_mask + refined)? + e_p)?;
        let logits = self.decoder.forward(&image, pos, &p_p, &f.f1, &f.f2)?;
        let mask = binarize(&logits)?;
        let memory = self.memory_encoder.encode(f, &mask)?;
        Ok(MaskOutput {
            logits,
            edge_logits,
            mask,
            memory,
        })
    }
}

/// `sigmoid(logits) > 0.5` for a `(1, 1, H, W)` map.
pub fn binarize(logits: &Tensor) -> Result<BinaryMask> {
    let (_, _, h, w) = logits.dims4()?;
    let v: Vec<f32> = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Array2::from_shape_fn((h, w), |(r, c)| v[r * w + c] > 0.0))
}
