//! Point memory bank and mask-guided reference features.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::maskbranch::MaskMemoryBank;
use crate::memory::{tensor_bytes, BankEntry, MemoryBank};
use crate::nn::{Linear, Vb};
use crate::pointbranch::offset::Offset;

#[derive(Debug, Clone)]
pub struct PointMemoryEntry {
    /// `M^p_i`, `(1, s, c)`.
    pub memory: Tensor,
    pub offset: Offset,
    pub frame_index: usize,
}

impl BankEntry for PointMemoryEntry {
    fn frame_index(&self) -> usize {
        self.frame_index
    }

    fn detached(&self) -> Self {
        Self {
            memory: self.memory.detach(),
            offset: self.offset,
            frame_index: self.frame_index,
        }
    }

    fn footprint(&self) -> usize {
        tensor_bytes(&self.memory) + std::mem::size_of::<Offset>()
    }
}

pub type PointMemoryBank = MemoryBank<PointMemoryEntry>;

/// Linear embedding of a pixel offset, scaled to coarse-grid cells.
#[derive(Debug, Clone)]
pub struct OffsetEmbedding {
    linear: Linear,
    scale: f64,
}

impl OffsetEmbedding {
    pub fn new(vb: &Vb, c: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(vb, 2, c, true)?,
            scale: 1.0 / stride as f64,
        })
    }

    /// `(1, 1, c)` embedding of `o`.
    pub fn forward(&self, o: &Offset, like: &Tensor) -> Result<Tensor> {
        let x = Tensor::new(&[[[o.dx * self.scale, o.dy * self.scale]]], like.device())?.to_dtype(like.dtype())?;
        self.linear.forward(&x)
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.linear.bias()
    }
}

/// `F̄ref` and its position codes: per stored frame, the offset-corrected
/// point memory followed by that frame's mask memory. `None` when the banks
/// are empty.
pub fn build_reference_features(
    point_bank: &PointMemoryBank,
    mask_bank: &MaskMemoryBank,
    embed: &OffsetEmbedding,
    pos: &Tensor,
) -> Result<Option<(Tensor, Tensor)>> {
    let mut tokens = Vec::new();
    let mut poss = Vec::new();
    for e in point_bank.entries() {
        let corrected = e.memory.broadcast_add(&embed.forward(&e.offset, &e.memory)?)?;
        tokens.push(corrected);
        poss.push(pos.clone());
        if let Some(m) = mask_bank.get(e.frame_index) {
            if m.memory.dims() != e.memory.dims() {
                return Err(Error::Shape(format!(
                    "mask memory {:?} vs point memory {:?}",
                    m.memory.dims(),
                    e.memory.dims()
                )));
            }
            tokens.push(m.memory.clone());
            poss.push(pos.clone());
        }
    }
    if tokens.is_empty() {
        return Ok(None);
    }
    Ok(Some((Tensor::cat(&tokens, 1)?, Tensor::cat(&poss, 1)?)))
}
