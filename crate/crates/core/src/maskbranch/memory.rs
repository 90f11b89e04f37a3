//! Mask memory: encoding, the bank entry type and memory attention.

use candle_core::Tensor;
use ndarray::Array2;

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::memory::{tensor_bytes, BankEntry, MemoryAttention, MemoryBank};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, Vb};
use crate::types::BinaryMask;

#[derive(Debug, Clone)]
pub struct MaskMemoryEntry {
    /// `M^m_i`, `(1, s, c)`.
    pub memory: Tensor,
    /// Binary mask `M_i` at full resolution.
    pub mask: BinaryMask,
    pub frame_index: usize,
}

impl BankEntry for MaskMemoryEntry {
    fn frame_index(&self) -> usize {
        self.frame_index
    }

    fn detached(&self) -> Self {
        Self {
            memory: self.memory.detach(),
            mask: self.mask.clone(),
            frame_index: self.frame_index,
        }
    }

    fn footprint(&self) -> usize {
        tensor_bytes(&self.memory) + self.mask.len()
    }
}

pub type MaskMemoryBank = MemoryBank<MaskMemoryEntry>;

/// Fraction of bleed pixels in each `stride`×`stride` cell.
pub fn pool_mask(mask: &BinaryMask, stride: usize) -> Array2<f32> {
    let (h, w) = mask.dim();
    let (gh, gw) = (h / stride, w / stride);
    let mut out = Array2::<f32>::zeros((gh, gw));
    for ((r, c), &m) in mask.indexed_iter() {
        if m && r / stride < gh && c / stride < gw {
            out[[r / stride, c / stride]] += 1.0;
        }
    }
    out.mapv_inplace(|v| v / (stride * stride) as f32);
    out
}

#[derive(Debug, Clone)]
pub struct MaskMemoryEncoder {
    feat: Linear,
    mask_in: Conv2d,
    mask_out: Conv2d,
    norm: LayerNorm,
}

impl MaskMemoryEncoder {
    pub fn new(vb: &Vb, c: usize) -> Result<Self> {
        Ok(Self {
            feat: Linear::new(&vb.pp("feat_proj"), c, c, true)?,
            mask_in: Conv2d::new(&vb.pp("mask_in"), 1, c / 4, 3, 1, 1, true)?,
            mask_out: Conv2d::new(&vb.pp("mask_out"), c / 4, c, 1, 1, 0, true)?,
            norm: LayerNorm::new(&vb.pp("norm"), c)?,
        })
    }

    pub fn encode(&self, f: &FeaturePyramid, mask: &BinaryMask) -> Result<Tensor> {
        let (gh, gw) = f.grid;
        let stride = mask.dim().0 / gh;
        let pooled = pool_mask(mask, stride);
        if pooled.dim() != (gh, gw) {
            return Err(Error::Shape(format!(
                "mask {:?} does not pool onto grid {:?}",
                mask.dim(),
                f.grid
            )));
        }
        let m = Tensor::from_vec(pooled.iter().copied().collect::<Vec<f32>>(), (1, 1, gh, gw), f.f.device())?
            .to_dtype(f.f.dtype())?;
        let m = self.mask_out.forward(&self.mask_in.forward(&m)?.gelu()?)?;
        let m = crate::nn::map_to_tokens(&m)?;
        self.norm.forward(&(self.feat.forward(&f.f)? + m)?)
    }
}

/// Memory attention over the mask bank with a learned per-age embedding.
#[derive(Debug, Clone)]
pub struct MaskMemoryAttention {
    layer: MemoryAttention,
    temporal: Option<Tensor>,
    capacity: usize,
}

impl MaskMemoryAttention {
    pub fn new(vb: &Vb, c: usize, heads: usize, capacity: usize, temporal: bool) -> Result<Self> {
        let temporal = if temporal {
            Some(vb.var("temporal_embedding", &[capacity.max(1), c], Init::Normal(0.02))?)
        } else {
            None
        };
        Ok(Self {
            layer: MemoryAttention::new(&vb.pp("layer"), c, heads)?,
            temporal,
            capacity,
        })
    }

    /// Position code for memory of age `age ≥ 1` frames.
    pub fn memory_position(&self, pos: &Tensor, age: usize) -> Result<Tensor> {
        Ok(match &self.temporal {
            Some(t) => {
                let row = age.clamp(1, self.capacity.max(1)) - 1;
                pos.broadcast_add(&t.narrow(0, row, 1)?)?
            }
            None => pos.clone(),
        })
    }

    pub fn forward(&self, f: &FeaturePyramid, pos: &Tensor, bank: &MaskMemoryBank) -> Result<Tensor> {
        if bank.is_empty() {
            return self.layer.forward(&f.f, pos, None);
        }
        let mut mems = Vec::with_capacity(bank.len());
        let mut poss = Vec::with_capacity(bank.len());
        for e in bank.entries() {
            if e.memory.dims() != f.f.dims() {
                return Err(Error::Shape(format!(
                    "memory {:?} vs features {:?}",
                    e.memory.dims(),
                    f.f.dims()
                )));
            }
            mems.push(e.memory.clone());
            let age = f.frame_index.saturating_sub(e.frame_index);
            poss.push(self.memory_position(pos, age)?);
        }
        let mem = Tensor::cat(&mems, 1)?;
        let mem_pos = Tensor::cat(&poss, 1)?;
        self.layer.forward(&f.f, pos, Some((&mem, &mem_pos)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_counts_fraction() {
        let mut m = Array2::from_elem((8, 8), false);
        for r in 0..4 {
            for c in 0..2 {
                m[[r, c]] = true;
            }
        }
        let p = pool_mask(&m, 4);
        assert_eq!(p.dim(), (2, 2));
        assert_eq!(p[[0, 0]], 0.5);
        assert_eq!(p[[1, 1]], 0.0);
    }
}
