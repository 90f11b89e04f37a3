//! FIFO memory banks and the memory attention layer shared by both branches.

use std::collections::VecDeque;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Mlp, Vb};

pub trait BankEntry {
    fn frame_index(&self) -> usize;
    /// Copy with all tensors cut from the autograd graph.
    fn detached(&self) -> Self;
    /// Bytes held by the entry's tensors and arrays.
    fn footprint(&self) -> usize;
}

/// Fixed-capacity FIFO keyed by strictly increasing frame index.
#[derive(Debug, Clone)]
pub struct MemoryBank<E> {
    entries: VecDeque<E>,
    capacity: usize,
}

impl<E: BankEntry> MemoryBank<E> {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    /// Appends an entry, evicting the oldest beyond capacity.
    pub fn push(&mut self, entry: E) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if entry.frame_index() <= last.frame_index() {
                return Err(Error::Input(format!(
                    "bank push out of order: frame {} after {}",
                    entry.frame_index(),
                    last.frame_index()
                )));
            }
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = &E> {
        self.entries.iter()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index()).collect()
    }

    pub fn get(&self, frame_index: usize) -> Option<&E> {
        self.entries.iter().find(|e| e.frame_index() == frame_index)
    }

    pub fn footprint(&self) -> usize {
        self.entries.iter().map(|e| e.footprint()).sum()
    }

    pub fn detach_all(&mut self) {
        for e in self.entries.iter_mut() {
            *e = e.detached();
        }
    }
}

pub(crate) fn tensor_bytes(t: &Tensor) -> usize {
    t.elem_count() * t.dtype().size_in_bytes()
}

/// Self-attention over the current frame's tokens followed by cross-attention
/// to a memory sequence.
#[derive(Debug, Clone)]
pub struct MemoryAttention {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    mlp: Mlp,
}

impl MemoryAttention {
    pub fn new(vb: &Vb, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&vb.pp("norm1"), c)?,
            self_attn: Attention::new(&vb.pp("self_attn"), c, heads)?,
            norm2: LayerNorm::new(&vb.pp("norm2"), c)?,
            cross_attn: Attention::new(&vb.pp("cross_attn"), c, heads)?,
            norm3: LayerNorm::new(&vb.pp("norm3"), c)?,
            mlp: Mlp::new(&vb.pp("mlp"), c, 2 * c, c, 2)?,
        })
    }

    /// `memory` is `(tokens, positions)`, both `(1, m, c)`; `None` skips the
    /// cross term entirely.
    pub fn forward(&self, x: &Tensor, pos: &Tensor, memory: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
        let n = self.norm1.forward(x)?;
        let q = (&n + pos)?;
        let mut x = (x + self.self_attn.forward(&q, &q, &n)?)?;
        if let Some((mem, mem_pos)) = memory {
            let n = self.norm2.forward(&x)?;
            let k = (mem + mem_pos)?;
            x = (&x + self.cross_attn.forward(&(&n + pos)?, &k, mem)?)?;
        }
        let m = self.mlp.forward(&self.norm3.forward(&x)?)?;
        Ok((x + m)?)
    }
}
