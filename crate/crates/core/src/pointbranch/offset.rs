//! Camera offset as the background-masked mean of a flow field.

use crate::config::OffsetNormalization;
use crate::error::{Error, Result};
use crate::pointbranch::flow::FlowField;
use crate::types::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Offset {
    pub dx: f64,
    pub dy: f64,
    pub frame_index: usize,
}

impl Offset {
    pub fn zero(frame_index: usize) -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            frame_index,
        }
    }
}

/// Sums `(1 - M)·O` over the image. With [`OffsetNormalization::PaperHw`]
/// the sum is divided by `H·W`; with [`OffsetNormalization::BackgroundCount`]
/// by the number of background pixels (zero offset when there are none).
pub fn mean_background_offset(flow: &FlowField, mask: &BinaryMask, mode: OffsetNormalization) -> Result<Offset> {
    if flow.dims() != mask.dim() {
        return Err(Error::Shape(format!(
            "flow {:?} vs mask {:?}",
            flow.dims(),
            mask.dim()
        )));
    }
    let (h, w) = mask.dim();
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    let mut background = 0usize;
    for ((r, c), &m) in mask.indexed_iter() {
        if !m {
            sx += flow.vectors[[r, c, 0]] as f64;
            sy += flow.vectors[[r, c, 1]] as f64;
            background += 1;
        }
    }
    let denom = match mode {
        OffsetNormalization::PaperHw => (h * w) as f64,
        OffsetNormalization::BackgroundCount => background as f64,
    };
    let frame_index = flow.pair.1;
    if background == 0 {
        return Ok(Offset::zero(frame_index));
    }
    Ok(Offset {
        dx: sx / denom,
        dy: sy / denom,
        frame_index,
    })
}
