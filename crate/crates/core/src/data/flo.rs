//! Middlebury `.flo` files: f32 magic `202021.25`, i32 width, i32 height,
//! then row-major interleaved `(dx, dy)` f32 pairs, all little-endian.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, IoContext, Result};
use crate::pointbranch::flow::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w, _) = flow.vectors.dim();
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for v in flow.vectors.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| [b[0], b[1], b[2], b[3]])
            .ok_or_else(|| Error::Input("truncated .flo data".into()))
    };
    if f32::from_le_bytes(word(0)?) != FLO_MAGIC {
        return Err(Error::Input("bad .flo magic".into()));
    }
    let w = i32::from_le_bytes(word(1)?);
    let h = i32::from_le_bytes(word(2)?);
    if w <= 0 || h <= 0 {
        return Err(Error::Input(format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + w * h * 8 {
        return Err(Error::Input(format!(
            ".flo payload is {} bytes, expected {}",
            bytes.len() - 12,
            w * h * 8
        )));
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let vectors = Array3::from_shape_vec((h, w, 2), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FlowField {
        vectors,
        pair: (0, 0),
    })
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    std::fs::write(path, encode_flo(flow)).at(path)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&std::fs::read(path).at(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flo_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u32>()) {
            let vectors = Array3::from_shape_fn((h, w, 2), |(r, c, k)| {
                ((seed as usize + r * 31 + c * 7 + k) % 97) as f32 * 0.37 - 12.0
            });
            let f = FlowField { vectors, pair: (0, 0) };
            let g = decode_flo(&encode_flo(&f)).unwrap();
            prop_assert_eq!(f, g);
        }
    }

    #[test]
    fn rejects_truncated() {
        let f = FlowField::uniform(4, 4, 1.0, 2.0, (0, 1));
        let mut bytes = encode_flo(&f);
        bytes.pop();
        assert!(decode_flo(&bytes).is_err());
        bytes[0] = 0;
        assert!(decode_flo(&bytes).is_err());
    }
}
