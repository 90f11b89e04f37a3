//! Token-based point decoder.

use candle_core::{DType, Tensor};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{self, Attention, Init, LayerNorm, Linear, Mlp, Vb};

/// Decoded point for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrediction {
    /// `(x, y)` normalized to `[0, 1]`.
    pub coord: [f64; 2],
    pub score: f64,
    pub frame_index: usize,
}

impl PointPrediction {
    pub fn present(&self, threshold: f64) -> bool {
        self.score >= threshold
    }

    pub fn pixel(&self, h: usize, w: usize) -> crate::types::Point {
        crate::types::Point::new(self.coord[0] * w as f64, self.coord[1] * h as f64)
    }
}

#[derive(Debug, Clone)]
pub struct PointDecoderOutput {
    /// Sigmoid coordinates `(1, 2)`.
    pub coord: Tensor,
    /// Existence logit `(1, 1)`.
    pub score_logit: Tensor,
    /// Last cross-attention of the output token over the grid, `(1, 1, s)`.
    pub attention: Tensor,
}

impl PointDecoderOutput {
    pub fn prediction(&self, frame_index: usize) -> Result<PointPrediction> {
        let c: Vec<f64> = self.coord.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let s: Vec<f64> = nn::sigmoid(&self.score_logit)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Ok(PointPrediction {
            coord: [c[0], c[1]],
            score: s[0],
            frame_index,
        })
    }
}

#[derive(Debug, Clone)]
struct Layer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct PointDecoder {
    token: Tensor,
    layers: Vec<Layer>,
    coord_embed: Linear,
    coord_head: Mlp,
    score_head: Mlp,
    grid_coords: Tensor,
}

impl PointDecoder {
    pub fn new(vb: &Vb, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let g = cfg.input_resolution / 16;
        let layers = (0..cfg.decoder_depth)
            .map(|i| {
                let vb = vb.pp(&format!("layers.{i}"));
                Ok(Layer {
                    self_attn: Attention::new(&vb.pp("self_attn"), c, cfg.num_heads)?,
                    norm1: LayerNorm::new(&vb.pp("norm1"), c)?,
                    cross_attn: Attention::new(&vb.pp("cross_attn"), c, cfg.num_heads)?,
                    norm2: LayerNorm::new(&vb.pp("norm2"), c)?,
                    mlp: Mlp::new(&vb.pp("mlp"), c, 2 * c, c, 2)?,
                    norm3: LayerNorm::new(&vb.pp("norm3"), c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            token: vb.var("output_token", &[1, 1, c], Init::Normal(0.02))?,
            layers,
            coord_embed: Linear::new(&vb.pp("coord_embed"), 2, c, true)?,
            coord_head: Mlp::new(&vb.pp("coord_head"), c, c, 2, 3)?,
            score_head: Mlp::new(&vb.pp("score_head"), c, c, 1, 2)?,
            grid_coords: nn::grid_coordinates(g, g, vb.dtype(), vb.device())?,
        })
    }

    pub fn forward(&self, f_point: &Tensor, pos: &Tensor) -> Result<PointDecoderOutput> {
        let keys = (f_point + pos)?;
        let values = f_point.broadcast_add(&self.coord_embed.forward(&self.grid_coords)?)?;
        let mut q = self.token.clone();
        let mut attention = None;
        for l in &self.layers {
            let qq = (&q + &self.token)?;
            q = l.norm1.forward(&(&q + l.self_attn.forward(&qq, &qq, &q)?)?)?;
            let (a, w) = l.cross_attn.forward_with_weights(&(&q + &self.token)?, &keys, &values)?;
            q = l.norm2.forward(&(q + a)?)?;
            q = l.norm3.forward(&(&q + l.mlp.forward(&q)?)?)?;
            attention = Some(w);
        }
        let attention = match attention {
            Some(a) => a,
            None => Tensor::zeros((1, 1, f_point.dim(1)?), f_point.dtype(), f_point.device())?,
        };
        let q = q.squeeze(1)?;
        Ok(PointDecoderOutput {
            coord: nn::sigmoid(&self.coord_head.forward(&q)?)?,
            score_logit: self.score_head.forward(&q)?,
            attention,
        })
    }
}
