//! Dense edge prompt and sparse point prompt embeddings.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Conv2d, Init, LayerNorm2d, Vb};

/// Point-branch output fed back as a prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrompt {
    /// `(x, y)` normalized to `[0, 1]`.
    pub coord: [f64; 2],
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    conv1: Conv2d,
    norm1: LayerNorm2d,
    conv2: Conv2d,
    norm2: LayerNorm2d,
    conv3: Conv2d,
    gaussian: Tensor,
    point_embed: Tensor,
    no_point: Tensor,
    threshold: f64,
    channels: usize,
}

impl PromptEncoder {
    pub fn new(vb: &Vb, c: usize, existence_threshold: f64) -> Result<Self> {
        let (a, b) = ((c / 8).max(4), (c / 4).max(4));
        Ok(Self {
            conv1: Conv2d::new(&vb.pp("edge_conv1"), 1, a, 2, 2, 0, true)?,
            norm1: LayerNorm2d::new(&vb.pp("edge_norm1"), a)?,
            conv2: Conv2d::new(&vb.pp("edge_conv2"), a, b, 2, 2, 0, true)?,
            norm2: LayerNorm2d::new(&vb.pp("edge_norm2"), b)?,
            conv3: Conv2d::new(&vb.pp("edge_conv3"), b, c, 1, 1, 0, true)?,
            gaussian: vb.random_buffer("point_gaussian", &[2, c / 2], Init::Normal(1.0))?,
            point_embed: vb.var("point_embed", &[1, 1, c], Init::Normal(0.02))?,
            no_point: vb.var("no_point_embed", &[1, 1, c], Init::Normal(0.02))?,
            threshold: existence_threshold,
            channels: c,
        })
    }

    /// `E_p`: `(1, 1, H/4, W/4)` edge logits to a `(1, c, H/16, W/16)` map.
    pub fn encode_edge(&self, edge_logits: &Tensor) -> Result<Tensor> {
        let x = self.norm1.forward(&self.conv1.forward(edge_logits)?.gelu()?)?;
        let x = self.norm2.forward(&self.conv2.forward(&x)?.gelu()?)?;
        self.conv3.forward(&x)
    }

    /// Sine/cosine code of a normalized point, `(1, 1, c)`.
    pub fn positional_code(&self, coord: [f64; 2]) -> Result<Tensor> {
        let p = Tensor::new(&[[2.0 * coord[0] - 1.0, 2.0 * coord[1] - 1.0]], self.gaussian.device())?
            .to_dtype(self.gaussian.dtype())?;
        let proj = (p.matmul(&self.gaussian)? * (2.0 * std::f64::consts::PI))?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?.reshape((1, 1, self.channels))?)
    }

    /// `P_p`. A missing prompt or a score below the existence threshold
    /// gives the learned no-point token.
    pub fn encode_point(&self, prompt: Option<PointPrompt>) -> Result<Tensor> {
        match prompt {
            Some(p) if p.score >= self.threshold => Ok((self.positional_code(p.coord)? + &self.point_embed)?),
            _ => Ok(self.no_point.clone()),
        }
    }

    pub fn no_point_token(&self) -> &Tensor {
        &self.no_point
    }
}
