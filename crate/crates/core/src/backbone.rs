//! Hierarchical image encoder with strides 4, 8 and 16.
//!
//! Each frame is encoded on its own; temporal fusion happens in the branch
//! memory modules.

use candle_core::{DType, Device, Tensor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Attention, Conv2d, LayerNorm, LayerNorm2d, Mlp, Vb};
use crate::types::ImageFrame;

/// Multi-scale features of one frame.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// Coarse tokens `(1, s, c)` on the stride-16 grid, row-major.
    pub f: Tensor,
    /// `(1, c2, H/8, W/8)`.
    pub f2: Tensor,
    /// `(1, c1, H/4, W/4)`.
    pub f1: Tensor,
    pub grid: (usize, usize),
    pub frame_index: usize,
}

impl FeaturePyramid {
    pub fn detach(&self) -> Self {
        Self {
            f: self.f.detach(),
            f2: self.f2.detach(),
            f1: self.f1.detach(),
            grid: self.grid,
            frame_index: self.frame_index,
        }
    }

    pub fn is_finite(&self) -> Result<bool> {
        for t in [&self.f, &self.f1, &self.f2] {
            let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    mix: Conv2d,
    norm: LayerNorm2d,
}

impl Stage {
    fn new(vb: &Vb, input: usize, output: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            down: Conv2d::new(&vb.pp("down"), input, output, stride, stride, 0, true)?,
            mix: Conv2d::new(&vb.pp("mix"), output, output, 3, 1, 1, true)?,
            norm: LayerNorm2d::new(&vb.pp("norm"), output)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.down.forward(x)?;
        let x = (&x + self.mix.forward(&x.gelu()?)?)?;
        self.norm.forward(&x)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(vb: &Vb, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&vb.pp("norm1"), c)?,
            attn: Attention::new(&vb.pp("attn"), c, heads)?,
            norm2: LayerNorm::new(&vb.pp("norm2"), c)?,
            mlp: Mlp::new(&vb.pp("mlp"), c, 2 * c, c, 2)?,
        })
    }

    fn forward(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let n = self.norm1.forward(x)?;
        let q = (&n + pos)?;
        let x = (x + self.attn.forward(&q, &q, &n)?)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + m)?)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stage1: Stage,
    stage2: Stage,
    stage3: Stage,
    block: Block,
    resolution: usize,
    pos: Tensor,
    dtype: DType,
    device: Device,
}

impl Backbone {
    pub fn new(vb: &Vb, cfg: &ModelConfig) -> Result<Self> {
        let res = cfg.input_resolution;
        if res % 16 != 0 {
            return Err(Error::ConfigValidation {
                key: "model.input_resolution".into(),
                reason: "must be divisible by 16".into(),
            });
        }
        let g = res / 16;
        Ok(Self {
            stage1: Stage::new(&vb.pp("stage1"), 3, cfg.channels_f1, 4)?,
            stage2: Stage::new(&vb.pp("stage2"), cfg.channels_f1, cfg.channels_f2, 2)?,
            stage3: Stage::new(&vb.pp("stage3"), cfg.channels_f2, cfg.channels, 2)?,
            block: Block::new(&vb.pp("block"), cfg.channels, cfg.num_heads)?,
            resolution: res,
            pos: nn::sine_position_encoding(g, g, cfg.channels, vb.dtype(), vb.device())?,
            dtype: vb.dtype(),
            device: vb.device().clone(),
        })
    }

    pub fn position_encoding(&self) -> &Tensor {
        &self.pos
    }

    /// Frame pixels as a centered `(1, 3, H, W)` tensor.
    pub fn frame_tensor(&self, frame: &ImageFrame) -> Result<Tensor> {
        let (h, w) = (frame.height(), frame.width());
        if (h, w) != (self.resolution, self.resolution) {
            return Err(Error::Input(format!(
                "frame {} of `{}` is {w}x{h}, model expects {r}x{r}",
                frame.frame_index,
                frame.clip_id,
                r = self.resolution
            )));
        }
        let px = frame.pixels();
        if px.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite pixels in frame {}", frame.frame_index)));
        }
        let data: Vec<f32> = px.iter().map(|v| (v - 0.5) * 4.0).collect();
        let t = Tensor::from_vec(data, (1, h, w, 3), &self.device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(self.dtype)?;
        Ok(t)
    }

    pub fn encode_tensor(&self, x: &Tensor, frame_index: usize) -> Result<FeaturePyramid> {
        let f1 = self.stage1.forward(x)?;
        let f2 = self.stage2.forward(&f1)?;
        let f3 = self.stage3.forward(&f2)?;
        let (_, _, gh, gw) = f3.dims4()?;
        let tokens = nn::map_to_tokens(&f3)?;
        let f = self.block.forward(&tokens, &self.pos)?;
        Ok(FeaturePyramid {
            f,
            f2,
            f1,
            grid: (gh, gw),
            frame_index,
        })
    }

    pub fn encode(&self, frame: &ImageFrame) -> Result<FeaturePyramid> {
        self.encode_tensor(&self.frame_tensor(frame)?, frame.frame_index)
    }

    pub fn encode_window(&self, frames: &[ImageFrame]) -> Result<Vec<FeaturePyramid>> {
        frames.iter().map(|f| self.encode(f)).collect()
    }
}
