//! Two-way transformer mask decoder with high-resolution skip fusion.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{self, Attention, BilinearResize, Conv2d, Init, LayerNorm, LayerNorm2d, Mlp, Upconv2x, Vb};

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_t2i: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: Attention,
    norm4: LayerNorm,
}

impl TwoWayBlock {
    fn new(vb: &Vb, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(&vb.pp("self_attn"), c, heads)?,
            norm1: LayerNorm::new(&vb.pp("norm1"), c)?,
            cross_t2i: Attention::new(&vb.pp("cross_t2i"), c, heads)?,
            norm2: LayerNorm::new(&vb.pp("norm2"), c)?,
            mlp: Mlp::new(&vb.pp("mlp"), c, 2 * c, c, 2)?,
            norm3: LayerNorm::new(&vb.pp("norm3"), c)?,
            cross_i2t: Attention::new(&vb.pp("cross_i2t"), c, heads)?,
            norm4: LayerNorm::new(&vb.pp("norm4"), c)?,
        })
    }

    fn forward(&self, q: &Tensor, k: &Tensor, qpe: &Tensor, kpe: &Tensor) -> Result<(Tensor, Tensor)> {
        let qq = (q + qpe)?;
        let q = self.norm1.forward(&(q + self.self_attn.forward(&qq, &qq, q)?)?)?;
        let kk = (k + kpe)?;
        let q = self
            .norm2
            .forward(&(&q + self.cross_t2i.forward(&(&q + qpe)?, &kk, k)?)?)?;
        let q = self.norm3.forward(&(&q + self.mlp.forward(&q)?)?)?;
        let k = self
            .norm4
            .forward(&(k + self.cross_i2t.forward(&kk, &(&q + qpe)?, &q)?)?)?;
        Ok((q, k))
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    mask_token: Tensor,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
    up1: Upconv2x,
    skip2: Conv2d,
    norm_up: LayerNorm2d,
    up2: Upconv2x,
    skip1: Conv2d,
    hyper: Mlp,
    to_full: BilinearResize,
    grid: (usize, usize),
}

impl MaskDecoder {
    pub fn new(vb: &Vb, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let g = cfg.input_resolution / 16;
        let (u1, u2) = ((c / 4).max(4), (c / 8).max(4));
        let blocks = (0..cfg.decoder_depth)
            .map(|i| TwoWayBlock::new(&vb.pp(&format!("blocks.{i}")), c, cfg.num_heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            mask_token: vb.var("mask_token", &[1, 1, c], Init::Normal(0.02))?,
            blocks,
            final_attn: Attention::new(&vb.pp("final_attn"), c, cfg.num_heads)?,
            norm_final: LayerNorm::new(&vb.pp("norm_final"), c)?,
            up1: Upconv2x::new(&vb.pp("up1"), c, u1)?,
            skip2: Conv2d::new(&vb.pp("skip_f2"), cfg.channels_f2, u1, 1, 1, 0, true)?,
            norm_up: LayerNorm2d::new(&vb.pp("norm_up"), u1)?,
            up2: Upconv2x::new(&vb.pp("up2"), u1, u2)?,
            skip1: Conv2d::new(&vb.pp("skip_f1"), cfg.channels_f1, u2, 1, 1, 0, true)?,
            hyper: Mlp::new(&vb.pp("hyper"), c, c, u2, 3)?,
            to_full: BilinearResize::new(
                (4 * g, 4 * g),
                (cfg.input_resolution, cfg.input_resolution),
                vb.dtype(),
                vb.device(),
            )?,
            grid: (g, g),
        })
    }

    /// `image` is the prompted image embedding `(1, s, c)`, `pos` its position
    /// code, `point` the sparse prompt `(1, 1, c)`. Returns full-resolution
    /// logits `(1, 1, H, W)`.
    pub fn forward(&self, image: &Tensor, pos: &Tensor, point: &Tensor, f1: &Tensor, f2: &Tensor) -> Result<Tensor> {
        let (gh, gw) = self.grid;
        let tokens = Tensor::cat(&[&self.mask_token, point], 1)?;
        let mut q = tokens.clone();
        let mut k = image.clone();
        for b in &self.blocks {
            (q, k) = b.forward(&q, &k, &tokens, pos)?;
        }
        let attn = self
            .final_attn
            .forward(&(&q + &tokens)?, &(&k + pos)?, &k)?;
        let q = self.norm_final.forward(&(q + attn)?)?;

        let map = nn::tokens_to_map(&k, gh, gw)?;
        let x = (self.up1.forward(&map)? + self.skip2.forward(f2)?)?;
        let x = self.norm_up.forward(&x)?.gelu()?;
        let x = (self.up2.forward(&x)? + self.skip1.forward(f1)?)?.gelu()?;
        let (_, ch, h4, w4) = x.dims4()?;

        let hyper = self.hyper.forward(&q.narrow(1, 0, 1)?)?;
        let logits = hyper.matmul(&x.reshape((1, ch, h4 * w4))?)?.reshape((1, 1, h4, w4))?;
        self.to_full.forward(&logits)
    }
}
