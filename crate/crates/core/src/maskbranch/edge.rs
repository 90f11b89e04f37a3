//! Edge generator: Gabor-Laplacian gating at two upsampled scales fused with
//! the high-resolution encoder features.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::maskbranch::gabor::{kernels_to_tensor, laplacian_of_gabor, GaborBank};
use crate::nn::{self, BilinearResize, Conv2d, Vb};

#[derive(Debug, Clone)]
pub struct EdgeOutput {
    /// `E_m`, `(1, 1, H/4, W/4)` logits.
    pub edge_logits: Tensor,
    /// `F'_mask` as tokens `(1, s, c)`.
    pub refined: Tensor,
}

#[derive(Debug, Clone)]
pub struct EdgeGenerator {
    lg: Tensor,
    up2: BilinearResize,
    up4: BilinearResize,
    up_e: BilinearResize,
    proj8: Conv2d,
    proj4: Conv2d,
    proj_f2: Conv2d,
    proj_f1: Conv2d,
    head: Conv2d,
    fusion: bool,
    grid: (usize, usize),
}

impl EdgeGenerator {
    pub fn new(vb: &Vb, cfg: &ModelConfig) -> Result<Self> {
        let bank = GaborBank::new(&cfg.gabor)?;
        let lg = kernels_to_tensor(&laplacian_of_gabor(&bank), vb.dtype(), vb.device())?;
        let g = cfg.input_resolution / 16;
        let (c, ce) = (cfg.channels, edge_channels(cfg.channels));
        Ok(Self {
            lg,
            up2: BilinearResize::new((g, g), (2 * g, 2 * g), vb.dtype(), vb.device())?,
            up4: BilinearResize::new((g, g), (4 * g, 4 * g), vb.dtype(), vb.device())?,
            up_e: BilinearResize::new((2 * g, 2 * g), (4 * g, 4 * g), vb.dtype(), vb.device())?,
            proj8: Conv2d::new(&vb.pp("proj8"), c, ce, 1, 1, 0, false)?,
            proj4: Conv2d::new(&vb.pp("proj4"), c, ce, 1, 1, 0, false)?,
            proj_f2: Conv2d::new(&vb.pp("proj_f2"), cfg.channels_f2, ce, 1, 1, 0, false)?,
            proj_f1: Conv2d::new(&vb.pp("proj_f1"), cfg.channels_f1, ce, 1, 1, 0, false)?,
            head: Conv2d::new(&vb.pp("head"), ce, 1, 1, 1, 0, true)?,
            fusion: cfg.edge_fusion,
            grid: (g, g),
        })
    }

    /// `ReLU(x) ⊙ (L_g ∗ x)`, orientation responses summed.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x.relu()? * nn::depthwise_bank_sum(x, &self.lg)?)?)
    }

    pub fn head_bias(&self) -> Option<&Tensor> {
        self.head.bias()
    }

    pub fn forward(&self, f_mask: &Tensor, f1: &Tensor, f2: &Tensor) -> Result<EdgeOutput> {
        let (gh, gw) = self.grid;
        let map = nn::tokens_to_map(f_mask, gh, gw)?;
        let refined = nn::map_to_tokens(&self.gate(&map)?)?;

        let mut e8 = self.proj8.forward(&self.gate(&self.up2.forward(&map)?)?)?;
        let mut e4 = self.proj4.forward(&self.gate(&self.up4.forward(&map)?)?)?;
        if self.fusion {
            e8 = (e8 + self.proj_f2.forward(f2)?)?;
            e4 = (e4 + self.proj_f1.forward(f1)?)?;
        }
        let e4 = (e4 + self.up_e.forward(&e8)?)?;
        let edge_logits = self.head.forward(&e4.gelu()?)?;
        Ok(EdgeOutput { edge_logits, refined })
    }
}

pub fn edge_channels(c: usize) -> usize {
    (c / 4).max(4)
}
