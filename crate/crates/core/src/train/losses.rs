//! Segmentation and point losses on logits.

use candle_core::{DType, Tensor};

use crate::config::LossWeights;
use crate::error::Result;
use crate::nn::{sigmoid, softplus};
use crate::types::BleedAnnotation;

/// Mean over pixels of `-α_t (1 - p_t)^γ log p_t`.
pub fn focal_loss(logits: &Tensor, target: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    let sign = ((target * 2.0)? - 1.0)?;
    let log_pt = softplus(&(logits * &sign)?.neg()?)?.neg()?;
    let one_minus = (1.0 - log_pt.exp()?)?.relu()?;
    let modulating = if gamma == 2.0 {
        one_minus.sqr()?
    } else if gamma == 0.0 {
        one_minus.ones_like()?
    } else {
        one_minus.powf(gamma)?
    };
    let alpha_t = ((target * (2.0 * alpha - 1.0))? + (1.0 - alpha))?;
    Ok((alpha_t * modulating * log_pt)?.neg()?.mean_all()?)
}

/// `1 - (2Σpt + ε) / (Σp + Σt + ε)`.
pub fn dice_loss(probs: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    let inter = (probs * target)?.sum_all()?;
    let num = ((inter * 2.0)? + eps)?;
    let den = ((probs.sum_all()? + target.sum_all()?)? + eps)?;
    Ok((1.0 - (num / den)?)?)
}

/// Summed Huber loss with unit threshold.
pub fn smooth_l1(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let a = (pred - gt)?.abs()?;
    let small = a.minimum(1.0)?;
    Ok(((small.sqr()? * 0.5)? + (a - small)?)?.sum_all()?)
}

/// Binary cross-entropy of an existence logit.
pub fn existence_bce(score_logit: &Tensor, present: bool) -> Result<Tensor> {
    let z = score_logit.flatten_all()?.sum_all()?;
    Ok(if present { softplus(&z.neg()?)? } else { softplus(&z)? })
}

/// `(focal + dice)` of one map.
fn region_terms(logits: &Tensor, target: &Tensor, w: &LossWeights) -> Result<(Tensor, Tensor)> {
    let focal = focal_loss(logits, target, w.focal_alpha, w.focal_gamma)?;
    let dice = dice_loss(&sigmoid(logits)?, target, w.dice_eps)?;
    Ok((focal, dice))
}

#[derive(Debug, Clone)]
pub struct MaskLoss {
    pub total: Tensor,
    pub region_focal: Tensor,
    pub region_dice: Tensor,
    pub edge_focal: Tensor,
    pub edge_dice: Tensor,
}

/// `L_m = λ_r (focal + dice)(mask) + λ_e (focal + dice)(edge)`; all maps at
/// the same resolution.
pub fn mask_objective(
    mask_logits: &Tensor,
    edge_logits: &Tensor,
    gt_mask: &Tensor,
    gt_edge: &Tensor,
    w: &LossWeights,
) -> Result<MaskLoss> {
    let (region_focal, region_dice) = region_terms(mask_logits, gt_mask, w)?;
    let (edge_focal, edge_dice) = region_terms(edge_logits, gt_edge, w)?;
    let region = ((&region_focal + &region_dice)? * w.region)?;
    let edge = ((&edge_focal + &edge_dice)? * w.edge)?;
    Ok(MaskLoss {
        total: (region + edge)?,
        region_focal,
        region_dice,
        edge_focal,
        edge_dice,
    })
}

#[derive(Debug, Clone)]
pub struct PointLoss {
    pub total: Tensor,
    /// Smooth-L1 coordinate term, absent on frames without a point.
    pub coord: Option<Tensor>,
    pub score: Tensor,
}

/// `L_p = λ_P smoothL1 + λ_s BCE`; the coordinate term only where the
/// ground truth has a point. `coord` is `(1, 2)` normalized `(x, y)`.
pub fn point_objective(
    coord: &Tensor,
    score_logit: &Tensor,
    gt: &BleedAnnotation,
    dims: (usize, usize),
    w: &LossWeights,
) -> Result<PointLoss> {
    let score = existence_bce(score_logit, gt.has_point)?;
    let mut total = (&score * w.score)?;
    let mut coord_term = None;
    if let Some(p) = gt.point {
        let target = Tensor::new(&[[p.x / dims.1 as f64, p.y / dims.0 as f64]], coord.device())?.to_dtype(coord.dtype())?;
        let l = smooth_l1(coord, &target)?;
        total = (total + (&l * w.point)?)?;
        coord_term = Some(l);
    }
    Ok(PointLoss {
        total,
        coord: coord_term,
        score,
    })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.sum_all()?.to_scalar::<f64>()?)
}
