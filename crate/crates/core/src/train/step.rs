//! Prepared training clips and the alternating two-phase update.

use std::ops::RangeInclusive;

use candle_core::{DType, Tensor};

use crate::config::ModelConfig;
use crate::data::{derive_edge_map, resize, Clip};
use crate::error::{Error, Result};
use crate::model::{BleedNet, FrameInput, Phase};
use crate::pointbranch::flow::{clip_flows, FlowField, FlowSource};
use crate::train::losses::{mask_objective, point_objective, scalar};
use crate::train::optim::{Adam, ParamGroup};
use crate::train::schedule::{default_warmup, lr_schedule};
use crate::types::BinaryMask;

/// A clip at model resolution with its flows and target tensors.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub clip: Clip,
    /// `flows[i]` goes from frame `i` to frame `i + 1`.
    pub flows: Vec<FlowField>,
    pub masks: Vec<BinaryMask>,
    pub gt_masks: Vec<Tensor>,
    pub gt_edges: Vec<Tensor>,
}

fn mask_tensor(m: &BinaryMask, dtype: DType) -> Result<Tensor> {
    let (h, w) = m.dim();
    let v: Vec<f32> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, (1, 1, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

impl PreparedClip {
    pub fn new(clip: &Clip, cfg: &ModelConfig, flow: &FlowSource, dtype: DType) -> Result<Self> {
        let clip = resize::resize_clip(clip, cfg.input_resolution);
        let flows = clip_flows(&clip, flow)?;
        let (h, w) = clip.dims();
        let masks: Vec<BinaryMask> = clip.frames.iter().map(|(_, a)| a.mask_or_empty(h, w)).collect();
        let gt_masks = masks.iter().map(|m| mask_tensor(m, dtype)).collect::<Result<_>>()?;
        let gt_edges = masks
            .iter()
            .map(|m| mask_tensor(&derive_edge_map(m), dtype))
            .collect::<Result<_>>()?;
        Ok(Self {
            clip,
            flows,
            masks,
            gt_masks,
            gt_edges,
        })
    }

    pub fn flow_into(&self, k: usize) -> Option<&FlowField> {
        k.checked_sub(1).and_then(|i| self.flows.get(i))
    }
}

/// Both optimizers plus the shared iteration counter.
#[derive(Debug)]
pub struct OptimState {
    /// θ: encoder and mask branch.
    pub opt_a: Adam,
    /// ϑ: point branch.
    pub opt_b: Adam,
    /// Completed A+B iterations.
    pub step: u64,
    pub total_steps: u64,
    pub warmup: u64,
    pub teacher_steps: u64,
}

/// Splits trainable variables into the θ groups and the ϑ group.
pub fn partition(model: &BleedNet) -> Result<(Vec<ParamGroup>, Vec<ParamGroup>)> {
    let tp = &model.config.train;
    let mut encoder = Vec::new();
    let mut mask = Vec::new();
    let mut point = Vec::new();
    for (name, var) in model.store.vars() {
        if name.starts_with("backbone.") {
            encoder.push((name, var));
        } else if name.starts_with("maskbranch.") {
            mask.push((name, var));
        } else if name.starts_with("pointbranch.") {
            point.push((name, var));
        } else {
            return Err(Error::Shape(format!("parameter `{name}` belongs to no partition")));
        }
    }
    let group = |name: &str, params, max_lr| ParamGroup {
        name: name.into(),
        params,
        max_lr,
    };
    Ok((
        vec![group("encoder", encoder, tp.lr_encoder), group("mask", mask, tp.lr_other)],
        vec![group("point", point, tp.lr_other)],
    ))
}

impl OptimState {
    pub fn new(model: &BleedNet, total_steps: u64) -> Result<Self> {
        let tp = &model.config.train;
        let (theta, vartheta) = partition(model)?;
        let warmup = if tp.warmup_steps > 0 {
            tp.warmup_steps
        } else {
            default_warmup(total_steps)
        };
        Ok(Self {
            opt_a: Adam::new(theta, tp)?,
            opt_b: Adam::new(vartheta, tp)?,
            step: 0,
            total_steps,
            warmup,
            teacher_steps: (tp.teacher_forcing * total_steps as f64).round() as u64,
        })
    }

    /// Learning-rate multiplier for iteration `t` (1-based).
    pub fn lr_factor(&self, t: u64) -> f64 {
        lr_schedule(t, self.warmup, self.total_steps, 1.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WindowRef<'a> {
    pub clip: &'a PreparedClip,
    pub range: &'a RangeInclusive<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss_mask: f64,
    pub loss_point: f64,
    pub lr_factor: f64,
}

fn check_finite(v: f64, step: u64, what: &str, w: &WindowRef<'_>) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        step,
        detail: format!(
            "{what} = {v} on clip `{}` frames {}..={}",
            w.clip.clip.clip_id,
            w.range.start(),
            w.range.end()
        ),
    })
}

/// Runs one window through the model in `phase`, returning the mean of the
/// per-frame objective.
pub fn window_loss(model: &BleedNet, w: &WindowRef<'_>, phase: Phase, teacher: bool) -> Result<Tensor> {
    let cfg = &model.config;
    let (h, wd) = w.clip.clip.dims();
    let mut stream = model.new_stream();
    let mut terms = Vec::with_capacity(w.range.clone().count());
    for k in w.range.clone() {
        let (frame, ann) = &w.clip.clip.frames[k];
        let input = FrameInput {
            frame,
            flow: w.clip.flow_into(k),
            forced_mask: teacher.then(|| &w.clip.masks[k]),
        };
        let out = model.step(&mut stream, input, phase)?;
        let term = match phase {
            Phase::Mask => {
                let edge = model.edge_to_full(&out.mask.edge_logits)?;
                mask_objective(&out.mask.logits, &edge, &w.clip.gt_masks[k], &w.clip.gt_edges[k], &cfg.loss)?.total
            }
            Phase::Point => {
                let d = &out.point.decoded;
                point_objective(&d.coord, &d.score_logit, ann, (h, wd), &cfg.loss)?.total
            }
            Phase::Infer => return Err(Error::Input("window_loss needs a training phase".into())),
        };
        terms.push(term);
    }
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// Step A: `L_m` with point outputs constant; updates θ only.
pub fn step_a(model: &BleedNet, w: &WindowRef<'_>, state: &mut OptimState, t: u64) -> Result<f64> {
    let teacher = t <= state.teacher_steps;
    let loss = window_loss(model, w, Phase::Mask, teacher)?;
    let v = scalar(&loss)?;
    check_finite(v, t, "L_m", w)?;
    let grads = loss.backward()?;
    state.opt_a.step(&grads, state.lr_factor(t))?;
    Ok(v)
}

/// Step B: re-forward against the updated mask branch, `L_p` with mask
/// outputs constant; updates ϑ only.
pub fn step_b(model: &BleedNet, w: &WindowRef<'_>, state: &mut OptimState, t: u64) -> Result<f64> {
    let teacher = t <= state.teacher_steps;
    let loss = window_loss(model, w, Phase::Point, teacher)?;
    let v = scalar(&loss)?;
    check_finite(v, t, "L_p", w)?;
    let grads = loss.backward()?;
    state.opt_b.step(&grads, state.lr_factor(t))?;
    Ok(v)
}

pub fn alternating_step(model: &BleedNet, w: &WindowRef<'_>, state: &mut OptimState) -> Result<StepReport> {
    let t = state.step + 1;
    let loss_mask = step_a(model, w, state, t)?;
    let loss_point = step_b(model, w, state, t)?;
    state.step = t;
    Ok(StepReport {
        step: t,
        loss_mask,
        loss_point,
        lr_factor: state.lr_factor(t),
    })
}
