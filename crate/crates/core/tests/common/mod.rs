#![allow(dead_code)]

use bleedscope::config::ModelConfig;
use bleedscope::data::synth::{synth_clip, MotionProfile, SynthSpec};
use bleedscope::data::Clip;
use bleedscope::gradcheck::{check, random_tensor, random_var, GradReport};
use bleedscope::maskbranch::{EdgeGenerator, MaskDecoder};
use bleedscope::nn::{sine_position_encoding, VarStore};
use bleedscope::pointbranch::{FlowField, PointDecoder};
use bleedscope::rng::SeededRng;
use bleedscope::train::losses::{dice_loss, existence_bce, focal_loss, smooth_l1};
use candle_core::{DType, Device, Tensor, Var};

/// Acceptance-scale synthetic training set: `n` clips of `frames` frames at 128².
pub fn synth_set(n: usize, frames: usize, seed: u64) -> Vec<(Clip, Vec<FlowField>)> {
    let rng = SeededRng::new(seed).split("synth");
    (0..n)
        .map(|i| {
            let mut r = rng.split_index("clip", i as u64);
            let spec = SynthSpec::from_profile(MotionProfile::Translate, frames, (128, 128), &mut r);
            synth_clip(&spec, &format!("clip_{i:03}"), &mut r).unwrap()
        })
        .collect()
}

/// Float64 miniature with an 8×8 coarse grid.
pub fn mini_config() -> ModelConfig {
    ModelConfig {
        input_resolution: 128,
        channels: 8,
        channels_f1: 4,
        channels_f2: 4,
        num_heads: 2,
        decoder_depth: 1,
        ..ModelConfig::default()
    }
}

fn module_vars(store: &VarStore) -> Vec<(String, Var)> {
    store.vars().into_iter().collect()
}

fn weights(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    random_tensor(shape, rng).unwrap()
}

const EPS: f64 = 1e-5;
const ATOL: f64 = 1e-6;

/// Edge generator path: Gabor-Laplacian gates at both scales, fusion and head.
pub fn grad_edge_generator(seed: u64) -> GradReport {
    let cfg = mini_config();
    let mut rng = SeededRng::new(seed);
    let store = VarStore::new(DType::F64, rng.split("init"));
    let edge = EdgeGenerator::new(&store.root().pp("edge"), &cfg).unwrap();
    let c = cfg.channels;
    let f = random_var(&[1, 64, c], 1.0, &mut rng).unwrap();
    let f1 = random_var(&[1, cfg.channels_f1, 32, 32], 1.0, &mut rng).unwrap();
    let f2 = random_var(&[1, cfg.channels_f2, 16, 16], 1.0, &mut rng).unwrap();
    let re = weights(&[1, 1, 32, 32], &mut rng);
    let rr = weights(&[1, 64, c], &mut rng);
    let mut vars = module_vars(&store);
    vars.extend([("f_mask".into(), f.clone()), ("f1".into(), f1.clone()), ("f2".into(), f2.clone())]);
    check(&vars, 3, EPS, ATOL, &mut rng, || {
        let o = edge.forward(f.as_tensor(), f1.as_tensor(), f2.as_tensor())?;
        Ok(((o.edge_logits * &re)?.sum_all()? + (o.refined * &rr)?.sum_all()?)?)
    })
    .unwrap()
}

pub fn grad_mask_decoder(seed: u64) -> GradReport {
    let cfg = mini_config();
    let mut rng = SeededRng::new(seed);
    let store = VarStore::new(DType::F64, rng.split("init"));
    let dec = MaskDecoder::new(&store.root().pp("decoder"), &cfg).unwrap();
    let c = cfg.channels;
    let pos = sine_position_encoding(8, 8, c, DType::F64, &Device::Cpu).unwrap();
    let image = random_var(&[1, 64, c], 1.0, &mut rng).unwrap();
    let point = random_var(&[1, 1, c], 1.0, &mut rng).unwrap();
    let f1 = random_var(&[1, cfg.channels_f1, 32, 32], 1.0, &mut rng).unwrap();
    let f2 = random_var(&[1, cfg.channels_f2, 16, 16], 1.0, &mut rng).unwrap();
    let r = weights(&[1, 1, 128, 128], &mut rng);
    let mut vars = module_vars(&store);
    vars.extend([
        ("image".into(), image.clone()),
        ("point".into(), point.clone()),
        ("f1".into(), f1.clone()),
        ("f2".into(), f2.clone()),
    ]);
    check(&vars, 2, EPS, ATOL, &mut rng, || {
        let logits = dec.forward(image.as_tensor(), &pos, point.as_tensor(), f1.as_tensor(), f2.as_tensor())?;
        Ok((logits * &r)?.sum_all()?)
    })
    .unwrap()
}

pub fn grad_point_decoder(seed: u64) -> GradReport {
    let cfg = mini_config();
    let mut rng = SeededRng::new(seed);
    let store = VarStore::new(DType::F64, rng.split("init"));
    let dec = PointDecoder::new(&store.root().pp("decoder"), &cfg).unwrap();
    let c = cfg.channels;
    let pos = sine_position_encoding(8, 8, c, DType::F64, &Device::Cpu).unwrap();
    let f = random_var(&[1, 64, c], 1.0, &mut rng).unwrap();
    let rc = weights(&[1, 2], &mut rng);
    let rs = weights(&[1, 1], &mut rng);
    let mut vars = module_vars(&store);
    vars.push(("f_point".into(), f.clone()));
    check(&vars, 3, EPS, ATOL, &mut rng, || {
        let o = dec.forward(f.as_tensor(), &pos)?;
        Ok(((o.coord * &rc)?.sum_all()? + (o.score_logit * &rs)?.sum_all()?)?)
    })
    .unwrap()
}

/// The four losses on 8×8 maps (smooth-L1 and BCE on point-sized inputs).
pub fn grad_losses(seed: u64) -> Vec<(&'static str, GradReport)> {
    let mut rng = SeededRng::new(seed);
    let target = Tensor::from_vec(
        (0..64).map(|_| if rng.uniform() < 0.4 { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
        (1, 1, 8, 8),
        &Device::Cpu,
    )
    .unwrap();
    let z = random_var(&[1, 1, 8, 8], 2.0, &mut rng).unwrap();
    let zv = vec![("logits".to_string(), z.clone())];
    let focal = check(&zv, 64, EPS, ATOL, &mut rng, || focal_loss(z.as_tensor(), &target, 0.25, 2.0)).unwrap();
    let p = Var::from_tensor(&(random_tensor(&[1, 1, 8, 8], &mut rng).unwrap().abs().unwrap() * 0.3).unwrap()).unwrap();
    let pv = vec![("probs".to_string(), p.clone())];
    let dice = check(&pv, 64, EPS, ATOL, &mut rng, || dice_loss(p.as_tensor(), &target, 1.0)).unwrap();
    // keep |d| away from the unit kink
    let d = Var::from_tensor(&Tensor::new(&[[0.31f64, -0.72], [1.6, -2.4]], &Device::Cpu).unwrap()).unwrap();
    let zero = Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
    let dv = vec![("coord".to_string(), d.clone())];
    let sl1 = check(&dv, 4, EPS, ATOL, &mut rng, || smooth_l1(d.as_tensor(), &zero)).unwrap();
    let s = random_var(&[1, 1], 1.5, &mut rng).unwrap();
    let sv = vec![("score".to_string(), s.clone())];
    let bce_pos = check(&sv, 1, EPS, ATOL, &mut rng, || existence_bce(s.as_tensor(), true)).unwrap();
    let bce_neg = check(&sv, 1, EPS, ATOL, &mut rng, || existence_bce(s.as_tensor(), false)).unwrap();
    let bce = if bce_pos.max_rel_err >= bce_neg.max_rel_err { bce_pos } else { bce_neg };
    vec![("focal", focal), ("dice", dice), ("smooth_l1", sl1), ("existence_bce", bce)]
}
