//! Adam with named parameter groups and serializable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::TrainParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<(String, Var)>,
    pub max_lr: f64,
}

#[derive(Debug)]
pub struct Adam {
    groups: Vec<ParamGroup>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(groups: Vec<ParamGroup>, p: &TrainParams) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for g in &groups {
            for (name, var) in &g.params {
                m.insert(name.clone(), var.as_tensor().zeros_like()?);
                v.insert(name.clone(), var.as_tensor().zeros_like()?);
            }
        }
        Ok(Self {
            groups,
            m,
            v,
            t: 0,
            beta1: p.adam_beta1,
            beta2: p.adam_beta2,
            eps: p.adam_eps,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn param_names(&self) -> Vec<String> {
        self.groups.iter().flat_map(|g| g.params.iter().map(|(n, _)| n.clone())).collect()
    }

    /// One update with `lr = max_lr · factor` per group. Parameters that did
    /// not receive a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, factor: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for g in &self.groups {
            let lr = g.max_lr * factor;
            for (name, var) in &g.params {
                let Some(grad) = grads.get(var.as_tensor()) else {
                    continue;
                };
                // gradients carry op history; moments must not keep it alive
                let grad = grad.detach();
                let m = self.m.get_mut(name).expect("state registered");
                *m = ((&*m * self.beta1)? + (&grad * (1.0 - self.beta1))?)?.detach();
                let v = self.v.get_mut(name).expect("state registered");
                *v = ((&*v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?.detach();
                let m_hat = (&*m / bc1)?;
                let v_hat = (&*v / bc2)?;
                let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
                var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            }
        }
        Ok(())
    }

    /// Moment buffers named `<param>.m` / `<param>.v`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("{k}.m"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{k}.v"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        for (moments, suffix) in [(&mut self.m, "m"), (&mut self.v, "v")] {
            for (k, t) in moments.iter_mut() {
                let key = format!("{k}.{suffix}");
                let s = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing `{key}`")))?;
                if s.dims() != t.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state `{key}` has wrong shape")));
                }
                *t = s.to_dtype(t.dtype())?;
            }
        }
        self.t = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let group = ParamGroup {
            name: "g".into(),
            params: vec![("w".into(), var.clone())],
            max_lr: 0.1,
        };
        let mut adam = Adam::new(vec![group], &TrainParams::default()).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        adam.step(&loss.backward().unwrap(), 1.0).unwrap();
        let v: Vec<f64> = var.as_tensor().to_vec1().unwrap();
        // bias-corrected first step is lr·sign(g)
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let var = Var::from_tensor(&Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
        let group = ParamGroup {
            name: "g".into(),
            params: vec![("w".into(), var.clone())],
            max_lr: 0.05,
        };
        let mut adam = Adam::new(vec![group], &TrainParams::default()).unwrap();
        for _ in 0..400 {
            let loss = (var.as_tensor() - 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
            adam.step(&loss.backward().unwrap(), 1.0).unwrap();
        }
        let v: Vec<f64> = var.as_tensor().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
        assert!((v[0] - 1.0).abs() < 1e-2);
    }
}
