//! Central finite-difference checks of autodiff gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}

/// Compares `∂loss/∂v` from backprop with `(L(v+ε) − L(v−ε)) / 2ε` at
/// `per_var` random entries of every variable. Relative error is
/// `|a − n| / max(|a|, |n|, atol·max(1, |L|))`; the floor keeps entries whose
/// true derivative is zero from being scored on finite-difference roundoff,
/// which grows with the loss magnitude.
pub fn check(
    vars: &[(String, Var)],
    per_var: usize,
    eps: f64,
    atol: f64,
    rng: &mut SeededRng,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<GradReport> {
    let l = loss()?;
    if l.dtype() != DType::F64 {
        return Err(Error::Input("gradient checks need float64".into()));
    }
    let floor = atol * scalar(&l)?.abs().max(1.0);
    let grads = l.backward()?;
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (name, var) in vars {
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        let picks: Vec<usize> = if base.len() <= per_var {
            (0..base.len()).collect()
        } else {
            (0..per_var).map(|_| rng.below(base.len())).collect()
        };
        for i in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), var.device())?)?;
                scalar(&loss()?)
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), var.device())?)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if report.worst.is_empty() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}

/// A float64 variable filled with standard normal draws times `scale`.
pub fn random_var(shape: &[usize], scale: f64, rng: &mut SeededRng) -> Result<Var> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.normal() * scale).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?)?)
}

/// A constant float64 tensor of standard normal draws.
pub fn random_tensor(shape: &[usize], rng: &mut SeededRng) -> Result<Tensor> {
    Ok(random_var(shape, 1.0, rng)?.as_tensor().detach())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_a_quadratic() {
        let mut rng = SeededRng::new(1);
        let x = random_var(&[5], 1.0, &mut rng).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let r = check(&vars, 5, 1e-5, 1e-8, &mut rng, || Ok((x.as_tensor().sqr()? * 3.0)?.sum_all()?)).unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = SeededRng::new(2);
        let x = random_var(&[4], 1.0, &mut rng).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        // the detached factor hides half of the true derivative of x²
        let r = check(&vars, 4, 1e-5, 1e-8, &mut rng, || {
            Ok((x.as_tensor() * x.as_tensor().detach())?.sum_all()?)
        })
        .unwrap();
        assert!(r.max_rel_err > 0.4, "{r:?}");
    }
}
