//! Oriented Gabor kernels and their discrete Laplacians.
//!
//! Kernels are indexed `[row, col]` with the origin at the center, so
//! `kernel[[half + y, half + x]]` holds the value at `(x, y)`.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::config::GaborParams;
use crate::error::{Error, Result};

/// Real part of the Gabor wavelet at `(x, y)` for orientation `theta`.
pub fn gabor_value(p: &GaborParams, theta: f64, x: f64, y: f64) -> f64 {
    let xr = x * theta.cos() + y * theta.sin();
    let yr = -x * theta.sin() + y * theta.cos();
    let envelope = (-(xr * xr + p.aspect * p.aspect * yr * yr) / (2.0 * p.sigma * p.sigma)).exp();
    envelope * (2.0 * std::f64::consts::PI * xr / p.wavelength + p.phase).cos()
}

fn check(p: &GaborParams) -> Result<()> {
    if !(p.sigma > 0.0) {
        return Err(Error::Parameter {
            name: "sigma",
            reason: format!("must be positive, got {}", p.sigma),
        });
    }
    if !(p.wavelength > 0.0) {
        return Err(Error::Parameter {
            name: "wavelength",
            reason: format!("must be positive, got {}", p.wavelength),
        });
    }
    if !(p.aspect > 0.0) {
        return Err(Error::Parameter {
            name: "aspect",
            reason: format!("must be positive, got {}", p.aspect),
        });
    }
    if p.kernel_size % 2 == 0 {
        return Err(Error::Parameter {
            name: "kernel_size",
            reason: format!("must be odd, got {}", p.kernel_size),
        });
    }
    Ok(())
}

/// Samples the real Gabor kernel on the centered integer grid.
pub fn gabor_kernel(p: &GaborParams, theta: f64) -> Result<Array2<f64>> {
    check(p)?;
    let k = p.kernel_size;
    let half = (k / 2) as f64;
    Ok(Array2::from_shape_fn((k, k), |(r, c)| {
        gabor_value(p, theta, c as f64 - half, r as f64 - half)
    }))
}

/// 5-point discrete Laplacian with replicated borders.
pub fn laplacian_5pt(f: &Array2<f64>) -> Array2<f64> {
    let (h, w) = f.dim();
    let at = |r: isize, c: isize| f[[r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize]];
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c)
    })
}

#[derive(Debug, Clone)]
pub struct GaborBank {
    pub params: GaborParams,
    pub kernels: Vec<Array2<f64>>,
}

impl GaborBank {
    pub fn new(params: &GaborParams) -> Result<Self> {
        let kernels = params
            .thetas()
            .into_iter()
            .map(|t| gabor_kernel(params, t))
            .collect::<Result<_>>()?;
        Ok(Self {
            params: params.clone(),
            kernels,
        })
    }
}

/// The `L_g` kernels: Laplacian of each oriented Gabor kernel.
pub fn laplacian_of_gabor(bank: &GaborBank) -> Vec<Array2<f64>> {
    bank.kernels.iter().map(laplacian_5pt).collect()
}

/// Packs kernels as a `(n, 1, K, K)` conv weight.
pub fn kernels_to_tensor(kernels: &[Array2<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let k = kernels[0].dim().0;
    let data: Vec<f64> = kernels.iter().flat_map(|m| m.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (kernels.len(), 1, k, k), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn origin_is_cos_phase() {
        let mut p = GaborParams::default();
        let half = p.kernel_size / 2;
        for theta in p.thetas() {
            assert!((gabor_kernel(&p, theta).unwrap()[[half, half]] - 1.0).abs() < 1e-12);
        }
        p.phase = PI / 2.0;
        assert!(gabor_kernel(&p, 0.0).unwrap()[[half, half]].abs() < 1e-12);
    }

    #[test]
    fn off_center_value() {
        let p = GaborParams::default();
        let k = gabor_kernel(&p, 0.0).unwrap();
        // x'=2: envelope exp(-4/8), carrier cos(2π·2/4)
        let expected = (-0.5f64).exp() * PI.cos();
        assert!((k[[3, 5]] - expected).abs() < 1e-12);
        assert!((k[[3, 5]] + 0.6065).abs() < 1e-4);
    }

    #[test]
    fn rotation_by_quarter_turn_transposes() {
        let p = GaborParams::default();
        let a = gabor_kernel(&p, 0.0).unwrap();
        let b = gabor_kernel(&p, PI / 2.0).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                assert!((a[[r, c]] - b[[c, r]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let p = GaborParams {
            sigma: 0.0,
            ..GaborParams::default()
        };
        assert!(matches!(gabor_kernel(&p, 0.0), Err(Error::Parameter { name: "sigma", .. })));
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let f = Array2::from_elem((7, 7), 1.0);
        assert!(laplacian_5pt(&f).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn laplacian_of_x_squared_is_two() {
        let f = Array2::from_shape_fn((7, 7), |(_, c)| (c as f64 - 3.0).powi(2));
        let l = laplacian_5pt(&f);
        for r in 1..6 {
            for c in 1..6 {
                assert!((l[[r, c]] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lg_filter_annihilates_constant_maps() {
        let bank = GaborBank::new(&GaborParams::default()).unwrap();
        let lg = kernels_to_tensor(&laplacian_of_gabor(&bank), DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::full(3.0f64, (1, 2, 20, 20), &Device::Cpu).unwrap();
        let y = crate::nn::depthwise_bank_sum(&x, &lg).unwrap();
        let v = y.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // interior: at least K/2 + 1 from the zero-padded border
        for ch in 0..2 {
            for r in 4..16 {
                for c in 4..16 {
                    assert!(v[ch * 400 + r * 20 + c].abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn lg_kernels_have_zero_mean() {
        let bank = GaborBank::new(&GaborParams::default()).unwrap();
        for (g, l) in bank.kernels.iter().zip(laplacian_of_gabor(&bank)) {
            let scale: f64 = g.iter().map(|v| v.abs()).sum();
            // replicated borders make the stencil sum telescope to zero
            assert!(l.sum().abs() / scale < 1e-6);
        }
    }
}
