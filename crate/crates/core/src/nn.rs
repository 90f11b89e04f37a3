//! Small layer set on top of `candle_core`.
//!
//! Parameters live in a [`VarStore`] and are initialized from the crate's
//! seeded stream, so a model built twice from the same seed is bit-identical.
//! Only ops with backward support are used; softmax, sigmoid and layer norm
//! are composed from primitives for that reason.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-b, b]`.
    Uniform(f64),
    Normal(f64),
}

#[derive(Debug)]
struct StoreInner {
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Tensor>,
    rng: SeededRng,
}

/// Shared owner of all trainable variables and fixed buffers of a model.
#[derive(Debug, Clone)]
pub struct VarStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl VarStore {
    pub fn new(dtype: DType, rng: SeededRng) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng,
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Vb {
        Vb {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// Trainable variables by name.
    pub fn vars(&self) -> BTreeMap<String, Var> {
        self.inner.lock().unwrap().vars.clone()
    }

    pub fn buffers(&self) -> BTreeMap<String, Tensor> {
        self.inner.lock().unwrap().buffers.clone()
    }

    /// Every named tensor (variables and buffers).
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.inner.lock().unwrap();
        let mut out: BTreeMap<String, Tensor> = inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        out.extend(inner.buffers.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    /// Overwrites stored values; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let expected: Vec<&String> = inner.vars.keys().chain(inner.buffers.keys()).collect();
        for name in expected {
            if !tensors.contains_key(name) {
                return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
            }
        }
        for (name, t) in tensors {
            let t = t.to_dtype(self.dtype)?;
            if let Some(var) = inner.vars.get(name) {
                if var.dims() != t.dims() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for `{name}`: model {:?}, checkpoint {:?}",
                        var.dims(),
                        t.dims()
                    )));
                }
                var.set(&t)?;
            } else if let Some(buf) = inner.buffers.get_mut(name) {
                if buf.dims() != t.dims() {
                    return Err(Error::Checkpoint(format!("shape mismatch for buffer `{name}`")));
                }
                *buf = t;
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(())
    }

    fn sample(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => {
                let mut inner = self.inner.lock().unwrap();
                (0..n).map(|_| inner.rng.uniform_range(-b, b)).collect()
            }
            Init::Normal(s) => {
                let mut inner = self.inner.lock().unwrap();
                (0..n).map(|_| s * inner.rng.normal()).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}

/// Path-scoped view of a [`VarStore`].
#[derive(Debug, Clone)]
pub struct Vb {
    store: VarStore,
    prefix: String,
}

impl Vb {
    pub fn pp(&self, name: &str) -> Vb {
        Vb {
            store: self.store.clone(),
            prefix: self.path(name),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = self.store.sample(shape, init)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let path = self.path(name);
        let mut inner = self.store.inner.lock().unwrap();
        if inner.vars.insert(path.clone(), var).is_some() {
            panic!("duplicate parameter `{path}`");
        }
        Ok(out)
    }

    /// Registers a fixed tensor that is saved with the model but never trained.
    pub fn buffer(&self, name: &str, value: Tensor) -> Result<Tensor> {
        let value = value.to_dtype(self.store.dtype)?;
        let path = self.path(name);
        self.store
            .inner
            .lock()
            .unwrap()
            .buffers
            .insert(path, value.clone());
        Ok(value)
    }

    pub fn random_buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = self.store.sample(shape, init)?;
        self.buffer(name, t)
    }

    /// Fetches a buffer by relative name (buffers can be replaced by `load`).
    pub fn get_buffer(&self, name: &str) -> Option<Tensor> {
        self.store.inner.lock().unwrap().buffers.get(&self.path(name)).cloned()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &Vb, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = vb.var("weight", &[output, input], Init::Uniform(bound))?;
        let bias = if bias {
            Some(vb.var("bias", &[output], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        vb: &Vb,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((input * kernel * kernel) as f64).sqrt();
        let weight = vb.var("weight", &[output, input, kernel, kernel], Init::Uniform(bound))?;
        let bias = if bias {
            Some(vb.var("bias", &[output], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

/// 2×2 stride-2 transposed convolution realized as a per-pixel linear map
/// followed by a pixel shuffle.
#[derive(Debug, Clone)]
pub struct Upconv2x {
    proj: Conv2d,
    output: usize,
}

impl Upconv2x {
    pub fn new(vb: &Vb, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(vb, input, output * 4, 1, 1, 0, true)?,
            output,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let y = self.proj.forward(x)?;
        let y = y
            .reshape((b, self.output, 2, 2, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .contiguous()?
            .reshape((b, self.output, 2 * h, 2 * w))?;
        Ok(y)
    }
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vb: &Vb, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.var("weight", &[dim], Init::Ones)?,
            beta: vb.var("bias", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = normalize(x, D::Minus1, self.eps)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Layer norm over the channel dimension of an NCHW map.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(vb: &Vb, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.var("weight", &[channels], Init::Ones)?,
            beta: vb.var("bias", &[channels], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let y = normalize(x, 1, self.eps)?;
        Ok(y
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

fn normalize<Dim: candle_core::shape::Dim + Copy>(x: &Tensor, dim: Dim, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(dim)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(dim)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(vb: &Vb, input: usize, hidden: usize, output: usize, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                let a = if i == 0 { input } else { hidden };
                let b = if i + 1 == depth { output } else { hidden };
                Linear::new(&vb.pp(&format!("layers.{i}")), a, b, true)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.gelu()?;
            }
        }
        Ok(x)
    }
}

/// Multi-head scaled dot-product attention on `(1, n, c)` sequences.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(vb: &Vb, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&vb.pp("q_proj"), dim, dim, true)?,
            k: Linear::new(&vb.pp("k_proj"), dim, dim, true)?,
            v: Linear::new(&vb.pp("v_proj"), dim, dim, true)?,
            o: Linear::new(&vb.pp("out_proj"), dim, dim, true)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the output and the head-averaged attention weights `(1, nq, nk)`.
    pub fn forward_with_weights(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, nq, c) = q.dims3()?;
        let qh = self.split(&self.q.forward(q)?)?;
        let kh = self.split(&self.k.forward(k)?)?;
        let vh = self.split(&self.v.forward(v)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let logits = (qh.matmul(&kh.t()?.contiguous()?)? * scale)?;
        let attn = softmax_last(&logits)?;
        let out = attn.matmul(&vh)?.transpose(1, 2)?.contiguous()?.reshape((b, nq, c))?;
        Ok((self.o.forward(&out)?, attn.mean(1)?))
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(q, k, v)?.0)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Logistic function via `tanh`, which stays finite in both directions.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `log(1 + exp(x))` in a form that cannot overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Row interpolation matrix `(out, inp)` for half-pixel aligned bilinear
/// resampling with clamped borders.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    for i in 0..out {
        let s = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, inp as f64 - 1.0);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let f = s - i0 as f64;
        m[i * inp + i0] += 1.0 - f;
        m[i * inp + i1] += f;
    }
    m
}

/// Bilinear resize of an NCHW tensor as two matrix products, so it is
/// differentiable.
#[derive(Debug, Clone)]
pub struct BilinearResize {
    rows: Tensor,
    cols_t: Tensor,
}

impl BilinearResize {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize), dtype: DType, device: &Device) -> Result<Self> {
        let rows = Tensor::from_vec(bilinear_matrix(out_hw.0, in_hw.0), (out_hw.0, in_hw.0), device)?
            .to_dtype(dtype)?;
        let cols_t = Tensor::from_vec(bilinear_matrix(out_hw.1, in_hw.1), (out_hw.1, in_hw.1), device)?
            .to_dtype(dtype)?
            .t()?
            .contiguous()?;
        Ok(Self { rows, cols_t })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.cols_t)?;
        Ok(self.rows.broadcast_matmul(&y)?)
    }
}

/// Fixed 2-D sine/cosine position encoding for an `h`×`w` grid, `(1, h·w, c)`.
pub fn sine_position_encoding(h: usize, w: usize, c: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let quarter = c / 4;
    let mut data = vec![0.0f64; h * w * c];
    for r in 0..h {
        for col in 0..w {
            let base = (r * w + col) * c;
            let y = (r as f64 + 0.5) / h as f64;
            let x = (col as f64 + 0.5) / w as f64;
            for i in 0..quarter {
                let freq = std::f64::consts::PI * (1u64 << (i % 8)) as f64 * (1.0 + (i / 8) as f64 * 0.5);
                data[base + i] = (freq * y).sin();
                data[base + quarter + i] = (freq * y).cos();
                data[base + 2 * quarter + i] = (freq * x).sin();
                data[base + 3 * quarter + i] = (freq * x).cos();
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, h * w, c), device)?.to_dtype(dtype)?)
}

/// Normalized `[-1, 1]` cell-center coordinates `(1, h·w, 2)` as `(x, y)`.
pub fn grid_coordinates(h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for c in 0..w {
            data.push((c as f64 + 0.5) / w as f64 * 2.0 - 1.0);
            data.push((r as f64 + 0.5) / h as f64 * 2.0 - 1.0);
        }
    }
    Ok(Tensor::from_vec(data, (1, h * w, 2), device)?.to_dtype(dtype)?)
}

/// `(1, c, h, w)` map to `(1, h·w, c)` tokens.
pub fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// `(1, h·w, c)` tokens back to a `(1, c, h, w)` map.
pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Depthwise application of a fixed `(k_out, 1, K, K)` filter bank to every
/// channel of `(1, c, h, w)`, summing the `k_out` responses.
pub fn depthwise_bank_sum(x: &Tensor, bank: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let k = bank.dim(2)?;
    let y = x.reshape((b * c, 1, h, w))?.conv2d(bank, k / 2, 1, 1, 1)?;
    Ok(y.sum(1)?.reshape((b, c, h, w))?)
}

/// Order-independent digest of the named tensors' bytes.
pub fn hash_tensors<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update(name.as_bytes());
        let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}
