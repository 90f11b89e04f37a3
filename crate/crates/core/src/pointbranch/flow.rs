//! Dense inter-frame flow.
//!
//! Flow backends are frozen: none of them carries trainable parameters, and
//! the model consumes their output as constants.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::config::{FlowBackend, FlowParams};
use crate::data::{self, resize, Clip};
use crate::error::{Error, Result};
use crate::types::ImageFrame;

/// Per-pixel displacement `(dx, dy)` from frame `pair.0` to `pair.1`,
/// stored `[row, col, {dx, dy}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vectors: Array3<f32>,
    pub pair: (usize, usize),
}

impl FlowField {
    pub fn zeros(h: usize, w: usize, pair: (usize, usize)) -> Self {
        Self {
            vectors: Array3::zeros((h, w, 2)),
            pair,
        }
    }

    pub fn uniform(h: usize, w: usize, dx: f32, dy: f32, pair: (usize, usize)) -> Self {
        Self {
            vectors: Array3::from_shape_fn((h, w, 2), |(_, _, k)| if k == 0 { dx } else { dy }),
            pair,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.vectors.dim();
        (h, w)
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|v| v.is_finite())
    }
}

/// Pyramidal Horn–Schunck with per-level warping.
#[derive(Debug, Clone)]
pub struct ClassicalFlow {
    pub levels: usize,
    pub warps: usize,
    pub iterations: usize,
    /// Smoothness weight α on intensity-normalized images.
    pub smoothness: f32,
}

impl Default for ClassicalFlow {
    fn default() -> Self {
        Self::from_params(&FlowParams::default())
    }
}

impl ClassicalFlow {
    pub fn from_params(p: &FlowParams) -> Self {
        Self {
            levels: p.levels,
            warps: p.warps,
            iterations: p.iterations,
            smoothness: p.smoothness as f32,
        }
    }

    pub fn estimate(&self, prev: &ImageFrame, cur: &ImageFrame) -> Result<FlowField> {
        if (prev.height(), prev.width()) != (cur.height(), cur.width()) {
            return Err(Error::Input(format!(
                "flow frames differ in size: {}x{} vs {}x{}",
                prev.width(),
                prev.height(),
                cur.width(),
                cur.height()
            )));
        }
        let (a, b) = normalize_pair(&prev.gray(), &cur.gray());
        let (u, v) = self.estimate_gray(&a, &b);
        let (h, w) = u.dim();
        let mut vectors = Array3::zeros((h, w, 2));
        for ((r, c), &x) in u.indexed_iter() {
            vectors[[r, c, 0]] = x;
            vectors[[r, c, 1]] = v[[r, c]];
        }
        Ok(FlowField {
            vectors,
            pair: (prev.frame_index, cur.frame_index),
        })
    }

    fn estimate_gray(&self, a: &Array2<f32>, b: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
        let mut pa = vec![a.clone()];
        let mut pb = vec![b.clone()];
        while pa.len() < self.levels {
            let last = pa.last().unwrap();
            if last.dim().0 < 16 || last.dim().1 < 16 {
                break;
            }
            pa.push(pyr_down(last));
            pb.push(pyr_down(pb.last().unwrap()));
        }
        let coarse = pa.last().unwrap().dim();
        let mut u = Array2::<f32>::zeros(coarse);
        let mut v = Array2::<f32>::zeros(coarse);
        for level in (0..pa.len()).rev() {
            let dim = pa[level].dim();
            if u.dim() != dim {
                u = upsample_flow(&u, dim);
                v = upsample_flow(&v, dim);
            }
            for _ in 0..self.warps {
                self.refine(&pa[level], &pb[level], &mut u, &mut v);
            }
        }
        (u, v)
    }

    fn refine(&self, a: &Array2<f32>, b: &Array2<f32>, u: &mut Array2<f32>, v: &mut Array2<f32>) {
        let (h, w) = a.dim();
        let bw = warp(b, u, v);
        let (ax, ay) = gradients(a);
        let (bx, by) = gradients(&bw);
        // pixels whose match falls outside the frame carry no data term
        let inside = Array2::from_shape_fn((h, w), |(r, c)| {
            let y = r as f32 + v[[r, c]];
            let x = c as f32 + u[[r, c]];
            if y >= 0.0 && y <= (h - 1) as f32 && x >= 0.0 && x <= (w - 1) as f32 {
                1.0
            } else {
                0.0
            }
        });
        let ix = (&ax + &bx) * 0.5 * &inside;
        let iy = (&ay + &by) * 0.5 * &inside;
        let it = (&bw - a) * &inside;
        let u0 = u.clone();
        let v0 = v.clone();
        let alpha2 = self.smoothness * self.smoothness;
        let denom = Array2::from_shape_fn((h, w), |p| alpha2 + ix[p] * ix[p] + iy[p] * iy[p]);
        for _ in 0..self.iterations {
            let ub = neighbour_mean(u);
            let vb = neighbour_mean(v);
            for r in 0..h {
                for c in 0..w {
                    let p = (r, c);
                    let res = ix[p] * (ub[p] - u0[p]) + iy[p] * (vb[p] - v0[p]) + it[p];
                    u[p] = ub[p] - ix[p] * res / denom[p];
                    v[p] = vb[p] - iy[p] * res / denom[p];
                }
            }
        }
    }
}

/// Scales both images by the statistics of the first.
fn normalize_pair(a: &Array2<f32>, b: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let n = a.len() as f32;
    let mean = a.sum() / n;
    let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / n;
    let scale = 1.0 / var.sqrt().max(1e-3);
    (a.mapv(|x| (x - mean) * scale), b.mapv(|x| (x - mean) * scale))
}

fn at_clamped(img: &Array2<f32>, r: isize, c: isize) -> f32 {
    let (h, w) = img.dim();
    img[[r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize]]
}

fn bilinear(img: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

fn warp(img: &Array2<f32>, u: &Array2<f32>, v: &Array2<f32>) -> Array2<f32> {
    Array2::from_shape_fn(img.dim(), |(r, c)| {
        bilinear(img, r as f32 + v[[r, c]], c as f32 + u[[r, c]])
    })
}

fn gradients(img: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let gx = Array2::from_shape_fn(img.dim(), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        0.5 * (at_clamped(img, r, c + 1) - at_clamped(img, r, c - 1))
    });
    let gy = Array2::from_shape_fn(img.dim(), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        0.5 * (at_clamped(img, r + 1, c) - at_clamped(img, r - 1, c))
    });
    (gx, gy)
}

fn neighbour_mean(f: &Array2<f32>) -> Array2<f32> {
    Array2::from_shape_fn(f.dim(), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        0.25 * (at_clamped(f, r - 1, c) + at_clamped(f, r + 1, c) + at_clamped(f, r, c - 1) + at_clamped(f, r, c + 1))
    })
}

/// 5-tap binomial blur then decimation by two.
fn pyr_down(img: &Array2<f32>) -> Array2<f32> {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w) = img.dim();
    let tmp = Array2::from_shape_fn((h, w), |(r, c)| {
        (0..5).map(|i| K[i] * at_clamped(img, r as isize, c as isize + i as isize - 2)).sum()
    });
    let blurred = Array2::from_shape_fn((h, w), |(r, c)| {
        (0..5).map(|i| K[i] * at_clamped(&tmp, r as isize + i as isize - 2, c as isize)).sum::<f32>()
    });
    Array2::from_shape_fn((h.div_ceil(2), w.div_ceil(2)), |(r, c)| blurred[[2 * r, 2 * c]])
}

fn upsample_flow(f: &Array2<f32>, dim: (usize, usize)) -> Array2<f32> {
    let (h, w) = f.dim();
    let (sy, sx) = (h as f32 / dim.0 as f32, w as f32 / dim.1 as f32);
    let scale = dim.1 as f32 / w as f32;
    Array2::from_shape_fn(dim, |(r, c)| {
        let y = (r as f32 + 0.5) * sy - 0.5;
        let x = (c as f32 + 0.5) * sx - 0.5;
        bilinear(f, y, x) * scale
    })
}

/// Source of inter-frame flow for a clip.
#[derive(Debug, Clone)]
pub enum FlowSource {
    Classical(ClassicalFlow),
    /// Precomputed fields, typically generator ground truth.
    Injected(Vec<FlowField>),
    /// `.flo` files read from `<dir>/<clip_id>/%06d.flo`.
    External(PathBuf),
}

impl FlowSource {
    pub fn backend(&self) -> FlowBackend {
        match self {
            FlowSource::Classical(_) => FlowBackend::Classical,
            FlowSource::Injected(_) => FlowBackend::Injected,
            FlowSource::External(_) => FlowBackend::External,
        }
    }
}

/// Flow between `prev` and `cur` with a given backend.
pub fn estimate_flow(prev: &ImageFrame, cur: &ImageFrame, source: &FlowSource) -> Result<FlowField> {
    match source {
        FlowSource::Classical(f) => f.estimate(prev, cur),
        FlowSource::Injected(fields) => {
            let pair = (prev.frame_index, cur.frame_index);
            let f = fields
                .iter()
                .find(|f| f.pair == pair)
                .ok_or_else(|| Error::Input(format!("no injected flow for pair {pair:?}")))?;
            if f.dims() != (cur.height(), cur.width()) {
                return Ok(resize::resize_flow(f, cur.height(), cur.width()));
            }
            Ok(f.clone())
        }
        FlowSource::External(dir) => {
            let path = dir.join(&cur.clip_id).join(format!("{:06}.flo", cur.frame_index));
            let mut f = data::flo::read_flo(&path)?;
            f.pair = (prev.frame_index, cur.frame_index);
            Ok(resize::resize_flow(&f, cur.height(), cur.width()))
        }
    }
}

/// Flow source for a dataset clip under the configured backend. Injected
/// fields are the clip's ground-truth sidecars under `<root>/clips/<id>/flow`.
pub fn source_for_clip(p: &FlowParams, root: &Path, clip: &Clip) -> Result<FlowSource> {
    Ok(match p.backend {
        FlowBackend::Classical => FlowSource::Classical(ClassicalFlow::from_params(p)),
        FlowBackend::Injected => {
            let dir = data::clip_dir(root, &clip.clip_id).join("flow");
            FlowSource::Injected(data::read_flow_sidecars(&dir, clip)?)
        }
        FlowBackend::External => FlowSource::External(PathBuf::from(&p.external_dir)),
    })
}

/// Flows for every consecutive pair in a clip; entry `i` ends at frame `i + 1`.
pub fn clip_flows(clip: &Clip, source: &FlowSource) -> Result<Vec<FlowField>> {
    clip.frames
        .windows(2)
        .map(|p| estimate_flow(&p[0].0, &p[1].0, source))
        .collect()
}
