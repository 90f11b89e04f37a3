//! Resampling of frames, masks, points and flow to the model resolution.

use ndarray::{Array2, Array3};

use crate::data::Clip;
use crate::pointbranch::flow::FlowField;
use crate::types::{BinaryMask, BleedAnnotation, ImageFrame, Point};

/// Source sample coordinate for output index `i` (pixel-center alignment).
fn src_coord(i: usize, out: usize, inp: usize) -> f64 {
    ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, inp as f64 - 1.0)
}

pub fn bilinear_rgb(px: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, ch) = px.dim();
    if (h, w) == (out_h, out_w) {
        return px.clone();
    }
    Array3::from_shape_fn((out_h, out_w, ch), |(r, c, k)| {
        let y = src_coord(r, out_h, h);
        let x = src_coord(c, out_w, w);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let top = px[[y0, x0, k]] * (1.0 - fx) + px[[y0, x1, k]] * fx;
        let bot = px[[y1, x0, k]] * (1.0 - fx) + px[[y1, x1, k]] * fx;
        (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0)
    })
}

pub fn nearest_mask(m: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let (h, w) = m.dim();
    if (h, w) == (out_h, out_w) {
        return m.clone();
    }
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let y = ((r as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        let x = ((c as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
        m[[y.min(h - 1), x.min(w - 1)]]
    })
}

pub fn scale_point(p: Point, from: (usize, usize), to: (usize, usize)) -> Point {
    Point::new(
        p.x * to.1 as f64 / from.1 as f64,
        p.y * to.0 as f64 / from.0 as f64,
    )
}

/// Resamples a flow field and rescales its vectors to the new pixel grid.
pub fn resize_flow(flow: &FlowField, out_h: usize, out_w: usize) -> FlowField {
    let (h, w, _) = flow.vectors.dim();
    if (h, w) == (out_h, out_w) {
        return flow.clone();
    }
    let (sy, sx) = (out_h as f32 / h as f32, out_w as f32 / w as f32);
    let vectors = Array3::from_shape_fn((out_h, out_w, 2), |(r, c, k)| {
        let y = src_coord(r, out_h, h).round() as usize;
        let x = src_coord(c, out_w, w).round() as usize;
        flow.vectors[[y, x, k]] * if k == 0 { sx } else { sy }
    });
    FlowField {
        vectors,
        pair: flow.pair,
    }
}

/// Resizes every frame and annotation of a clip to `size`×`size`.
pub fn resize_clip(clip: &Clip, size: usize) -> Clip {
    let (h, w) = clip.dims();
    if (h, w) == (size, size) {
        return clip.clone();
    }
    let frames = clip
        .frames
        .iter()
        .map(|(f, a)| {
            let px = bilinear_rgb(f.pixels(), size, size);
            let frame = ImageFrame::new(px, f.frame_index, f.clip_id.clone())
                .expect("bilinear resampling keeps values in range");
            let mask = a.mask.as_ref().map(|m| nearest_mask(m, size, size));
            let point = a.point.map(|p| {
                let q = scale_point(p, (h, w), (size, size));
                Point::new(q.x.min(size as f64 - 1e-3), q.y.min(size as f64 - 1e-3))
            });
            let mut ann = BleedAnnotation::new(mask, point);
            // nearest sampling can drop a tiny region entirely; keep the
            // annotated flag only when something survives
            ann.has_region = ann.mask.as_ref().is_some_and(|m| m.iter().any(|&b| b));
            (frame, ann)
        })
        .collect();
    Clip {
        clip_id: clip.clip_id.clone(),
        frames,
        fps_tag: clip.fps_tag,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_noop() {
        let px = Array3::from_shape_fn((16, 16, 3), |(r, c, k)| ((r + c + k) % 5) as f32 / 5.0);
        assert_eq!(bilinear_rgb(&px, 16, 16), px);
    }

    #[test]
    fn constant_image_stays_constant() {
        let px = Array3::from_elem((20, 30, 3), 0.25f32);
        let out = bilinear_rgb(&px, 16, 16);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn flow_vectors_scale_with_grid() {
        let f = FlowField::uniform(32, 64, 2.0, 1.0, (0, 1));
        let g = resize_flow(&f, 16, 16);
        assert!((g.vectors[[3, 3, 0]] - 0.5).abs() < 1e-6);
        assert!((g.vectors[[3, 3, 1]] - 0.5).abs() < 1e-6);
    }
}
