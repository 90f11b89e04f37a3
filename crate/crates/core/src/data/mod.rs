//! Dataset layout, loading, windowing and ground-truth derivation.
//!
//! ```text
//! root/splits.json                          {"train": [...], "test": [...]}
//! root/clips/<clip_id>/frames/%06d.png      8-bit RGB
//! root/clips/<clip_id>/masks/%06d.png       8-bit gray, >= 128 is bleed
//! root/clips/<clip_id>/annotations.json     {"fps", "frames": [{"idx", "point", "has_region"}]}
//! root/clips/<clip_id>/flow/%06d.flo        optional ground-truth flow (idx-1 -> idx)
//! root/clips/<clip_id>/camera_path.json     optional camera displacements
//! ```

pub mod flo;
pub mod resize;
pub mod synth;

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::pointbranch::flow::FlowField;
use crate::types::{BinaryMask, BleedAnnotation, ImageFrame, Point};

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub clip_id: String,
    pub frames: Vec<(ImageFrame, BleedAnnotation)>,
    pub fps_tag: f64,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        let f = &self.frames[0].0;
        (f.height(), f.width())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| Error::ClipLoad {
            clip_id: self.clip_id.clone(),
            reason,
        };
        if self.frames.is_empty() {
            return Err(err("clip has no frames".into()));
        }
        let (h, w) = self.dims();
        let first = self.frames[0].0.frame_index;
        for (i, (frame, ann)) in self.frames.iter().enumerate() {
            if frame.frame_index != first + i {
                return Err(err(format!(
                    "frame indices not contiguous: expected {}, found {}",
                    first + i,
                    frame.frame_index
                )));
            }
            if (frame.height(), frame.width()) != (h, w) {
                return Err(err(format!("frame {} has a different size", frame.frame_index)));
            }
            ann.validate(h, w)
                .map_err(|e| err(format!("frame {}: {e}", frame.frame_index)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameRecord {
    pub idx: usize,
    pub point: Option<[f64; 2]>,
    pub has_region: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationFile {
    pub fps: f64,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn clip_dir(root: &Path, clip_id: &str) -> PathBuf {
    root.join("clips").join(clip_id)
}

pub fn frame_file(idx: usize) -> String {
    format!("{idx:06}.png")
}

pub fn load_splits(root: &Path) -> Result<Splits> {
    let path = root.join("splits.json");
    let text = std::fs::read_to_string(&path).at(&path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_splits(root: &Path, splits: &Splits) -> Result<()> {
    let path = root.join("splits.json");
    std::fs::write(&path, serde_json::to_string_pretty(splits)? + "\n").at(&path)
}

pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        img.get_pixel(c as u32, r as u32)[k] as f32 / 255.0
    }))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] >= 128
    }))
}

pub fn rgb_to_image(pixels: &Array3<f32>) -> image::RgbImage {
    let (h, w, _) = pixels.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let px = |k| (pixels[[r as usize, c as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn mask_to_image(mask: &BinaryMask) -> image::GrayImage {
    let (h, w) = mask.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |c, r| {
        image::Luma([if mask[[r as usize, c as usize]] { 255 } else { 0 }])
    })
}

/// Loads and validates one clip from the dataset layout.
pub fn load_clip(root: &Path, clip_id: &str) -> Result<Clip> {
    let dir = clip_dir(root, clip_id);
    let load_err = |reason: String| Error::ClipLoad {
        clip_id: clip_id.to_string(),
        reason,
    };
    let ann_path = dir.join("annotations.json");
    let text = std::fs::read_to_string(&ann_path)
        .map_err(|e| load_err(format!("{}: {e}", ann_path.display())))?;
    let ann: AnnotationFile = serde_json::from_str(&text)
        .map_err(|e| load_err(format!("malformed annotations.json: {e}")))?;

    let mut frames = Vec::with_capacity(ann.frames.len());
    for rec in &ann.frames {
        let fpath = dir.join("frames").join(frame_file(rec.idx));
        if !fpath.exists() {
            return Err(load_err(format!("missing frame file {}", fpath.display())));
        }
        let pixels = read_rgb(&fpath).map_err(|e| load_err(format!("frame {}: {e}", rec.idx)))?;
        let (h, w, _) = pixels.dim();
        let mpath = dir.join("masks").join(frame_file(rec.idx));
        let mask = if mpath.exists() {
            let m = read_mask(&mpath).map_err(|e| load_err(format!("mask {}: {e}", rec.idx)))?;
            if m.dim() != (h, w) {
                return Err(load_err(format!(
                    "mask size mismatch at frame {}: mask {}x{}, frame {}x{}",
                    rec.idx,
                    m.dim().1,
                    m.dim().0,
                    w,
                    h
                )));
            }
            Some(m)
        } else {
            None
        };
        let point = match rec.point {
            Some([x, y]) => {
                if !(x.is_finite() && y.is_finite()) {
                    return Err(load_err(format!("frame {}: non-finite point", rec.idx)));
                }
                Some(Point::new(x, y))
            }
            None => None,
        };
        let annotation = BleedAnnotation::new(mask, point);
        if annotation.has_region != rec.has_region {
            return Err(load_err(format!(
                "frame {}: has_region = {} disagrees with the mask file",
                rec.idx, rec.has_region
            )));
        }
        let frame = ImageFrame::new(pixels, rec.idx, clip_id)
            .map_err(|e| load_err(format!("frame {}: {e}", rec.idx)))?;
        frames.push((frame, annotation));
    }
    let clip = Clip {
        clip_id: clip_id.to_string(),
        frames,
        fps_tag: ann.fps,
    };
    clip.validate()?;
    Ok(clip)
}

/// Writes a clip in the dataset layout. Masks are always written (all-zero
/// when absent) so a reloaded clip has a mask for every frame.
pub fn write_clip(root: &Path, clip: &Clip) -> Result<()> {
    let dir = clip_dir(root, &clip.clip_id);
    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&frames_dir).at(&frames_dir)?;
    std::fs::create_dir_all(&masks_dir).at(&masks_dir)?;
    let mut records = Vec::with_capacity(clip.len());
    for (frame, ann) in &clip.frames {
        let (h, w) = (frame.height(), frame.width());
        rgb_to_image(frame.pixels()).save(frames_dir.join(frame_file(frame.frame_index)))?;
        mask_to_image(&ann.mask_or_empty(h, w)).save(masks_dir.join(frame_file(frame.frame_index)))?;
        records.push(FrameRecord {
            idx: frame.frame_index,
            point: ann.point.map(|p| [p.x, p.y]),
            has_region: ann.has_region,
        });
    }
    let file = AnnotationFile {
        fps: clip.fps_tag,
        frames: records,
    };
    let path = dir.join("annotations.json");
    std::fs::write(&path, serde_json::to_string_pretty(&file)? + "\n").at(&path)
}

/// Writes ground-truth flow sidecars (`flows[i]` is the flow into frame `first + i + 1`).
pub fn write_flow_sidecars(root: &Path, clip: &Clip, flows: &[FlowField]) -> Result<()> {
    let dir = clip_dir(root, &clip.clip_id).join("flow");
    std::fs::create_dir_all(&dir).at(&dir)?;
    for flow in flows {
        flo::write_flo(&dir.join(format!("{:06}.flo", flow.pair.1)), flow)?;
    }
    Ok(())
}

/// Reads flow sidecars for every consecutive pair of the clip.
pub fn read_flow_sidecars(dir: &Path, clip: &Clip) -> Result<Vec<FlowField>> {
    clip.frames
        .windows(2)
        .map(|pair| {
            let (a, b) = (pair[0].0.frame_index, pair[1].0.frame_index);
            let mut f = flo::read_flo(&dir.join(format!("{b:06}.flo")))?;
            f.pair = (a, b);
            Ok(f)
        })
        .collect()
}

/// 3×3 morphological gradient, `dilate(mask) & !erode(mask)`, with
/// replicated borders.
pub fn derive_edge_map(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dim();
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        mask[[r, c]]
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        let mut any = false;
        let mut all = true;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let v = at(r + dr, c + dc);
                any |= v;
                all &= v;
            }
        }
        any && !all
    })
}

/// Inclusive frame-position ranges, one per target frame `k`: the full
/// window `[k-n+1, k]` once enough history exists, left-truncated before.
pub fn window_sampler(clip_len: usize, n: usize) -> Vec<RangeInclusive<usize>> {
    assert!(n >= 2, "window size must be at least 2");
    (0..clip_len).map(|k| (k + 1).saturating_sub(n)..=k).collect()
}
