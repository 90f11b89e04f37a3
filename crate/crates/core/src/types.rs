//! Shared domain types.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Binary mask indexed `[row, col]`.
pub type BinaryMask = Array2<bool>;

/// Pixel-space point, `x` along columns and `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// RGB frame with values in `[0, 1]`, stored `[row, col, channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pixels: Array3<f32>,
    pub frame_index: usize,
    pub clip_id: String,
}

impl ImageFrame {
    pub fn new(pixels: Array3<f32>, frame_index: usize, clip_id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Input(format!("expected 3 channels, got {c}")));
        }
        if h < 16 || w < 16 {
            return Err(Error::Input(format!("frame {h}x{w} is smaller than 16x16")));
        }
        if let Some(v) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            frame_index,
            clip_id: clip_id.into(),
        })
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Rec. 601 luma.
    pub fn gray(&self) -> Array2<f32> {
        let (h, w, _) = self.pixels.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            0.299 * self.pixels[[r, c, 0]] + 0.587 * self.pixels[[r, c, 1]] + 0.114 * self.pixels[[r, c, 2]]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleedAnnotation {
    pub mask: Option<BinaryMask>,
    pub point: Option<Point>,
    pub has_region: bool,
    pub has_point: bool,
}

impl BleedAnnotation {
    pub fn empty() -> Self {
        Self {
            mask: None,
            point: None,
            has_region: false,
            has_point: false,
        }
    }

    /// Builds an annotation with flags derived from the contents.
    pub fn new(mask: Option<BinaryMask>, point: Option<Point>) -> Self {
        let has_region = mask.as_ref().is_some_and(|m| m.iter().any(|&b| b));
        Self {
            has_point: point.is_some(),
            mask,
            point,
            has_region,
        }
    }

    /// Checks flag consistency and that the point lies inside a `h`×`w` image.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let nonempty = self.mask.as_ref().is_some_and(|m| m.iter().any(|&b| b));
        if self.has_region != nonempty {
            return Err(Error::Input(format!(
                "has_region = {} but mask is {}",
                self.has_region,
                if nonempty { "non-empty" } else { "empty or absent" }
            )));
        }
        if let Some(m) = &self.mask {
            if m.dim() != (h, w) {
                return Err(Error::Shape(format!("mask {:?} vs frame {:?}", m.dim(), (h, w))));
            }
        }
        if self.has_point != self.point.is_some() {
            return Err(Error::Input("has_point disagrees with point presence".into()));
        }
        if let Some(p) = self.point {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64) {
                return Err(Error::Input(format!("point ({}, {}) outside {w}x{h} image", p.x, p.y)));
            }
        }
        Ok(())
    }

    /// Mask or an all-false map of the given size.
    pub fn mask_or_empty(&self, h: usize, w: usize) -> BinaryMask {
        self.mask.clone().unwrap_or_else(|| Array2::from_elem((h, w), false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_rejects_out_of_range() {
        let mut px = Array3::<f32>::zeros((16, 16, 3));
        px[[3, 3, 1]] = 1.5;
        assert!(ImageFrame::new(px, 0, "c").is_err());
        assert!(ImageFrame::new(Array3::zeros((8, 16, 3)), 0, "c").is_err());
        assert!(ImageFrame::new(Array3::zeros((16, 16, 3)), 0, "c").is_ok());
    }

    #[test]
    fn occluded_point_is_valid() {
        let mut m = Array2::from_elem((16, 16), false);
        m[[4, 4]] = true;
        let a = BleedAnnotation::new(Some(m), None);
        assert!(a.has_region && !a.has_point);
        a.validate(16, 16).unwrap();
    }

    #[test]
    fn point_outside_rejected() {
        let a = BleedAnnotation::new(None, Some(Point::new(16.0, 2.0)));
        assert!(a.validate(16, 16).is_err());
    }
}
